//! File-level steps shared by the command line tool and the tests: dataset
//! export and the run stages that write their results to a directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::artifacts::ArtifactWriter;
use crate::eval::{evaluate_map, EvalAccumulator, EvalReport, VoxelTruth};
use crate::io::{self, IoError, LabeledCloud};
use crate::octree::SemanticOctree;
use crate::pipeline::{
    add_voxel_truth, correct_frame, default_run_config, run, Context, DatasetIndex, DatasetSource,
    FrameOutput, FrameSource, ImageEntry, PathsConfig, PipelineError, RunConfig, RunOptions,
    ScanEntry, StageCounts, Strategy,
};
use crate::classes::argmax;
use crate::synthetic::SyntheticDataset;

fn scan_name(i: usize) -> String {
    format!("scan_{i:04}")
}

fn camera_file(scan: usize, camera: u32, ext: &str) -> String {
    format!("{}_cam{camera}.{ext}", scan_name(scan))
}

/// Writes a generated dataset: calibration, velocity stream, scans, truth,
/// score maps, images, superpixels, the dataset index, the scene
/// description and a run configuration pointing at all of it. Returns the
/// configuration.
pub fn export_synthetic(ds: &SyntheticDataset, dir: &Path) -> Result<RunConfig, PipelineError> {
    let w = |rel: &str, bytes: &[u8]| io::write_bytes(&dir.join(rel), bytes);
    let fmt_err = |rel: &str, m: String| IoError::Format {
        path: dir.join(rel),
        message: m,
    };
    w("scene.toml", io::to_toml(&ds.spec).as_bytes())?;
    w("calibration.toml", io::to_toml(&ds.calibration.to_file()).as_bytes())?;
    w("velocity.csv", io::velocity_to_csv(&ds.velocity).as_bytes())?;
    let entries: Vec<ScanEntry> = (0..ds.spec.scans)
        .into_par_iter()
        .map(|i| -> Result<ScanEntry, PipelineError> {
            let f = ds.frame(i);
            let lidar = format!("scans/{}.bin", scan_name(i));
            w(&lidar, &io::encode_scan(&f.scan))?;
            let truth = format!("truth/{}.bin", scan_name(i));
            w(&truth, &io::encode_truth(f.truth.as_deref().unwrap_or_default()))?;
            let mut image = Vec::new();
            for im in &f.images {
                let score_map = format!("scores/{}", camera_file(i, im.camera, "bin"));
                w(&score_map, &io::encode_score_map(&im.scores))?;
                let rgb = match &im.rgb {
                    Some(img) => {
                        let rel = format!("images/{}", camera_file(i, im.camera, "ppm"));
                        w(&rel, &io::rgb_to_ppm(img).map_err(|m| fmt_err(&rel, m))?)?;
                        Some(rel.into())
                    }
                    None => None,
                };
                let superpixels = match &im.superpixels {
                    Some(sp) => {
                        let rel = format!("superpixels/{}", camera_file(i, im.camera, "bin"));
                        w(&rel, &io::encode_superpixels(sp))?;
                        Some(rel.into())
                    }
                    None => None,
                };
                image.push(ImageEntry {
                    camera: im.camera,
                    t: im.t,
                    score_map: score_map.into(),
                    rgb,
                    superpixels,
                });
            }
            Ok(ScanEntry {
                lidar: lidar.into(),
                truth: Some(truth.into()),
                image,
            })
        })
        .collect::<Result<_, _>>()?;
    w("dataset.toml", io::to_toml(&DatasetIndex { scan: entries }).as_bytes())?;
    let mut cfg = default_run_config(
        PathsConfig {
            calibration: "calibration.toml".into(),
            velocity: "velocity.csv".into(),
            dataset: "dataset.toml".into(),
        },
        ds.seed,
    );
    cfg.classes = ds.class_table.to_config();
    w("config.toml", cfg.to_toml().as_bytes())?;
    Ok(cfg)
}

/// A loaded configuration with everything needed to run it.
pub struct Job {
    pub config: RunConfig,
    /// Raw configuration text, hashed into the manifest.
    pub config_text: String,
    pub context: Context,
    pub source: DatasetSource,
}

impl Job {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let config_text = io::read_text(path)?;
        let config = RunConfig::load(path)?;
        let context = Context::load(&config)?;
        let source = DatasetSource::open(&config.paths.dataset)?;
        Ok(Self {
            config,
            config_text,
            context,
            source,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.context.classes.target
    }
}

/// Which outputs a fusion run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    pub labeled: bool,
    pub map: bool,
    pub plots: bool,
}

impl Outputs {
    pub const FUSE: Outputs = Outputs {
        labeled: true,
        map: false,
        plots: false,
    };
    pub const MAP: Outputs = Outputs {
        labeled: false,
        map: true,
        plots: false,
    };
    pub const ALL: Outputs = Outputs {
        labeled: true,
        map: true,
        plots: true,
    };
}

/// Per-strategy summary of a fusion run.
#[derive(Debug, Clone)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub counts: StageCounts,
    pub points: Option<EvalReport>,
    pub map: Option<EvalReport>,
}

fn counts_csv(counts: &StageCounts) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(counts).expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

/// Fuses every scan with each strategy and writes the requested outputs
/// under `out/<strategy>/`, then a manifest of all files.
pub fn fuse_to_dir(
    job: &Job,
    strategies: &[Strategy],
    outputs: Outputs,
    command: &str,
    out: &Path,
) -> Result<Vec<StrategySummary>, PipelineError> {
    let mut writer = ArtifactWriter::new(out);
    let names = job.names().to_vec();
    let opts = RunOptions {
        strategies: strategies.to_vec(),
        build_map: outputs.map,
        batch: rayon::current_num_threads().max(1) * 2,
    };
    let result = run(&job.source, &job.context, &opts, |f: &FrameOutput| {
        if !outputs.labeled {
            return Ok(());
        }
        for (s, cams) in strategies.iter().zip(&f.outputs) {
            for cam in cams {
                let base = format!("{s}/labeled/{}_cam{}", scan_name(f.index), cam.cloud.camera);
                writer.write(&format!("{base}.bin"), &io::encode_labeled(&cam.cloud))?;
                writer.write(
                    &format!("{base}.csv"),
                    io::labeled_to_csv(&cam.cloud, &names).as_bytes(),
                )?;
            }
        }
        Ok(())
    })?;
    let mut summaries = Vec::new();
    for r in &result.strategies {
        let s = r.strategy;
        writer.write(&format!("{s}/counts.csv"), counts_csv(&r.counts).as_bytes())?;
        let points = r.point_report(&names);
        if let Some(rep) = &points {
            writer.write_report(&format!("{s}/points"), rep)?;
        }
        let map_rep = result.map_report(s, &names)?;
        if let Some(map) = &r.map {
            let dir = format!("{s}/map");
            if outputs.plots {
                writer.write_map(&dir, map, &names, &job.context.classes.palette)?;
            } else {
                writer.write(&format!("{dir}/map.bin"), &io::encode_map(map))?;
            }
            if let Some(rep) = &map_rep {
                writer.write_report(&format!("{dir}/eval"), rep)?;
            }
        }
        summaries.push(StrategySummary {
            strategy: s,
            counts: r.counts,
            points,
            map: map_rep,
        });
    }
    if strategies.len() > 1 && summaries.iter().all(|s| s.points.is_some()) {
        writer.write("comparison.csv", comparison_csv(&summaries, &names).as_bytes())?;
    }
    writer.finish(command, job.config.seed, &job.config_text)?;
    Ok(summaries)
}

/// One row per strategy: macro F1 and per-class F1, points then map.
pub fn comparison_csv(summaries: &[StrategySummary], names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["strategy".to_string(), "level".into(), "labeled".into(), "macro_f1".into()];
    header.extend(names.iter().map(|n| format!("f1_{n}")));
    w.write_record(&header).expect("in-memory csv");
    for s in summaries {
        for (level, rep) in [("points", &s.points), ("map", &s.map)] {
            if let Some(rep) = rep {
                let mut rec = vec![
                    s.strategy.to_string(),
                    level.to_string(),
                    rep.total.to_string(),
                    format!("{:.4}", rep.macro_f1),
                ];
                rec.extend(rep.f1.iter().map(|f| format!("{f:.4}")));
                w.write_record(&rec).expect("in-memory csv");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

/// Writes motion-corrected means and covariances per scan and camera.
pub fn correct_to_dir(job: &Job, out: &Path) -> Result<(), PipelineError> {
    let mut writer = ArtifactWriter::new(out);
    let n = job.source.len();
    let batch = rayon::current_num_threads().max(1) * 2;
    for start in (0..n).step_by(batch) {
        let done: Vec<_> = (start..(start + batch).min(n))
            .into_par_iter()
            .map(|i| {
                let f = job.source.frame(i)?;
                correct_frame(&f, &job.context).map(|c| (i, c))
            })
            .collect::<Result<_, PipelineError>>()?;
        for (i, cams) in done {
            for (camera, t_ref, pts) in cams {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["t_ref", "x", "y", "z", "c_xx", "c_xy", "c_xz", "c_yy", "c_yz", "c_zz"])
                    .expect("in-memory csv");
                for (m, c) in pts {
                    let mut rec = vec![t_ref.to_string(), m.x.to_string(), m.y.to_string(), m.z.to_string()];
                    rec.extend(io::upper3(&c).iter().map(|q| q.to_string()));
                    w.write_record(&rec).expect("in-memory csv");
                }
                let text = w.into_inner().expect("in-memory csv");
                writer.write(&format!("corrected/{}", camera_file(i, camera, "csv")), &text)?;
            }
        }
    }
    writer.finish("correct", job.config.seed, &job.config_text)?;
    Ok(())
}

fn collect_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, IoError> {
    let rd = std::fs::read_dir(dir).map_err(|e| IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

/// Evaluates previously written results: labeled clouds in
/// `input/labeled/*.bin` against point truth, and `input/map/map.bin`
/// against voxel truth. Reports go to `out/points` and `out/map`.
pub fn eval_dir(job: &Job, input: &Path, out: &Path) -> Result<(Option<EvalReport>, Option<EvalReport>), PipelineError> {
    let names = job.names().to_vec();
    let ctx = &job.context;
    let c = ctx.classes.target_count();
    let mut writer = ArtifactWriter::new(out);
    let labeled_dir = input.join("labeled");
    let mut points = None;
    if labeled_dir.is_dir() {
        let mut truths: Vec<Option<Vec<u32>>> = vec![None; job.source.len()];
        let mut acc = EvalAccumulator::new(c);
        for path in collect_files(&labeled_dir, "bin")? {
            let cloud: LabeledCloud = io::decode_labeled(&io::read_bytes(&path)?, &path)?;
            let scan = cloud.scan as usize;
            if scan >= truths.len() {
                return Err(IoError::Format {
                    path,
                    message: format!("scan {scan} is not in the dataset"),
                }
                .into());
            }
            if truths[scan].is_none() {
                truths[scan] = job.source.frame(scan)?.truth;
            }
            let Some(truth) = &truths[scan] else {
                return Err(PipelineError::Config(format!("dataset has no truth for scan {scan}")));
            };
            for p in &cloud.points {
                let t = *truth.get(p.index as usize).ok_or_else(|| IoError::Format {
                    path: path.clone(),
                    message: format!("point index {} out of range", p.index),
                })?;
                if let Some(t) = ctx.classes.merge_label(t) {
                    acc.add(argmax(&p.probs) as u32, t)?;
                }
            }
        }
        let rep = acc.report(&names);
        writer.write_report("points", &rep)?;
        points = Some(rep);
    }
    let map_path = input.join("map").join("map.bin");
    let mut map_rep = None;
    if map_path.is_file() {
        let map = io::decode_map(&io::read_bytes(&map_path)?, &map_path, ctx.octree)?;
        let truth = voxel_truth(job, map.resolution())?;
        let rep = evaluate_map(&map, &truth, &names)?;
        writer.write_report("map", &rep)?;
        map_rep = Some(rep);
    }
    if points.is_none() && map_rep.is_none() {
        return Err(PipelineError::Config(format!(
            "{} holds neither labeled/ nor map/map.bin",
            input.display()
        )));
    }
    writer.finish("eval", job.config.seed, &job.config_text)?;
    Ok((points, map_rep))
}

/// Voxel ground truth from every truth-labeled point of the dataset.
pub fn voxel_truth(job: &Job, resolution: f64) -> Result<VoxelTruth, PipelineError> {
    let mut vt = VoxelTruth::new(job.context.classes.target_count(), resolution);
    for i in 0..job.source.len() {
        let f = job.source.frame(i)?;
        let Some(truth) = &f.truth else {
            return Err(PipelineError::Config(format!("dataset has no truth for scan {i}")));
        };
        add_voxel_truth(&mut vt, &f.scan, truth, &job.context)?;
    }
    Ok(vt)
}

/// Top-down class raster and per-class probability rasters of a map file.
pub fn plot_map(job: &Job, map_path: &Path, out: &Path) -> Result<SemanticOctree, PipelineError> {
    let map = io::decode_map(&io::read_bytes(map_path)?, map_path, job.context.octree)?;
    if map.classes() != job.context.classes.target_count() {
        return Err(IoError::Format {
            path: map_path.to_path_buf(),
            message: format!(
                "map has {} classes, configuration has {}",
                map.classes(),
                job.context.classes.target_count()
            ),
        }
        .into());
    }
    let mut writer = ArtifactWriter::new(out);
    writer.write_plots("", &map, job.names(), &job.context.classes.palette)?;
    writer.finish("plot", job.config.seed, &job.config_text)?;
    Ok(map)
}
