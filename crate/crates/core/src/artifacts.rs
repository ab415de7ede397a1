//! Output files of a run: metric tables, map rasters and a manifest that
//! hashes everything written.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classes::argmax;
use crate::eval::EvalReport;
use crate::io::{self, IoError};
use crate::octree::{MapPoint, SemanticOctree};

fn join(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        name.to_string()
    } else {
        format!("{dir}/{name}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Occupied voxel columns seen from above. Each pixel is one `(ix, iy)`
/// column and shows its highest occupied voxel; +y is up, +x right.
#[derive(Debug, Clone, PartialEq)]
pub struct TopDown {
    pub width: u32,
    pub height: u32,
    pub ix_min: i32,
    pub iy_max: i32,
    /// Top voxel per pixel, row-major.
    pub cells: Vec<Option<MapPoint>>,
}

impl TopDown {
    pub fn new(map: &SemanticOctree) -> Self {
        let mut top: HashMap<(i32, i32), MapPoint> = HashMap::new();
        for p in map.to_point_cloud() {
            let k = (p.key.ix, p.key.iy);
            if top.get(&k).is_none_or(|q| q.key.iz < p.key.iz) {
                top.insert(k, p);
            }
        }
        if top.is_empty() {
            return Self {
                width: 0,
                height: 0,
                ix_min: 0,
                iy_max: 0,
                cells: Vec::new(),
            };
        }
        let ix_min = top.keys().map(|k| k.0).min().expect("non-empty");
        let ix_max = top.keys().map(|k| k.0).max().expect("non-empty");
        let iy_min = top.keys().map(|k| k.1).min().expect("non-empty");
        let iy_max = top.keys().map(|k| k.1).max().expect("non-empty");
        let width = (ix_max - ix_min + 1) as u32;
        let height = (iy_max - iy_min + 1) as u32;
        let mut cells = vec![None; (width * height) as usize];
        for ((ix, iy), p) in top {
            let (u, v) = ((ix - ix_min) as u32, (iy_max - iy) as u32);
            cells[(v * width + u) as usize] = Some(p);
        }
        Self {
            width,
            height,
            ix_min,
            iy_max,
            cells,
        }
    }

    /// Top voxels colored by their most likely class; empty columns black.
    pub fn class_raster(&self, palette: &[[u8; 3]]) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |u, v| {
            let c = self.cells[(v * self.width + u) as usize]
                .as_ref()
                .and_then(|p| palette.get(argmax(&p.class_probs)).copied())
                .unwrap_or([0, 0, 0]);
            Rgb(c)
        })
    }

    /// Probability of `class` at the top voxel, scaled to 0..255.
    pub fn probability_raster(&self, class: usize) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |u, v| {
            let q = self.cells[(v * self.width + u) as usize]
                .as_ref()
                .and_then(|p| p.class_probs.get(class).copied())
                .unwrap_or(0.0);
            Luma([(q.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub file: Vec<ManifestEntry>,
}

/// Writes files below an output directory and records their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: BTreeMap<String, ManifestEntry>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel`, a `/`-separated path below the root.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), IoError> {
        io::write_bytes(&self.root.join(rel), bytes)?;
        self.files.insert(
            rel.to_string(),
            ManifestEntry {
                path: rel.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    fn image_err(&self, rel: &str, m: String) -> IoError {
        IoError::Format {
            path: self.root.join(rel),
            message: m,
        }
    }

    pub fn write_ppm(&mut self, rel: &str, img: &RgbImage) -> Result<(), IoError> {
        let b = io::rgb_to_ppm(img).map_err(|m| self.image_err(rel, m))?;
        self.write(rel, &b)
    }

    pub fn write_pgm(&mut self, rel: &str, img: &GrayImage) -> Result<(), IoError> {
        let b = io::gray_to_pgm(img).map_err(|m| self.image_err(rel, m))?;
        self.write(rel, &b)
    }

    /// `metrics.csv`, `confusion.csv` and `confusion.txt` under `dir`.
    pub fn write_report(&mut self, dir: &str, report: &EvalReport) -> Result<(), IoError> {
        self.write(&format!("{dir}/metrics.csv"), report.metrics_csv().as_bytes())?;
        self.write(&format!("{dir}/confusion.csv"), report.confusion_csv().as_bytes())?;
        self.write(&format!("{dir}/confusion.txt"), report.confusion_table().as_bytes())
    }

    /// Map snapshot, voxel CSV, colored point list, top-down class raster
    /// and one probability raster per class under `dir`.
    pub fn write_map(
        &mut self,
        dir: &str,
        map: &SemanticOctree,
        names: &[String],
        palette: &[[u8; 3]],
    ) -> Result<(), IoError> {
        self.write(&format!("{dir}/map.bin"), &io::encode_map(map))?;
        self.write(&format!("{dir}/voxels.csv"), io::map_to_csv(map, names).as_bytes())?;
        self.write(
            &format!("{dir}/voxels.xyzrgb"),
            io::map_to_colored_points(map, palette).as_bytes(),
        )?;
        self.write_plots(dir, map, names, palette)
    }

    pub fn write_plots(
        &mut self,
        dir: &str,
        map: &SemanticOctree,
        names: &[String],
        palette: &[[u8; 3]],
    ) -> Result<(), IoError> {
        let td = TopDown::new(map);
        self.write_ppm(&join(dir, "top_down.ppm"), &td.class_raster(palette))?;
        for (c, name) in names.iter().enumerate() {
            self.write_pgm(&join(dir, &format!("prob_{name}.pgm")), &td.probability_raster(c))?;
        }
        Ok(())
    }

    /// Writes `manifest.toml` listing every file written so far.
    pub fn finish(mut self, command: &str, seed: u64, config_text: &str) -> Result<Manifest, IoError> {
        let manifest = Manifest {
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            file: std::mem::take(&mut self.files).into_values().collect(),
        };
        io::write_bytes(&self.root.join("manifest.toml"), io::to_toml(&manifest).as_bytes())?;
        Ok(manifest)
    }
}
