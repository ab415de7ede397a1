use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semfuse::io;
use semfuse::pipeline::{PipelineError, Strategy};
use semfuse::synthetic::{SyntheticDataset, SyntheticSceneSpec};
use semfuse::workflow::{self, Job, Outputs, StrategySummary};

#[derive(Parser)]
#[command(name = "semfuse", version, about = "Camera-lidar semantic fusion and mapping")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with ground truth and a run configuration.
    Generate(GenerateArgs),
    /// Write motion-corrected point means and covariances.
    Correct(RunArgs),
    /// Write labeled point clouds and point-level metrics.
    Fuse(RunArgs),
    /// Build the semantic map and write it with voxel-level metrics.
    Map(RunArgs),
    /// Evaluate labeled clouds and a map written by an earlier run.
    Eval(EvalArgs),
    /// Render a map file as top-down class and probability rasters.
    Plot(PlotArgs),
    /// Full pipeline: labeled clouds, map, metrics, rasters and manifest.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    Urban,
    SingleWall,
    TwoWalls,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "urban")]
    scene: Scene,
    /// Scene description file; overrides --scene, --scans and --speed.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    scans: usize,
    /// Platform speed, m/s.
    #[arg(long, default_value_t = 8.0)]
    speed: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Strategy to run; repeat or pass `all` to compare. Defaults to the
    /// configured strategy.
    #[arg(long, value_parser = parse_strategies)]
    strategy: Vec<Vec<Strategy>>,
    /// Overrides the configured seed recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory of one strategy from `fuse`, `map` or `run`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    config: PathBuf,
    /// Map snapshot written by `map` or `run`.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategies(s: &str) -> Result<Vec<Strategy>, String> {
    if s == "all" {
        Ok(Strategy::ALL.to_vec())
    } else {
        s.parse().map(|k| vec![k])
    }
}

enum Failure {
    Config(String),
    Data(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

/// Loads a run configuration; any failure here is a configuration error.
fn load_job(config: &Path, seed: Option<u64>) -> Result<Job, Failure> {
    let mut job = Job::load(config).map_err(|e| match e {
        PipelineError::Io(io::IoError::Format { .. }) | PipelineError::Stage { .. } => {
            Failure::Data(e.to_string())
        }
        e => Failure::Config(e.to_string()),
    })?;
    if let Some(s) = seed {
        job.config.seed = s;
    }
    Ok(job)
}

fn strategies(args: &RunArgs, job: &Job) -> Vec<Strategy> {
    let mut v: Vec<Strategy> = args.strategy.iter().flatten().copied().collect();
    if v.is_empty() {
        v.push(job.config.strategy);
    }
    v.sort();
    v.dedup();
    v
}

fn print_summary(summaries: &[StrategySummary]) {
    for s in summaries {
        let mut line = format!("{}: {} labeled points", s.strategy, s.counts.labeled);
        if let Some(r) = &s.points {
            line.push_str(&format!(", point macro-F1 {:.4}", r.macro_f1));
        }
        if let Some(r) = &s.map {
            line.push_str(&format!(", map macro-F1 {:.4}", r.macro_f1));
        }
        println!("{line}");
    }
}

fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let spec = match &a.spec {
        Some(p) => {
            let text = io::read_text(p).map_err(|e| Failure::Config(e.to_string()))?;
            io::parse_toml::<SyntheticSceneSpec>(&text, p).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => match a.scene {
            Scene::Urban => SyntheticSceneSpec::urban(a.scans, a.speed),
            Scene::SingleWall => SyntheticSceneSpec::single_wall(a.scans, a.speed),
            Scene::TwoWalls => SyntheticSceneSpec::two_walls(),
        },
    };
    let ds = SyntheticDataset::new(spec, a.seed).map_err(|e| Failure::Config(e.to_string()))?;
    workflow::export_synthetic(&ds, &a.out)?;
    println!(
        "wrote {} scans to {}",
        ds.spec.scans,
        a.out.join("config.toml").display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Correct(a) => {
            let job = load_job(&a.config, a.seed)?;
            workflow::correct_to_dir(&job, &a.out)?;
            Ok(())
        }
        Command::Fuse(a) | Command::Map(a) | Command::Run(a) => {
            let job = load_job(&a.config, a.seed)?;
            let (outputs, name) = match &cli.command {
                Command::Fuse(_) => (Outputs::FUSE, "fuse"),
                Command::Map(_) => (Outputs::MAP, "map"),
                _ => (
                    Outputs {
                        map: job.config.build_map,
                        ..Outputs::ALL
                    },
                    "run",
                ),
            };
            let s = strategies(a, &job);
            let summaries = workflow::fuse_to_dir(&job, &s, outputs, name, &a.out)?;
            print_summary(&summaries);
            Ok(())
        }
        Command::Eval(a) => {
            let job = load_job(&a.config, a.seed)?;
            let (points, map) = workflow::eval_dir(&job, &a.input, &a.out)?;
            if let Some(r) = points {
                println!("points: macro-F1 {:.4} over {} points", r.macro_f1, r.total);
            }
            if let Some(r) = map {
                println!("map: macro-F1 {:.4} over {} voxels", r.macro_f1, r.total);
            }
            Ok(())
        }
        Command::Plot(a) => {
            let job = load_job(&a.config, a.seed)?;
            let map = workflow::plot_map(&job, &a.map, &a.out)?;
            println!("plotted {} occupied voxels", map.to_point_cloud().len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(3)
        }
    }
}
