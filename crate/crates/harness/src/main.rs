//! `enarf` command line.
//!
//! Exit codes: 0 success, 2 invalid input, 3 non-finite values, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enarf::model::Variant;
use enarf::Error;
use enarf_harness::run::{run, CheckpointDtype, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "enarf",
    version,
    about = "Articulated neural radiance fields on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Render one image from a model or the analytic oracle.
    Render(Flags),
    /// Fit a model to an oracle-rendered multi-view dataset.
    TrainDso(Flags),
    /// Compare cost of model variants on one image.
    Benchmark(Flags),
    /// Score a checkpoint on the train, novel-view and novel-pose splits.
    Eval(Flags),
    /// Draw poses from the scene's joint prior.
    SamplePose(Flags),
    /// Write a scene description.
    MakeScene(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON config file or the manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene preset or scene spec JSON file.
    #[arg(long)]
    scene: Option<String>,
    /// Pose JSON file.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Camera JSON file.
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Comma-separated variants for benchmark.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<Variant>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Square image size in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    time: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Render analytic ground truth instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Store checkpoints as f32 instead of f64.
    #[arg(long)]
    f32: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Flags {
    fn resolve(self) -> enarf::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.scene {
            c.scene = v;
        }
        c.pose = self.pose.or(c.pose);
        c.camera = self.camera.or(c.camera);
        c.checkpoint = self.checkpoint.or(c.checkpoint);
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(v) = self.variants {
            c.variants = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.iters {
            c.train.iters = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.resolution {
            let mut d = c.dataset();
            d.resolution = v;
            c.dataset = Some(d);
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if let Some(v) = self.time {
            c.time = v;
        }
        if let Some(v) = self.batch {
            c.train.batch = v;
        }
        if let Some(v) = self.lr {
            c.train.adam.lr = v;
        }
        if let Some(v) = self.count {
            c.count = v;
        }
        if let Some(v) = self.repetitions {
            c.repetitions = v;
        }
        c.oracle |= self.oracle;
        if self.f32 {
            c.checkpoint_dtype = CheckpointDtype::F32;
        }
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        Error::Numerical { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Sub::Render(f) => (Command::Render, f),
        Sub::TrainDso(f) => (Command::TrainDso, f),
        Sub::Benchmark(f) => (Command::Benchmark, f),
        Sub::Eval(f) => (Command::Eval, f),
        Sub::SamplePose(f) => (Command::SamplePose, f),
        Sub::MakeScene(f) => (Command::MakeScene, f),
    };
    match flags.resolve().and_then(|c| run(command, &c)) {
        Ok(m) => {
            println!(
                "{}: wrote {} files to {}",
                command.name(),
                m.outputs.len(),
                m.config.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
