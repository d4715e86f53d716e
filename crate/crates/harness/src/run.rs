//! Command implementations behind the `enarf` binary.
//!
//! Every command takes a fully resolved [`RunConfig`], writes its outputs
//! under `config.out` and finishes with a `manifest.json` that records the
//! command, the resolved configuration and every output file. Passing that
//! manifest back as `--config` reruns the command with identical settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use enarf::checkpoint::{Checkpoint, Dtype};
use enarf::kinematics::{sample_pose_gaussian, Camera, PoseConfig, RigidTransform, Vec3};
use enarf::model::{Model, ModelConfig, RenderStats, Variant};
use enarf::renderer::{render_image, RenderOutput};
use enarf::train::{evaluate, Frame, TrainConfig, Trainer};
use enarf::{Error, Image, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{benchmark_compare, reports_csv, BenchConfig};
use crate::cost::count_flops;
use crate::dataset::{make_dataset, DatasetConfig};
use crate::oracle::oracle_render;
use crate::scene::{make_synthetic_scene, SceneSpec, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Render,
    TrainDso,
    Benchmark,
    Eval,
    SamplePose,
    MakeScene,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Render => "render",
            Command::TrainDso => "train-dso",
            Command::Benchmark => "benchmark",
            Command::Eval => "eval",
            Command::SamplePose => "sample-pose",
            Command::MakeScene => "make-scene",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointDtype {
    F32,
    F64,
}

impl From<CheckpointDtype> for Dtype {
    fn from(d: CheckpointDtype) -> Self {
        match d {
            CheckpointDtype::F32 => Dtype::F32,
            CheckpointDtype::F64 => Dtype::F64,
        }
    }
}

/// Settings shared by all commands; unused fields are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a scene spec JSON file.
    pub scene: String,
    /// Pose JSON file; defaults to the scene's pose at `time`.
    pub pose: Option<PathBuf>,
    /// Camera JSON file; defaults to the held-out dataset camera.
    pub camera: Option<PathBuf>,
    /// Trained weights; models start from their initialization otherwise.
    pub checkpoint: Option<PathBuf>,
    pub variant: Variant,
    /// Variants compared by `benchmark`.
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub out: PathBuf,
    /// Rayon worker threads; 0 uses the rayon default.
    pub threads: usize,
    /// Animation time of the rendered pose.
    pub time: f64,
    /// Render the analytic ground truth instead of a model.
    pub oracle: bool,
    /// Number of poses drawn by `sample-pose`.
    pub count: usize,
    pub repetitions: usize,
    pub checkpoint_dtype: CheckpointDtype,
    /// Dataset and camera framing; defaults depend on the scene.
    pub dataset: Option<DatasetConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "capsule2".into(),
            pose: None,
            camera: None,
            checkpoint: None,
            variant: Variant::Enarf,
            variants: vec![Variant::Enarf, Variant::MlpSelector, Variant::BaselineNarf],
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
            time: 0.5,
            oracle: false,
            count: 1,
            repetitions: 3,
            checkpoint_dtype: CheckpointDtype::F64,
            dataset: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the `config` of a manifest written by an
    /// earlier run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| invalid_json(path, e))?;
        let value = match value {
            serde_json::Value::Object(mut m)
                if m.contains_key("command") && m.contains_key("config") =>
            {
                m.remove("config").unwrap_or_default()
            }
            v => v,
        };
        serde_json::from_value(value).map_err(|e| invalid_json(path, e))
    }

    pub fn dataset(&self) -> DatasetConfig {
        self.dataset
            .clone()
            .unwrap_or_else(|| DatasetConfig::for_scene(&self.scene))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::Validation(format!(
                "time must lie in [0, 1], got {}",
                self.time
            )));
        }
        if self.count == 0 || self.repetitions == 0 {
            return Err(Error::Validation(
                "count and repetitions must be at least 1".into(),
            ));
        }
        if self.variants.is_empty() {
            return Err(Error::Validation("at least one variant is required".into()));
        }
        self.dataset().validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Scene spec from a preset name or a JSON file.
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let path = Path::new(&self.scene);
        if path.extension().is_some_and(|e| e == "json") || path.is_file() {
            read_json(path)
        } else {
            SceneSpec::preset(&self.scene)
        }
    }

    pub fn make_scene(&self) -> Result<SyntheticScene> {
        make_synthetic_scene(&self.scene_spec()?, self.seed)
    }

    fn pose(&self, scene: &SyntheticScene) -> Result<PoseConfig> {
        let pose: PoseConfig = match &self.pose {
            Some(p) => read_json(p)?,
            None => scene.pose_at(self.time)?,
        };
        if pose.len() != scene.parts() {
            return Err(Error::Shape(format!(
                "pose has {} parts, scene {}",
                pose.len(),
                scene.parts()
            )));
        }
        Ok(pose)
    }

    fn camera(&self) -> Result<Camera> {
        match &self.camera {
            Some(p) => read_json(p),
            None => {
                let d = self.dataset();
                d.camera(d.heldout_azimuth())
            }
        }
    }
}

fn invalid_json(path: &Path, e: serde_json::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| invalid_json(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub config: RunConfig,
    pub threads: usize,
    /// Output files relative to the output directory, in write order.
    pub outputs: Vec<String>,
}

/// Output directory that remembers what was written into it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(p, data)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.bytes(name, text.as_bytes())
    }

    /// Writes the image as PNG (clamped to [0, 1]) and as a little-endian
    /// float32 array named `<stem>_<w>x<h>x<c>.f32`.
    fn image(&mut self, stem: &str, img: &Image) -> Result<()> {
        let raw: Vec<u8> = img
            .data
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect();
        self.bytes(
            &format!("{stem}_{}x{}x{}.f32", img.width, img.height, img.channels),
            &raw,
        )?;
        self.png(stem, img)
    }

    fn png(&mut self, stem: &str, img: &Image) -> Result<()> {
        let bytes: Vec<u8> = img
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (img.width as u32, img.height as u32);
        let p = self.path(&format!("{stem}.png"));
        let res = match img.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(&p)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(&p)),
            c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(image::ImageError::IoError(e))) => Err(Error::Io(e)),
            Some(Err(e)) => Err(Error::Format(e.to_string())),
            None => Err(Error::Shape("image buffer does not match its size".into())),
        }
    }

    fn render(&mut self, prefix: &str, out: &RenderOutput) -> Result<()> {
        self.image(&format!("{prefix}rgb"), &out.rgb)?;
        self.image(&format!("{prefix}mask"), &out.mask)?;
        self.image(&format!("{prefix}inv_depth"), &out.inv_depth)
    }

    fn finish(mut self, command: Command, config: &RunConfig) -> Result<Manifest> {
        let mut outputs = self.files.clone();
        outputs.push("manifest.json".into());
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            threads: rayon::current_num_threads(),
            outputs,
        };
        self.json("manifest.json", &m)?;
        Ok(m)
    }
}

/// Runs `command` on a rayon pool of `config.threads` workers.
pub fn run(command: Command, config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if config.threads > 0 {
        pool = pool.num_threads(config.threads);
    }
    let pool = pool.build().map_err(|e| Error::State(e.to_string()))?;
    pool.install(|| match command {
        Command::MakeScene => make_scene(config),
        Command::SamplePose => sample_pose(config),
        Command::Render => render(config),
        Command::TrainDso => train_dso(config),
        Command::Eval => eval(config),
        Command::Benchmark => benchmark(config),
    })
}

fn make_scene(config: &RunConfig) -> Result<Manifest> {
    let spec = config.scene_spec()?;
    let scene = make_synthetic_scene(&spec, config.seed)?;
    let mut out = Outputs::new(&config.out)?;
    out.json("spec.json", &spec)?;
    out.json("scene.json", &scene)?;
    out.json("rest_pose.json", &scene.rest_pose()?)?;
    out.finish(Command::MakeScene, config)
}

fn sample_pose(config: &RunConfig) -> Result<Manifest> {
    let scene = config.make_scene()?;
    let prior = scene.pose_prior();
    let root = RigidTransform::from_translation(Vec3::from(scene.root));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Outputs::new(&config.out)?;
    for i in 0..config.count {
        let pose = sample_pose_gaussian(&prior, &scene.skeleton, &scene.lengths, &root, &mut rng)?;
        out.json(&format!("pose_{i:04}.json"), &pose)?;
    }
    out.finish(Command::SamplePose, config)
}

/// Model and weights from the checkpoint, or a fresh initialization.
fn load_model(config: &RunConfig, scene: &SyntheticScene) -> Result<(Model, Vec<f64>)> {
    match &config.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.model()?;
            if model.parts() != scene.parts() {
                return Err(Error::Shape(format!(
                    "checkpoint has {} parts, scene {}",
                    model.parts(),
                    scene.parts()
                )));
            }
            Ok((model, ck.params.values))
        }
        None => {
            let model = Model::new(
                ModelConfig {
                    variant: config.variant,
                    ..config.model.clone()
                },
                scene.canonical()?,
            )?;
            let params = model.init_params(config.seed).values;
            Ok((model, params))
        }
    }
}

#[derive(Serialize)]
struct RenderSummary {
    variant: Option<Variant>,
    stats: RenderStats,
    flops: Option<f64>,
}

fn render(config: &RunConfig) -> Result<Manifest> {
    let scene = config.make_scene()?;
    let pose = config.pose(&scene)?;
    let camera = config.camera()?;
    let mut out = Outputs::new(&config.out)?;
    let summary = if config.oracle {
        let img = oracle_render(
            &scene,
            &pose,
            config.time,
            &camera,
            config.dataset().oracle_samples,
        )?;
        out.render("", &img)?;
        RenderSummary {
            variant: None,
            stats: img.stats,
            flops: None,
        }
    } else {
        let (model, params) = load_model(config, &scene)?;
        let field = model.prepare(&params, &pose, config.time)?;
        let img = render_image(&camera, &field, &config.train.render, config.seed)?;
        if !img.rgb.is_finite() || !img.mask.is_finite() {
            return Err(Error::Numerical {
                slice: "render".into(),
                detail: "rendered image contains non-finite values".into(),
            });
        }
        out.render("", &img)?;
        RenderSummary {
            variant: Some(model.variant()),
            stats: img.stats,
            flops: Some(count_flops(&model, &config.train.render, &img.stats)),
        }
    };
    out.json("stats.json", &summary)?;
    out.finish(Command::Render, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: Variant,
    pub iterations: u64,
    pub train: SplitMetrics,
    pub novel_view: SplitMetrics,
    pub novel_pose: SplitMetrics,
}

fn eval_split(
    model: &Model,
    params: &[f64],
    frames: &[Frame],
    config: &RunConfig,
    out: &mut Outputs,
    name: &str,
) -> Result<SplitMetrics> {
    let r = evaluate(model, params, frames, &config.train.render, config.seed)?;
    if let Some(first) = r.renders.first() {
        out.png(&format!("{name}_000"), &first.rgb)?;
        out.png(&format!("{name}_000_target"), &frames[0].rgb)?;
    }
    Ok(SplitMetrics {
        psnr: r.psnr,
        ssim: r.ssim,
        frames: frames.len(),
    })
}

fn summarize(
    model: &Model,
    params: &[f64],
    iterations: u64,
    data: &crate::dataset::Dataset,
    config: &RunConfig,
    out: &mut Outputs,
) -> Result<EvalSummary> {
    let summary = EvalSummary {
        variant: model.variant(),
        iterations,
        train: eval_split(model, params, &data.train, config, out, "train")?,
        novel_view: eval_split(model, params, &data.novel_view, config, out, "novel_view")?,
        novel_pose: eval_split(model, params, &data.novel_pose, config, out, "novel_pose")?,
    };
    out.json("eval.json", &summary)?;
    Ok(summary)
}

fn train_dso(config: &RunConfig) -> Result<Manifest> {
    let scene = config.make_scene()?;
    let data = make_dataset(&scene, &config.dataset())?;
    let mut out = Outputs::new(&config.out)?;
    let mut train = config.train.clone();
    train.seed = config.seed;
    let resume = match &config.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let model = match &resume {
        Some(ck) => ck.model()?,
        None => Model::new(
            ModelConfig {
                variant: config.variant,
                ..config.model.clone()
            },
            scene.canonical()?,
        )?,
    };
    let mut trainer = match resume {
        Some(ck) => {
            let adam = ck.adam.ok_or_else(|| {
                Error::Validation("checkpoint has no optimizer state to resume from".into())
            })?;
            Trainer::resume(
                &model,
                &data.train,
                &data.novel_view,
                train,
                ck.params,
                adam,
            )?
        }
        None => Trainer::new(&model, &data.train, &data.novel_view, train)?,
    };
    let started = Instant::now();
    trainer.run()?;
    let elapsed = started.elapsed().as_secs_f64();
    out.bytes("metrics.csv", trainer.log.to_csv().as_bytes())?;
    out.bytes("timing.csv", trainer.log.timing_csv().as_bytes())?;
    let ck = Checkpoint::new(&model, trainer.params.clone(), Some(trainer.adam.clone()))?;
    out.bytes(
        "checkpoint.bin",
        &ck.to_bytes(config.checkpoint_dtype.into())?,
    )?;
    summarize(
        &model,
        &trainer.params.values,
        trainer.adam.step,
        &data,
        config,
        &mut out,
    )?;
    let m = out.finish(Command::TrainDso, config)?;
    eprintln!(
        "trained {} iterations in {elapsed:.1}s",
        trainer.iteration()
    );
    Ok(m)
}

fn eval(config: &RunConfig) -> Result<Manifest> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Validation("eval needs --checkpoint".into()))?;
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    let scene = config.make_scene()?;
    if model.parts() != scene.parts() {
        return Err(Error::Shape(format!(
            "checkpoint has {} parts, scene {}",
            model.parts(),
            scene.parts()
        )));
    }
    let data = make_dataset(&scene, &config.dataset())?;
    let mut out = Outputs::new(&config.out)?;
    let step = ck.adam.as_ref().map_or(0, |a| a.step);
    summarize(&model, &ck.params.values, step, &data, config, &mut out)?;
    out.finish(Command::Eval, config)
}

fn benchmark(config: &RunConfig) -> Result<Manifest> {
    let scene = config.make_scene()?;
    let pose = config.pose(&scene)?;
    let camera = config.camera()?;
    let cfg = BenchConfig {
        model: config.model.clone(),
        render: config.train.render,
        repetitions: config.repetitions,
        seed: config.seed,
    };
    let reports = benchmark_compare(&config.variants, &scene, &pose, &camera, &cfg)?;
    // timings vary between runs, so they stay out of the deterministic outputs
    let mut out = Outputs::new(&config.out)?;
    out.bytes("costs.csv", reports_csv(&reports).as_bytes())?;
    out.json("costs.json", &reports)?;
    out.finish(Command::Benchmark, config)
}
