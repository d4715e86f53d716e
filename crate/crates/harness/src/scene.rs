//! Synthetic articulated scenes: capsule parts on a kinematic tree, animated
//! by sinusoidal joint trajectories over normalized time.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use enarf::kinematics::{
    forward_kinematics, CanonicalPose, JointPrior, PoseConfig, PosePrior, RigidTransform, Skeleton,
    Vec3,
};
use enarf::triplane::CUBE_HALF_WIDTH;
use enarf::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Presets accepted by [`SceneSpec::preset`].
pub const PRESETS: [&str; 4] = ["capsule2", "capsule2-wobble", "capsule3-chain", "humanoid9"];

/// Density inside a capsule, per meter.
pub const DEFAULT_DENSITY: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    /// Parent part index, `-1` for the root.
    pub parent: i32,
    pub length: f64,
    pub radius: f64,
    /// Albedo; drawn from the seed when absent.
    #[serde(default)]
    pub color: Option<[f64; 3]>,
    /// Rest joint angles (intrinsic XYZ Euler, radians).
    pub rest: [f64; 3],
    /// Animation amplitude per angle.
    #[serde(default)]
    pub amplitude: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub parts: Vec<PartSpec>,
    /// World position of the root joint.
    #[serde(default)]
    pub root: [f64; 3],
    /// Base animation frequency in cycles over t ∈ [0, 1].
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    /// Relative capsule-radius oscillation amplitude; 0 disables it.
    #[serde(default)]
    pub wobble: f64,
    #[serde(default = "default_density")]
    pub density: f64,
}

fn default_frequency() -> f64 {
    1.5
}

fn default_density() -> f64 {
    DEFAULT_DENSITY
}

fn part(
    parent: i32,
    length: f64,
    radius: f64,
    color: Option<[f64; 3]>,
    rest: [f64; 3],
    amplitude: [f64; 3],
) -> PartSpec {
    PartSpec {
        parent,
        length,
        radius,
        color,
        rest,
        amplitude,
    }
}

impl SceneSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let red = Some([0.85, 0.25, 0.2]);
        let blue = Some([0.2, 0.35, 0.85]);
        let spec = match name {
            "capsule2" => SceneSpec {
                name: name.into(),
                parts: vec![
                    part(-1, 0.35, 0.1, red, [0.0, 0.0, 0.0], [0.25, 0.2, 0.3]),
                    part(0, 0.35, 0.1, blue, [0.0, 0.0, 0.0], [0.3, 0.5, 0.9]),
                ],
                root: [-0.35, 0.0, 0.0],
                frequency: 1.5,
                wobble: 0.0,
                density: DEFAULT_DENSITY,
            },
            "capsule2-wobble" => SceneSpec {
                name: name.into(),
                parts: vec![
                    part(-1, 0.35, 0.095, red, [0.0, 0.0, 0.0], [0.0, 0.0, 0.1]),
                    part(0, 0.35, 0.095, blue, [0.0, 0.0, 0.0], [0.0, 0.15, 0.3]),
                ],
                root: [-0.35, 0.0, 0.0],
                frequency: 1.0,
                wobble: 0.4,
                density: DEFAULT_DENSITY,
            },
            "capsule3-chain" => SceneSpec {
                name: name.into(),
                parts: vec![
                    part(-1, 0.3, 0.08, None, [0.0, 0.0, 0.0], [0.2, 0.2, 0.2]),
                    part(0, 0.3, 0.08, None, [0.0, 0.0, 0.0], [0.2, 0.4, 0.7]),
                    part(1, 0.3, 0.08, None, [0.0, 0.0, 0.0], [0.2, 0.4, 0.7]),
                ],
                root: [-0.45, 0.0, 0.0],
                frequency: 1.5,
                wobble: 0.0,
                density: DEFAULT_DENSITY,
            },
            "humanoid9" => SceneSpec {
                name: name.into(),
                parts: vec![
                    // pelvis, pointing down from the hip center
                    part(-1, 0.12, 0.07, None, [0.0, FRAC_PI_2, 0.0], [0.0, 0.0, 0.3]),
                    // spine, folded back up from the pelvis tip
                    part(0, 0.42, 0.08, None, [0.0, 0.0, PI], [0.1, 0.15, 0.1]),
                    part(1, 0.2, 0.09, None, [0.0, 0.0, 0.0], [0.2, 0.2, 0.2]),
                    // arms
                    part(1, 0.26, 0.05, None, [0.0, 0.3, -1.9], [0.3, 0.5, 0.3]),
                    part(3, 0.24, 0.045, None, [0.0, 0.0, 0.3], [0.0, 0.2, 0.6]),
                    part(1, 0.26, 0.05, None, [0.0, -0.3, 1.9], [0.3, 0.5, 0.3]),
                    part(5, 0.24, 0.045, None, [0.0, 0.0, -0.3], [0.0, 0.2, 0.6]),
                    // legs
                    part(0, 0.42, 0.07, None, [0.0, 0.0, 0.2], [0.0, 0.5, 0.1]),
                    part(0, 0.42, 0.07, None, [0.0, 0.0, -0.2], [0.0, 0.5, 0.1]),
                ],
                root: [0.0, 0.0, 0.05],
                frequency: 1.0,
                wobble: 0.0,
                density: DEFAULT_DENSITY,
            },
            _ => {
                return Err(Error::Validation(format!(
                    "unknown scene preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Validation("scene needs at least one part".into()));
        }
        Skeleton::new(self.parts.iter().map(|p| p.parent).collect())?;
        for (k, p) in self.parts.iter().enumerate() {
            if !(p.length > 0.0 && p.length.is_finite()) {
                return Err(Error::Validation(format!("part {k} length must be > 0")));
            }
            let r_max = p.radius * (1.0 + self.wobble.abs());
            if !(p.radius > 0.0 && r_max < CUBE_HALF_WIDTH) {
                return Err(Error::Validation(format!(
                    "part {k} radius {} (max {r_max}) must lie in (0, {CUBE_HALF_WIDTH})",
                    p.radius
                )));
            }
            if 0.5 * p.length + r_max > CUBE_HALF_WIDTH {
                return Err(Error::Validation(format!(
                    "part {k} capsule does not fit the cube prior around its center"
                )));
            }
            if let Some(c) = p.color {
                if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Validation(format!("part {k} color outside [0, 1]")));
                }
            }
            if p.rest.iter().chain(&p.amplitude).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("part {k} angles must be finite")));
            }
        }
        if !(self.wobble >= 0.0 && self.wobble < 1.0) {
            return Err(Error::Validation("wobble must lie in [0, 1)".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite() && self.frequency.is_finite()) {
            return Err(Error::Validation(
                "density must be > 0 and frequency finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub name: String,
    pub skeleton: Skeleton,
    pub lengths: Vec<f64>,
    pub radii: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub rest: Vec<[f64; 3]>,
    pub amplitude: Vec<[f64; 3]>,
    /// Per-angle phase offsets.
    pub phases: Vec<[f64; 3]>,
    /// Per-part frequency in cycles over unit time.
    pub frequencies: Vec<f64>,
    pub wobble: f64,
    pub wobble_phases: Vec<f64>,
    pub density: f64,
    pub root: [f64; 3],
}

/// Builds a scene; the seed fixes animation phases, frequency jitter and any
/// unspecified colors.
pub fn make_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.parts.len();
    let mut colors = Vec::with_capacity(k);
    let mut phases = Vec::with_capacity(k);
    let mut frequencies = Vec::with_capacity(k);
    let mut wobble_phases = Vec::with_capacity(k);
    for (i, p) in spec.parts.iter().enumerate() {
        let hue = (i as f64 / k as f64 + rng.random_range(0.0..0.1)) % 1.0;
        colors.push(p.color.unwrap_or_else(|| hue_color(hue)));
        phases.push([
            rng.random_range(0.0..TAU),
            rng.random_range(0.0..TAU),
            rng.random_range(0.0..TAU),
        ]);
        frequencies.push(spec.frequency * (1.0 + rng.random_range(0.0..0.3)));
        wobble_phases.push(rng.random_range(0.0..TAU));
    }
    Ok(SyntheticScene {
        name: spec.name.clone(),
        skeleton: Skeleton::new(spec.parts.iter().map(|p| p.parent).collect())?,
        lengths: spec.parts.iter().map(|p| p.length).collect(),
        radii: spec.parts.iter().map(|p| p.radius).collect(),
        colors,
        rest: spec.parts.iter().map(|p| p.rest).collect(),
        amplitude: spec.parts.iter().map(|p| p.amplitude).collect(),
        phases,
        frequencies,
        wobble: spec.wobble,
        wobble_phases,
        density: spec.density,
        root: spec.root,
    })
}

/// Saturated color on the hue circle, kept away from black and white.
fn hue_color(h: f64) -> [f64; 3] {
    let f = |shift: f64| 0.5 + 0.35 * (TAU * (h + shift)).cos();
    [f(0.0), f(2.0 / 3.0), f(1.0 / 3.0)]
}

impl SyntheticScene {
    pub fn parts(&self) -> usize {
        self.lengths.len()
    }

    fn root_transform(&self) -> RigidTransform {
        RigidTransform::from_translation(Vec3::from(self.root))
    }

    pub fn angles_at(&self, t: f64) -> Vec<[f64; 3]> {
        (0..self.parts())
            .map(|k| {
                let w = TAU * self.frequencies[k] * t;
                std::array::from_fn(|a| {
                    self.rest[k][a] + self.amplitude[k][a] * (w + self.phases[k][a]).sin()
                })
            })
            .collect()
    }

    pub fn pose_from_angles(&self, angles: &[[f64; 3]]) -> Result<PoseConfig> {
        forward_kinematics(
            &self.skeleton,
            angles,
            &self.lengths,
            &self.root_transform(),
        )
    }

    pub fn pose_at(&self, t: f64) -> Result<PoseConfig> {
        self.pose_from_angles(&self.angles_at(t))
    }

    pub fn rest_pose(&self) -> Result<PoseConfig> {
        self.pose_from_angles(&self.rest)
    }

    /// The rest pose doubles as the canonical pose of every model fit to
    /// this scene.
    pub fn canonical(&self) -> Result<CanonicalPose> {
        Ok(CanonicalPose::from_pose(&self.rest_pose()?))
    }

    pub fn radius_at(&self, k: usize, t: f64) -> f64 {
        let w = TAU * self.frequencies[k] * t + self.wobble_phases[k];
        self.radii[k] * (1.0 + self.wobble * w.sin())
    }

    /// Gaussian joint prior centered on the rest angles with the animation
    /// amplitude as standard deviation.
    pub fn pose_prior(&self) -> PosePrior {
        PosePrior {
            joints: self
                .rest
                .iter()
                .zip(&self.amplitude)
                .map(|(m, a)| {
                    let mut cov = [[0.0; 3]; 3];
                    for i in 0..3 {
                        cov[i][i] = a[i] * a[i] + 1e-6;
                    }
                    JointPrior { mean: *m, cov }
                })
                .collect(),
        }
    }
}
