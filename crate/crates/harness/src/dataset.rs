//! Multi-view, multi-frame datasets rendered by the analytic oracle.

use std::f64::consts::TAU;

use enarf::kinematics::{Camera, Vec3};
use enarf::train::Frame;
use enarf::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::oracle::oracle_render;
use crate::scene::SyntheticScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Square image size in pixels.
    pub resolution: usize,
    /// Training cameras, evenly spaced in azimuth.
    pub views: usize,
    /// Animation frames, evenly spaced over t ∈ [0, 1].
    pub frames: usize,
    /// Leading fraction of frames used for training.
    pub train_fraction: f64,
    pub distance: f64,
    pub elevation: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub near: f64,
    pub far: f64,
    pub oracle_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            views: 4,
            frames: 20,
            train_fraction: 0.8,
            distance: 2.5,
            elevation: 0.35,
            focal_scale: 1.6,
            near: 1.5,
            far: 3.5,
            oracle_samples: 512,
        }
    }
}

impl DatasetConfig {
    /// Default framing for a preset; the humanoid needs a wider shot.
    pub fn for_scene(name: &str) -> Self {
        match name {
            "humanoid9" => Self {
                distance: 3.2,
                near: 1.8,
                far: 4.6,
                focal_scale: 1.4,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 11 || self.views == 0 || self.frames < 2 || self.oracle_samples == 0 {
            return Err(Error::Validation(
                "dataset needs resolution ≥ 11, ≥ 1 view, ≥ 2 frames and ≥ 1 oracle sample".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(
                "train fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.near > 0.0 && self.near < self.distance && self.distance < self.far) {
            return Err(Error::Validation(
                "cameras need near < distance < far".into(),
            ));
        }
        Ok(())
    }

    /// Camera on the viewing ring at the given azimuth, aimed at the origin.
    pub fn camera(&self, azimuth: f64) -> Result<Camera> {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        let eye = Vec3::new(ce * azimuth.sin(), -ce * azimuth.cos(), se) * self.distance;
        let w = self.resolution;
        Camera::look_at(
            eye,
            Vec3::zeros(),
            Vec3::z(),
            self.focal_scale * w as f64,
            w,
            w,
            self.near,
            self.far,
        )
    }

    /// Azimuth of training view `v`; the ring is offset by half a step so
    /// no training view looks down the rest-pose bone axis.
    pub fn train_azimuth(&self, v: usize) -> f64 {
        TAU * (v as f64 + 0.5) / self.views as f64
    }

    /// Held-out azimuth, halfway between the last and first training views.
    pub fn heldout_azimuth(&self) -> f64 {
        0.0
    }

    pub fn frame_time(&self, f: usize) -> f64 {
        f as f64 / (self.frames - 1) as f64
    }

    pub fn train_frames(&self) -> usize {
        ((self.frames as f64 * self.train_fraction).round() as usize).clamp(1, self.frames - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Training views × leading frames.
    pub train: Vec<Frame>,
    /// Held-out camera × training frames.
    pub novel_view: Vec<Frame>,
    /// Training views × trailing frames.
    pub novel_pose: Vec<Frame>,
}

pub fn render_frame(
    scene: &SyntheticScene,
    camera: &Camera,
    time: f64,
    samples: usize,
) -> Result<Frame> {
    let pose = scene.pose_at(time)?;
    let out = oracle_render(scene, &pose, time, camera, samples)?;
    Ok(Frame {
        camera: camera.clone(),
        pose,
        time,
        rgb: out.rgb,
        mask: out.mask,
    })
}

pub fn make_dataset(scene: &SyntheticScene, cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let cams = (0..cfg.views)
        .map(|v| cfg.camera(cfg.train_azimuth(v)))
        .collect::<Result<Vec<_>>>()?;
    let held = cfg.camera(cfg.heldout_azimuth())?;
    let split = cfg.train_frames();
    let mut d = Dataset {
        train: Vec::new(),
        novel_view: Vec::new(),
        novel_pose: Vec::new(),
    };
    for f in 0..cfg.frames {
        let t = cfg.frame_time(f);
        for cam in &cams {
            let fr = render_frame(scene, cam, t, cfg.oracle_samples)?;
            if f < split {
                d.train.push(fr);
            } else {
                d.novel_pose.push(fr);
            }
        }
        if f < split {
            d.novel_view
                .push(render_frame(scene, &held, t, cfg.oracle_samples)?);
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scene, SceneSpec};

    #[test]
    fn split_sizes_and_visibility() {
        let s = make_synthetic_scene(&SceneSpec::preset("capsule2").unwrap(), 0).unwrap();
        let cfg = DatasetConfig {
            resolution: 24,
            frames: 5,
            oracle_samples: 64,
            ..Default::default()
        };
        let d = make_dataset(&s, &cfg).unwrap();
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.novel_view.len(), 4);
        assert_eq!(d.novel_pose.len(), 4);
        for f in d.train.iter().chain(&d.novel_view).chain(&d.novel_pose) {
            f.validate().unwrap();
            let covered = f.mask.data.iter().filter(|m| **m > 0.5).count();
            assert!(covered > 12, "object should be visible");
            // nothing touches the image border
            for i in 0..24 {
                for j in [0, 23] {
                    assert!(f.mask.data[i * 24 + j] < 1e-6 && f.mask.data[j * 24 + i] < 1e-6);
                }
            }
        }
    }
}
