//! Rigid-part poses, coordinate transforms between world, part-local and
//! canonical space, forward kinematics, the joint-angle pose prior and
//! skeleton rasterization.
//!
//! Conventions:
//! - joint rotations are intrinsic XYZ Euler angles, `R = Rx(a) * Ry(b) * Rz(c)`;
//! - a part's bone lies along its local `+x` axis, from the part origin to
//!   `(length, 0, 0)`; children are attached at the parent's bone tip;
//! - the world is `+z` up;
//! - cameras follow the pinhole model with `x` right, `y` down, `z` forward.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::image::Image;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Intrinsic XYZ Euler rotation.
pub fn euler_xyz(angles: [f64; 3]) -> Mat3 {
    rot_x(angles[0]) * rot_y(angles[1]) * rot_z(angles[2])
}

/// Rotation plus translation, mapping part-local points to world points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

/// Serialized form: rotation as 9 row-major floats.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        RigidTransform::new(
            Mat3::from_row_slice(&r.rotation),
            Vec3::from_column_slice(&r.translation),
        )
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        TransformRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(validation("rigid transform has non-finite entries"));
        }
        let gram = rotation.transpose() * rotation - Mat3::identity();
        if gram.abs().max() > ORTHONORMAL_TOL {
            return Err(validation(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {:e})",
                gram.abs().max()
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(validation(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Local to world.
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// World to local: `Rᵀ (x - t)`.
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(x - self.translation))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            translation: -(rt * self.translation),
            rotation: rt,
        }
    }

    /// Premultiplies the rotation, keeping the translation.
    pub fn rotated(&self, r: &Mat3) -> RigidTransform {
        RigidTransform {
            rotation: r * self.rotation,
            translation: self.translation,
        }
    }
}

/// Maps a world point into a part's local frame.
pub fn to_local(x: &Vec3, part: &RigidTransform) -> Vec3 {
    part.to_local(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePart {
    pub length: f64,
    pub transform: RigidTransform,
}

/// An articulated pose: one bone length and rigid transform per part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct PoseConfig {
    parts: Vec<PosePart>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    parts: Vec<PosePart>,
}

impl TryFrom<PoseRepr> for PoseConfig {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        PoseConfig::new(r.parts)
    }
}

impl From<PoseConfig> for PoseRepr {
    fn from(p: PoseConfig) -> Self {
        PoseRepr { parts: p.parts }
    }
}

fn check_lengths<'a>(lengths: impl Iterator<Item = &'a f64>) -> Result<()> {
    for (k, l) in lengths.enumerate() {
        if !(l.is_finite() && *l > 0.0) {
            return Err(validation(format!("part {k} has non-positive length {l}")));
        }
    }
    Ok(())
}

impl PoseConfig {
    pub fn new(parts: Vec<PosePart>) -> Result<Self> {
        if parts.is_empty() {
            return Err(validation("pose needs at least one part"));
        }
        check_lengths(parts.iter().map(|p| &p.length))?;
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[PosePart] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn part(&self, k: usize) -> Result<&PosePart> {
        self.parts.get(k).ok_or(Error::Index {
            what: "part",
            index: k,
            len: self.parts.len(),
        })
    }

    /// World-space bone segment `(joint, tip)` of part `k`.
    pub fn bone_segment(&self, k: usize) -> (Vec3, Vec3) {
        let p = &self.parts[k];
        let joint = *p.transform.translation();
        (joint, p.transform.apply(&Vec3::new(p.length, 0.0, 0.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPart {
    pub length: f64,
    pub transform: RigidTransform,
    /// Part center in canonical space; the cube prior is centered here.
    pub center: [f64; 3],
}

/// The reference pose whose frame hosts the tri-plane features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CanonRepr", into = "CanonRepr")]
pub struct CanonicalPose {
    parts: Vec<CanonicalPart>,
}

#[derive(Serialize, Deserialize)]
struct CanonRepr {
    parts: Vec<CanonicalPart>,
}

impl TryFrom<CanonRepr> for CanonicalPose {
    type Error = Error;
    fn try_from(r: CanonRepr) -> Result<Self> {
        CanonicalPose::new(r.parts)
    }
}

impl From<CanonicalPose> for CanonRepr {
    fn from(p: CanonicalPose) -> Self {
        CanonRepr { parts: p.parts }
    }
}

impl CanonicalPose {
    pub fn new(parts: Vec<CanonicalPart>) -> Result<Self> {
        if parts.is_empty() {
            return Err(validation("canonical pose needs at least one part"));
        }
        check_lengths(parts.iter().map(|p| &p.length))?;
        Ok(Self { parts })
    }

    /// Uses `pose` as the canonical pose, with centers at the bone midpoints.
    pub fn from_pose(pose: &PoseConfig) -> Self {
        let parts = pose
            .parts()
            .iter()
            .map(|p| {
                let c = p.transform.apply(&Vec3::new(0.5 * p.length, 0.0, 0.0));
                CanonicalPart {
                    length: p.length,
                    transform: p.transform.clone(),
                    center: [c.x, c.y, c.z],
                }
            })
            .collect();
        Self { parts }
    }

    pub fn parts(&self) -> &[CanonicalPart] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn center(&self, k: usize) -> Vec3 {
        Vec3::from(self.parts[k].center)
    }
}

/// Affine map from world space into the canonical space of one part,
/// `x_c = A x + b` with `A = s R_c Rᵀ` and `b = t_c - A t`
/// (`s = l_c / l` when bone-length normalization is on, else 1).
#[derive(Clone, Debug)]
pub struct CanonicalMap {
    pub linear: Mat3,
    pub offset: Vec3,
}

impl CanonicalMap {
    pub fn new(part: &PosePart, canon: &CanonicalPart, normalize_length: bool) -> Self {
        let scale = if normalize_length {
            canon.length / part.length
        } else {
            1.0
        };
        let linear = canon.transform.rotation() * part.transform.rotation().transpose() * scale;
        let offset = canon.transform.translation() - linear * part.transform.translation();
        Self { linear, offset }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.linear * x + self.offset
    }
}

/// Maps `x` into the canonical space of part `k`.
pub fn to_canonical(
    x: &Vec3,
    part_index: usize,
    pose: &PoseConfig,
    canon: &CanonicalPose,
    normalize_length: bool,
) -> Result<Vec3> {
    let part = pose.part(part_index)?;
    let cpart = canon.parts.get(part_index).ok_or(Error::Index {
        what: "canonical part",
        index: part_index,
        len: canon.len(),
    })?;
    let local = part.transform.to_local(x);
    let scale = if normalize_length {
        cpart.length / part.length
    } else {
        1.0
    };
    Ok(cpart.transform.rotation() * local * scale + cpart.transform.translation())
}

/// Kinematic tree over parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent part index, `-1` for the root.
    pub parents: Vec<i32>,
    #[serde(default)]
    pub names: Vec<String>,
}

impl Skeleton {
    pub fn new(parents: Vec<i32>) -> Result<Self> {
        let s = Self {
            parents,
            names: Vec::new(),
        };
        s.topological_order()?;
        Ok(s)
    }

    pub fn chain(k: usize) -> Self {
        Self {
            parents: (0..k as i32).map(|i| i - 1).collect(),
            names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        usize::try_from(self.parents[k]).ok()
    }

    /// Parts ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let k = self.parents.len();
        if k == 0 {
            return Err(Error::Structural("skeleton has no parts".into()));
        }
        let mut roots = 0;
        let mut children = vec![Vec::new(); k];
        for (i, &p) in self.parents.iter().enumerate() {
            if p == -1 {
                roots += 1;
            } else if p < 0 || p as usize >= k {
                return Err(Error::Structural(format!(
                    "part {i} has invalid parent {p}"
                )));
            } else {
                children[p as usize].push(i);
            }
        }
        if roots != 1 {
            return Err(Error::Structural(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        let root = self.parents.iter().position(|&p| p == -1).unwrap();
        let mut order = Vec::with_capacity(k);
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(children[n].iter().rev());
        }
        if order.len() != k {
            return Err(Error::Structural(
                "parent graph contains a cycle or unreachable parts".into(),
            ));
        }
        Ok(order)
    }
}

/// Composes joint rotations down the tree. The root takes `root` followed by
/// its own joint rotation; every child is attached at its parent's bone tip.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    joint_angles: &[[f64; 3]],
    lengths: &[f64],
    root: &RigidTransform,
) -> Result<PoseConfig> {
    let k = skeleton.len();
    if joint_angles.len() != k || lengths.len() != k {
        return Err(crate::error::shape(format!(
            "skeleton has {k} parts, got {} angle triples and {} lengths",
            joint_angles.len(),
            lengths.len()
        )));
    }
    check_lengths(lengths.iter())?;
    let order = skeleton.topological_order()?;
    let mut transforms: Vec<Option<RigidTransform>> = vec![None; k];
    for &i in &order {
        let joint = euler_xyz(joint_angles[i]);
        let t = match skeleton.parent(i) {
            None => RigidTransform {
                rotation: root.rotation * joint,
                translation: root.translation,
            },
            Some(p) => {
                let parent = transforms[p].as_ref().expect("parent precedes child");
                RigidTransform {
                    rotation: parent.rotation * joint,
                    translation: parent.translation
                        + parent.rotation * Vec3::new(lengths[p], 0.0, 0.0),
                }
            }
        };
        transforms[i] = Some(t);
    }
    PoseConfig::new(
        transforms
            .into_iter()
            .zip(lengths)
            .map(|(t, &length)| PosePart {
                length,
                transform: t.expect("every part visited"),
            })
            .collect(),
    )
}

/// Gaussian prior over one joint's Euler angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPrior {
    pub mean: [f64; 3],
    /// Row-major 3×3 covariance.
    pub cov: [[f64; 3]; 3],
}

/// Independent multivariate normal per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub joints: Vec<JointPrior>,
}

impl PosePrior {
    /// Square-root factors `V diag(√λ)` of each covariance.
    fn factors(&self) -> Result<Vec<Mat3>> {
        self.joints
            .iter()
            .enumerate()
            .map(|(j, jp)| {
                let c = Mat3::from_fn(|r, col| jp.cov[r][col]);
                if !c.iter().all(|v| v.is_finite()) || !jp.mean.iter().all(|v| v.is_finite()) {
                    return Err(validation(format!("joint {j} prior is not finite")));
                }
                if (c - c.transpose()).abs().max() > 1e-12 {
                    return Err(validation(format!("joint {j} covariance is not symmetric")));
                }
                let eig = SymmetricEigen::new(c);
                let scale = c.abs().max().max(1.0);
                let mut sqrt = Vec3::zeros();
                for i in 0..3 {
                    let l = eig.eigenvalues[i];
                    if l < -1e-12 * scale {
                        return Err(validation(format!(
                            "joint {j} covariance is not positive semi-definite (eigenvalue {l:e})"
                        )));
                    }
                    sqrt[i] = l.max(0.0).sqrt();
                }
                Ok(eig.eigenvectors * Mat3::from_diagonal(&sqrt))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.factors().map(|_| ())
    }

    /// Draws one angle triple per joint.
    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<[f64; 3]>> {
        let factors = self.factors()?;
        Ok(self
            .joints
            .iter()
            .zip(&factors)
            .map(|(jp, f)| {
                let z = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let d = f * z;
                [jp.mean[0] + d.x, jp.mean[1] + d.y, jp.mean[2] + d.z]
            })
            .collect())
    }
}

/// Samples joint angles from the prior, spins the whole figure by a uniform
/// angle about the vertical axis and runs forward kinematics.
pub fn sample_pose_gaussian<R: Rng + ?Sized>(
    prior: &PosePrior,
    skeleton: &Skeleton,
    lengths: &[f64],
    root: &RigidTransform,
    rng: &mut R,
) -> Result<PoseConfig> {
    if prior.joints.len() != skeleton.len() {
        return Err(crate::error::shape(format!(
            "prior has {} joints, skeleton {}",
            prior.joints.len(),
            skeleton.len()
        )));
    }
    let angles = prior.sample_angles(rng)?;
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    forward_kinematics(skeleton, &angles, lengths, &root.rotated(&rot_z(yaw)))
}

/// Pinhole camera; `extrinsic` maps world points into camera coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct Camera {
    pub extrinsic: RigidTransform,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    extrinsic: RigidTransform,
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

impl TryFrom<CameraRepr> for Camera {
    type Error = Error;
    fn try_from(r: CameraRepr) -> Result<Self> {
        let cam = Camera {
            extrinsic: r.extrinsic,
            focal: r.focal,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            near: r.near,
            far: r.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraRepr {
    fn from(c: Camera) -> Self {
        CameraRepr {
            extrinsic: c.extrinsic,
            focal: c.focal,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(validation(format!(
                "camera focal must be > 0, got {}",
                self.focal
            )));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(validation(format!(
                "camera needs 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(validation("camera image must be non-empty"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, principal point at the image center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| validation("camera eye coincides with target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| validation("camera up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let extrinsic = RigidTransform::new(rotation, -(rotation * eye))?;
        let cam = Camera {
            extrinsic,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn center(&self) -> Vec3 {
        -(self.extrinsic.rotation().transpose() * self.extrinsic.translation())
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.extrinsic.apply(x)
    }

    /// Pixel coordinates of a camera-space point with `z > 0`.
    pub fn project(&self, xc: &Vec3) -> (f64, f64) {
        (
            self.focal * xc.x / xc.z + self.cx,
            self.focal * xc.y / xc.z + self.cy,
        )
    }

    /// Unit world-space direction through the center of pixel `(px, py)`.
    pub fn pixel_direction(&self, px: usize, py: usize) -> Vec3 {
        let d = Vec3::new(
            (px as f64 + 0.5 - self.cx) / self.focal,
            (py as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        );
        (self.extrinsic.rotation().tr_mul(&d)).normalize()
    }
}

/// Draws every bone (joint to tip) of `pose` as a 1-pixel-wide line.
/// Segments are clipped at the near plane and to the image rectangle.
pub fn rasterize_bones(pose: &PoseConfig, skeleton: &Skeleton, camera: &Camera) -> Result<Image> {
    camera.validate()?;
    if skeleton.len() != pose.len() {
        return Err(crate::error::shape(format!(
            "skeleton has {} parts, pose {}",
            skeleton.len(),
            pose.len()
        )));
    }
    let mut img = Image::zeros(camera.width, camera.height, 1);
    for k in 0..pose.len() {
        let (a, b) = pose.bone_segment(k);
        let (mut a, mut b) = (camera.world_to_camera(&a), camera.world_to_camera(&b));
        if a.z < camera.near && b.z < camera.near {
            continue;
        }
        if a.z < camera.near || b.z < camera.near {
            let s = (camera.near - a.z) / (b.z - a.z);
            let cut = a + (b - a) * s;
            if a.z < camera.near {
                a = cut;
            } else {
                b = cut;
            }
        }
        let pa = camera.project(&a);
        let pb = camera.project(&b);
        if let Some((pa, pb)) = clip_to_rect(pa, pb, camera.width as f64, camera.height as f64) {
            draw_line(&mut img, pa, pb);
        }
    }
    Ok(img)
}

/// Liang–Barsky clip of a 2D segment to `[0, w] × [0, h]`.
fn clip_to_rect(a: (f64, f64), b: (f64, f64), w: f64, h: f64) -> Option<((f64, f64), (f64, f64))> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.0), (dx, w - a.0), (-dy, a.1), (dy, h - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        (a.0 + t0 * dx, a.1 + t0 * dy),
        (a.0 + t1 * dx, a.1 + t1 * dy),
    ))
}

/// Integer midpoint (Bresenham) line with both endpoints included.
fn draw_line(img: &mut Image, a: (f64, f64), b: (f64, f64)) {
    let to_px = |v: f64, n: usize| (v.floor() as i64).clamp(0, n as i64 - 1);
    let (mut x0, mut y0) = (to_px(a.0, img.width), to_px(a.1, img.height));
    let (x1, y1) = (to_px(b.0, img.width), to_px(b.1, img.height));
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.set(x0 as usize, y0 as usize, 0, 1.0);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
