//! Synthetic hand-object samples.
//!
//! A sample is produced by posing a 21-joint hand with forward kinematics,
//! placing a box between the palm and the fingertips, recovering the box's
//! eight corners with a PCA-oriented bounding box of its vertices, and
//! projecting all 29 keypoints through a pinhole camera.
//!
//! # Dataset files
//!
//! JSON-lines, one record per line:
//!
//! | field            | type                  | unit / meaning                               |
//! |------------------|-----------------------|----------------------------------------------|
//! | `schema_version` | integer               | must be `1`                                  |
//! | `id`             | integer               | sample id                                    |
//! | `gt3d`           | 29 × `[x, y, z]`      | mm, camera frame, `z > 0`                    |
//! | `gt2d`           | 29 × `[u, v]`         | px                                           |
//! | `camera`         | `{fx, fy, cx, cy}`    | px                                           |
//! | `meta`           | `{subject, object}`   | free-form tags                               |
//!
//! Keypoint order follows [`crate::keypoints`].

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{finger_joint, NUM_HAND, NUM_NODES, NUM_OBJECT};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Noise level used to augment 2D inputs while training the lifter.
pub const TRAIN_NOISE_SIGMA: f64 = 10.0;
/// Noise levels of the robustness study.
pub const STUDY_NOISE_SIGMAS: [f64; 2] = [20.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 320.0,
        }
    }
}

impl Camera {
    pub fn project_point(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::Domain(format!("cannot project point with depth {}", p[2])));
        }
        Ok([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }
}

/// Pinhole projection of every point.
pub fn project(points: &[[f64; 3]], camera: &Camera) -> Result<Vec<[f64; 2]>> {
    points.iter().map(|&p| camera.project_point(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerPose {
    /// Sideways rotation at the MCP joint (rad).
    pub abduction: f64,
    /// Flexion at MCP, PIP and DIP (rad); positive curls toward the palm.
    pub flexion: [f64; 3],
}

/// Pose of a 21-joint hand.
///
/// The hand frame has `+y` along the middle finger, `+x` toward the thumb
/// and `+z` out of the back of the hand. The wrist rotation is
/// `Rz(yaw) · Ry(pitch) · Rx(roll)` from `[roll, pitch, yaw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPoseParams {
    pub wrist_position: [f64; 3],
    pub wrist_rotation: [f64; 3],
    pub fingers: [FingerPose; 5],
    /// Per finger: metacarpal (wrist to MCP), proximal, middle, distal (mm).
    pub bone_lengths: [[f64; 4]; 5],
}

/// In-palm direction of each metacarpal relative to `+y` (rad, positive
/// toward the thumb) and its tilt toward the palm side.
pub const FINGER_BASE_SPREAD: [f64; 5] = [0.85, 0.2, 0.0, -0.18, -0.36];
pub const FINGER_BASE_TILT: [f64; 5] = [0.5, 0.0, 0.0, 0.0, 0.0];

/// Typical adult bone lengths (mm), same layout as
/// [`HandPoseParams::bone_lengths`].
pub const DEFAULT_BONE_LENGTHS: [[f64; 4]; 5] = [
    [40.0, 35.0, 30.0, 25.0],
    [90.0, 45.0, 25.0, 20.0],
    [88.0, 50.0, 30.0, 22.0],
    [82.0, 47.0, 28.0, 20.0],
    [78.0, 37.0, 20.0, 18.0],
];

/// Anatomical limits (rad): abduction, then MCP, PIP and DIP flexion.
pub const ABDUCTION_RANGE: (f64, f64) = (-0.35, 0.35);
pub const FLEXION_RANGES: [(f64, f64); 3] = [(-0.35, 1.6), (0.0, 1.92), (0.0, 1.6)];

impl HandPoseParams {
    /// Flat hand at the origin with default bone lengths.
    pub fn neutral() -> Self {
        Self {
            wrist_position: [0.0, 0.0, 500.0],
            wrist_rotation: [0.0; 3],
            fingers: [FingerPose {
                abduction: 0.0,
                flexion: [0.0; 3],
            }; 5],
            bone_lengths: DEFAULT_BONE_LENGTHS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        for (f, fp) in self.fingers.iter().enumerate() {
            if !within(fp.abduction, ABDUCTION_RANGE) {
                return Err(Error::Domain(format!(
                    "finger {f} abduction {} outside {ABDUCTION_RANGE:?}",
                    fp.abduction
                )));
            }
            for (j, (&v, &range)) in fp.flexion.iter().zip(&FLEXION_RANGES).enumerate() {
                if !within(v, range) {
                    return Err(Error::Domain(format!(
                        "finger {f} joint {j} flexion {v} outside {range:?}"
                    )));
                }
            }
        }
        if self
            .bone_lengths
            .iter()
            .flatten()
            .any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return Err(Error::Domain("bone lengths must be positive".into()));
        }
        if self.wrist_position.iter().chain(&self.wrist_rotation).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite wrist pose".into()));
        }
        Ok(())
    }

    pub fn wrist_rotation_matrix(&self) -> Rotation3<f64> {
        let [roll, pitch, yaw] = self.wrist_rotation;
        Rotation3::from_euler_angles(roll, pitch, yaw)
    }
}

/// Joint positions (mm) in keypoint order, wrist first.
pub fn forward_kinematics(params: &HandPoseParams) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    let wrist = Vector3::from(params.wrist_position);
    let r_wrist = params.wrist_rotation_matrix();
    let along = |len: f64| Vector3::new(0.0, len, 0.0);

    let mut joints = vec![[0.0; 3]; NUM_HAND];
    joints[0] = params.wrist_position;
    for f in 0..5 {
        let lens = params.bone_lengths[f];
        let pose = params.fingers[f];
        let base = r_wrist
            * Rotation3::from_axis_angle(&Vector3::z_axis(), FINGER_BASE_SPREAD[f])
            * Rotation3::from_axis_angle(&Vector3::x_axis(), -FINGER_BASE_TILT[f]);
        let mut pos = wrist + base * along(lens[0]);
        joints[finger_joint(f, 0)] = pos.into();
        let mut frame = base * Rotation3::from_axis_angle(&Vector3::z_axis(), pose.abduction);
        for seg in 0..3 {
            frame *= Rotation3::from_axis_angle(&Vector3::x_axis(), -pose.flexion[seg]);
            pos += frame * along(lens[seg + 1]);
            joints[finger_joint(f, seg + 1)] = pos.into();
        }
    }
    Ok(joints)
}

/// Box with orthonormal axes (largest spread first, right-handed).
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub axes: [[f64; 3]; 3],
    pub half_extents: [f64; 3],
}

impl OrientedBox {
    /// Corner `i` lies at `-`/`+` along axis `k` when bit `k` of `i` is 0/1.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let c = Vector3::from(self.center);
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let mut p = c;
            for k in 0..3 {
                let s = if i >> k & 1 == 1 { 1.0 } else { -1.0 };
                p += Vector3::from(self.axes[k]) * (s * self.half_extents[k]);
            }
            *corner = p.into();
        }
        out
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.iter().product::<f64>()
    }
}

/// Tight box along the principal axes of the vertex covariance.
///
/// Axis signs are canonical: the largest-magnitude component of the first
/// two axes is positive and the third completes a right-handed frame.
pub fn obb_from_points(points: &[[f64; 3]]) -> Result<OrientedBox> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("point covariance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    let smallest = eig.eigenvalues[order[2]];
    if !(largest > 0.0) || smallest <= 1e-10 * largest {
        return Err(Error::Degenerate(
            "point set spans fewer than three dimensions".into(),
        ));
    }
    let canonical = |v: Vector3<f64>| {
        let k = v.iamax();
        if v[k] < 0.0 {
            -v
        } else {
            v
        }
    };
    let a0 = canonical(eig.eigenvectors.column(order[0]).into_owned().normalize());
    let a1 = canonical(eig.eigenvectors.column(order[1]).into_owned().normalize());
    let a2 = a0.cross(&a1).normalize();
    let axes = [a0, a1, a2];

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let d = Vector3::from(*p) - centroid;
        for k in 0..3 {
            let s = d.dot(&axes[k]);
            lo[k] = lo[k].min(s);
            hi[k] = hi[k].max(s);
        }
    }
    let mut center = centroid;
    let mut half = [0.0; 3];
    for k in 0..3 {
        center += axes[k] * (0.5 * (lo[k] + hi[k]));
        half[k] = 0.5 * (hi[k] - lo[k]);
    }
    Ok(OrientedBox {
        center: center.into(),
        axes: axes.map(Into::into),
        half_extents: half,
    })
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
pub fn add_noise(coords: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(coords, sigma, &mut rng)
}

pub fn add_noise_with<R: Rng + ?Sized>(coords: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = coords.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub subject: String,
    pub object: String,
}

/// One hand-object sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub schema_version: u32,
    pub id: u64,
    pub gt3d: Vec<[f64; 3]>,
    pub gt2d: Vec<[f64; 2]>,
    pub camera: Camera,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gt3d.len() != NUM_NODES || self.gt2d.len() != NUM_NODES {
            return Err(Error::Data(format!(
                "sample {}: expected {NUM_NODES} keypoints, got {} 3D / {} 2D",
                self.id,
                self.gt3d.len(),
                self.gt2d.len()
            )));
        }
        let finite = self.gt3d.iter().flatten().chain(self.gt2d.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("sample {}: non-finite coordinate", self.id)));
        }
        if self.gt3d.iter().any(|p| !(p[2] > 0.0)) {
            return Err(Error::Data(format!("sample {}: non-positive depth", self.id)));
        }
        Ok(())
    }

    pub fn gt2d_tensor(&self) -> Tensor {
        Tensor::from_raw(NUM_NODES, 2, self.gt2d.iter().flatten().copied().collect())
    }

    pub fn gt3d_tensor(&self) -> Tensor {
        Tensor::from_raw(NUM_NODES, 3, self.gt3d.iter().flatten().copied().collect())
    }
}

/// Knobs of the synthetic generator. Defaults produce egocentric-looking
/// grasps 300–800 mm from the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraspSpec {
    pub camera: Camera,
    pub depth_range: (f64, f64),
    /// Uniform scale applied to all bone lengths.
    pub hand_scale: (f64, f64),
    /// Box edge length ranges (mm) along its three axes.
    pub box_extents: [(f64, f64); 3],
    /// Max wrist tilt away from facing the camera (rad), roll and pitch.
    pub max_tilt: f64,
    /// Number of distinct subject tags.
    pub subjects: u32,
}

impl Default for GraspSpec {
    fn default() -> Self {
        Self {
            camera: Camera::default(),
            depth_range: (300.0, 800.0),
            hand_scale: (0.95, 1.05),
            box_extents: [(60.0, 90.0), (40.0, 55.0), (20.0, 35.0)],
            max_tilt: 0.6,
            subjects: 6,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_pose<R: Rng>(rng: &mut R, spec: &GraspSpec) -> HandPoseParams {
    let scale = uniform(rng, spec.hand_scale);
    let mut bone_lengths = DEFAULT_BONE_LENGTHS;
    bone_lengths.iter_mut().flatten().for_each(|l| *l *= scale);
    let fingers = std::array::from_fn(|_| FingerPose {
        abduction: uniform(rng, (-0.15, 0.15)),
        flexion: [
            uniform(rng, (0.1, 1.0)),
            uniform(rng, (0.1, 1.2)),
            uniform(rng, (0.05, 0.8)),
        ],
    });
    HandPoseParams {
        wrist_position: [0.0; 3],
        wrist_rotation: [
            uniform(rng, (-spec.max_tilt, spec.max_tilt)),
            uniform(rng, (-spec.max_tilt, spec.max_tilt)),
            uniform(rng, (-std::f64::consts::PI, std::f64::consts::PI)),
        ],
        fingers,
        bone_lengths,
    }
}

/// Vertices of a box as a 4×4×4 lattice over its volume.
fn box_vertices(extents: [f64; 3], rotation: &Rotation3<f64>, center: Vector3<f64>) -> Vec<[f64; 3]> {
    let steps = [-0.5, -1.0 / 6.0, 1.0 / 6.0, 0.5];
    let mut out = Vec::with_capacity(64);
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                let local = Vector3::new(a * extents[0], b * extents[1], c * extents[2]);
                out.push((center + rotation * local).into());
            }
        }
    }
    out
}

/// Places a box between the palm and fingertips: its center is the mean of
/// the MCP and TIP joints pushed 20 mm toward the palm side, and it is
/// oriented with the hand up to ±0.3 rad per axis.
fn grasped_box<R: Rng>(
    rng: &mut R,
    spec: &GraspSpec,
    hand: &[[f64; 3]],
    r_wrist: &Rotation3<f64>,
) -> Result<[[f64; 3]; NUM_OBJECT]> {
    let mut anchor = Vector3::zeros();
    for f in 0..5 {
        anchor += Vector3::from(hand[finger_joint(f, 0)]) + Vector3::from(hand[finger_joint(f, 3)]);
    }
    anchor /= 10.0;
    let center = anchor + r_wrist * Vector3::new(0.0, 0.0, -20.0);
    let jitter = Rotation3::from_euler_angles(
        uniform(rng, (-0.3, 0.3)),
        uniform(rng, (-0.3, 0.3)),
        uniform(rng, (-0.3, 0.3)),
    );
    let extents = spec.box_extents.map(|r| uniform(rng, r));
    let verts = box_vertices(extents, &(r_wrist * jitter), center);
    Ok(obb_from_points(&verts)?.corners())
}

/// Draws one sample with its own RNG stream.
pub fn generate_sample(seed: u64, id: u64, spec: &GraspSpec) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let cam = spec.camera;
    let (zmin, zmax) = spec.depth_range;
    for _ in 0..1000 {
        let mut pose = random_pose(&mut rng, spec);
        let z = uniform(&mut rng, (zmin + 0.2 * (zmax - zmin), zmax - 0.2 * (zmax - zmin)));
        let u = uniform(&mut rng, (cam.cx * 0.5, cam.cx * 1.5));
        let v = uniform(&mut rng, (cam.cy * 0.5, cam.cy * 1.5));
        pose.wrist_position = [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z];
        let mut points = forward_kinematics(&pose)?;
        let r_wrist = pose.wrist_rotation_matrix();
        points.extend(grasped_box(&mut rng, spec, &points, &r_wrist)?);
        if points.iter().any(|p| p[2] < zmin || p[2] > zmax) {
            continue;
        }
        let gt2d = project(&points, &cam)?;
        let subject = rng.random_range(0..spec.subjects.max(1));
        return Ok(SampleRecord {
            schema_version: SCHEMA_VERSION,
            id,
            gt3d: points,
            gt2d,
            camera: cam,
            meta: SampleMeta {
                subject: format!("s{subject:02}"),
                object: "box".into(),
            },
        });
    }
    Err(Error::Data(format!(
        "could not place sample {id} inside depth range {:?}",
        spec.depth_range
    )))
}

/// `n` reproducible samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, seed: u64, spec: &GraspSpec) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be positive".into()));
    }
    (0..n as u64).map(|i| generate_sample(seed, i, spec)).collect()
}

pub fn save_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

/// Parses JSON-lines text; `origin` is only used in error messages.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let version = value
            .get("schema_version")
            .ok_or_else(|| err("missing field `schema_version`".into()))?
            .as_u64()
            .ok_or_else(|| err("`schema_version` must be an integer".into()))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: version as u32,
            });
        }
        let rec: SampleRecord = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", origin.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        (Vector3::from(a) - Vector3::from(b)).norm()
    }

    #[test]
    fn flat_hand_fingers_are_collinear() {
        let j = forward_kinematics(&HandPoseParams::neutral()).unwrap();
        for f in 0..5 {
            let base = Vector3::from(j[finger_joint(f, 0)]);
            let dir = (Vector3::from(j[finger_joint(f, 1)]) - base).normalize();
            for k in 2..4 {
                let d = (Vector3::from(j[finger_joint(f, k)]) - base).normalize();
                assert!((d - dir).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn tips_within_reach() {
        let spec = GraspSpec::default();
        for id in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(id);
            let pose = random_pose(&mut rng, &spec);
            let j = forward_kinematics(&pose).unwrap();
            for f in 0..5 {
                let reach: f64 = pose.bone_lengths[f].iter().sum();
                assert!(dist(j[finger_joint(f, 3)], j[0]) <= reach + 1e-9);
            }
        }
    }

    #[test]
    fn out_of_range_angles_rejected() {
        let mut p = HandPoseParams::neutral();
        p.fingers[2].flexion[1] = 3.0;
        assert!(matches!(forward_kinematics(&p), Err(Error::Domain(_))));
        let mut p = HandPoseParams::neutral();
        p.fingers[0].abduction = -1.0;
        assert!(forward_kinematics(&p).is_err());
        let mut p = HandPoseParams::neutral();
        p.bone_lengths[1][2] = 0.0;
        assert!(forward_kinematics(&p).is_err());
    }

    #[test]
    fn projection_basics() {
        let cam = Camera::default();
        assert_eq!(cam.project_point([0.0, 0.0, 400.0]).unwrap(), [320.0, 320.0]);
        let near = cam.project_point([30.0, -20.0, 400.0]).unwrap();
        let far = cam.project_point([30.0, -20.0, 800.0]).unwrap();
        assert!(((far[0] - 320.0) * 2.0 - (near[0] - 320.0)).abs() < 1e-12);
        assert!(((far[1] - 320.0) * 2.0 - (near[1] - 320.0)).abs() < 1e-12);
        assert!(cam.project_point([1.0, 1.0, 0.0]).is_err());
        assert!(project(&[[1.0, 1.0, -5.0]], &cam).is_err());
    }

    #[test]
    fn unit_cube_box() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64]);
        }
        let b = obb_from_points(&pts).unwrap();
        assert!((b.volume() - 1.0).abs() < 1e-12);
        let mut got: Vec<[f64; 3]> = b.corners().to_vec();
        let key = |p: &[f64; 3]| p.map(|v| v.round() as i64);
        got.sort_by_key(key);
        let mut want = pts.clone();
        want.sort_by_key(key);
        for (g, w) in got.iter().zip(&want) {
            assert!(dist(*g, *w) < 1e-12, "{g:?} vs {w:?}");
        }
        assert_eq!(b.center, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn degenerate_point_sets() {
        assert!(matches!(obb_from_points(&[[0.0; 3], [1.0; 3]]), Err(Error::Degenerate(_))));
        let planar: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        assert!(matches!(obb_from_points(&planar), Err(Error::Degenerate(_))));
    }

    #[test]
    fn noise_statistics() {
        let zeros = Tensor::zeros(29, 2);
        assert_eq!(add_noise(&zeros, 0.0, 3).unwrap(), zeros);
        let big = Tensor::zeros(50_000, 2);
        let noisy = add_noise(&big, 10.0, 42).unwrap();
        let n = noisy.numel() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 10.0).abs() < 0.2, "std {}", var.sqrt());
        assert_eq!(add_noise(&zeros, 20.0, 1).unwrap(), add_noise(&zeros, 20.0, 1).unwrap());
        assert!(add_noise(&zeros, -1.0, 1).is_err());
        assert_eq!(STUDY_NOISE_SIGMAS, [20.0, 50.0]);
    }

    #[test]
    fn generated_samples_obey_invariants() {
        let spec = GraspSpec::default();
        let data = generate_dataset(40, 9, &spec).unwrap();
        for r in &data {
            r.validate().unwrap();
            for (p, uv) in r.gt3d.iter().zip(&r.gt2d) {
                assert!(p[2] >= 300.0 && p[2] <= 800.0);
                let q = r.camera.project_point(*p).unwrap();
                assert!((q[0] - uv[0]).abs() < 1e-9 && (q[1] - uv[1]).abs() < 1e-9);
            }
        }
        assert_eq!(data, generate_dataset(40, 9, &spec).unwrap());
        assert!(generate_dataset(0, 9, &spec).is_err());
    }
}
