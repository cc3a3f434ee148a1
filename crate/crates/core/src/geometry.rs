//! Angle and direction-vector math shared by every other module.
//!
//! Angles are `(yaw, pitch)` pairs in degrees. Yaw is positive towards the
//! subject's left as seen by the camera, pitch is positive upwards. The
//! direction transform is
//!
//! ```text
//! T(yaw, pitch) = (cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))
//! ```
//!
//! in a camera frame with `+z` into the scene, `+y` up and `+x` camera-left.
//! Head rotations are roll-free: yaw about the vertical axis, then pitch about
//! the rotated horizontal axis, so that `R(head) * (0, 0, 1) = T(head)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance accepted on `|v| - 1` before a vector is rejected as non-unit.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("vector ({x}, {y}, {z}) is not unit length (norm {norm})")]
    NotNormalized { x: f64, y: f64, z: f64, norm: f64 },
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
    #[error("composed pitch {pitch} deg is outside (-90, 90)")]
    PitchOutOfRange { pitch: f64 },
    #[error("cannot average an empty list of angle pairs")]
    Empty,
    #[error("length mismatch: {preds} predictions vs {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
}

/// A `(yaw, pitch)` direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnglePair {
    pub yaw: f64,
    pub pitch: f64,
}

impl AnglePair {
    pub const ZERO: AnglePair = AnglePair { yaw: 0.0, pitch: 0.0 };

    pub const fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite()
    }

    /// True when both components lie in the open interval `(-90, 90)`.
    pub fn in_label_range(&self) -> bool {
        self.yaw.abs() < 90.0 && self.pitch.abs() < 90.0
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.yaw, self.pitch]
    }
}

impl From<(f64, f64)> for AnglePair {
    fn from((yaw, pitch): (f64, f64)) -> Self {
        Self { yaw, pitch }
    }
}

/// A direction in the camera frame, guaranteed unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3 {
    x: f64,
    y: f64,
    z: f64,
}

impl UnitVector3 {
    /// Accepts `(x, y, z)` only if its norm is within [`UNIT_NORM_TOLERANCE`] of one.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::NonFinite("vector"));
        }
        let norm = (x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(GeometryError::NotNormalized { x, y, z, norm });
        }
        Ok(Self { x, y, z })
    }

    /// Scales an arbitrary nonzero finite vector to unit length.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::NotNormalized { x, y, z, norm });
        }
        Ok(Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitVector3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// Row-major 3x3 rotation matrix.
pub type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Roll-free head rotation `R = R_yaw * R_pitch`.
pub fn head_rotation(head: AnglePair) -> Mat3 {
    let (sy, cy) = head.yaw.to_radians().sin_cos();
    let (sp, cp) = head.pitch.to_radians().sin_cos();
    // R_yaw = [[cy,0,sy],[0,1,0],[-sy,0,cy]], R_pitch = [[1,0,0],[0,cp,sp],[0,-sp,cp]]
    [
        [cy, -sy * sp, sy * cp],
        [0.0, cp, sp],
        [-sy, -cy * sp, cy * cp],
    ]
}

/// Applies `R(head)` to a point or direction expressed in the head frame.
pub fn rotate_by_head(head: AnglePair, v: [f64; 3]) -> [f64; 3] {
    mat_vec(&head_rotation(head), v)
}

/// The direction transform `T`.
pub fn angles_to_vector(a: AnglePair) -> UnitVector3 {
    let (sy, cy) = a.yaw.to_radians().sin_cos();
    let (sp, cp) = a.pitch.to_radians().sin_cos();
    UnitVector3 {
        x: cp * sy,
        y: sp,
        z: cp * cy,
    }
}

/// Inverse of [`angles_to_vector`]: `pitch = asin(y)`, `yaw = atan2(x, z)`.
pub fn vector_to_angles(v: &UnitVector3) -> AnglePair {
    AnglePair {
        yaw: v.x.atan2(v.z).to_degrees(),
        pitch: v.y.clamp(-1.0, 1.0).asin().to_degrees(),
    }
}

/// Vector error metric: the 3D arc angle in degrees between two directions.
pub fn vem(pred: AnglePair, reference: AnglePair) -> f64 {
    let p = angles_to_vector(pred);
    let r = angles_to_vector(reference);
    p.dot(&r).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle error metric: `(1 / 2n) * sum(|dyaw| + |dpitch|)`.
pub fn aem(preds: &[AnglePair], refs: &[AnglePair]) -> Result<f64, GeometryError> {
    if preds.len() != refs.len() {
        return Err(GeometryError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if preds.is_empty() {
        return Err(GeometryError::Empty);
    }
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| (p.yaw - r.yaw).abs() + (p.pitch - r.pitch).abs())
        .sum();
    Ok(total / (2.0 * preds.len() as f64))
}

/// Mean of [`vem`] over paired lists.
pub fn mean_vem(preds: &[AnglePair], refs: &[AnglePair]) -> Result<f64, GeometryError> {
    if preds.len() != refs.len() {
        return Err(GeometryError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if preds.is_empty() {
        return Err(GeometryError::Empty);
    }
    let total: f64 = preds.iter().zip(refs).map(|(p, r)| vem(*p, *r)).sum();
    Ok(total / preds.len() as f64)
}

/// Camera-frame gaze from head pose and the eye direction in the head frame.
pub fn compose_gaze(head: AnglePair, eye_in_head: AnglePair) -> Result<AnglePair, GeometryError> {
    if !head.is_finite() || !eye_in_head.is_finite() {
        return Err(GeometryError::NonFinite("angle pair"));
    }
    // Identity eye: return the head pose exactly rather than through a round trip.
    if eye_in_head == AnglePair::ZERO {
        return Ok(head);
    }
    let e = angles_to_vector(eye_in_head).to_array();
    let g = rotate_by_head(head, e);
    let v = UnitVector3::normalize(g[0], g[1], g[2])?;
    let out = vector_to_angles(&v);
    if out.pitch.abs() >= 90.0 - 1e-9 {
        return Err(GeometryError::PitchOutOfRange { pitch: out.pitch });
    }
    Ok(out)
}

/// Eye direction in the head frame that composes with `head` into `gaze`.
pub fn decompose_eye(head: AnglePair, gaze: AnglePair) -> Result<AnglePair, GeometryError> {
    if !head.is_finite() || !gaze.is_finite() {
        return Err(GeometryError::NonFinite("angle pair"));
    }
    if head == gaze {
        return Ok(AnglePair::ZERO);
    }
    let g = angles_to_vector(gaze).to_array();
    let e = mat_t_vec(&head_rotation(head), g);
    let v = UnitVector3::normalize(e[0], e[1], e[2])?;
    Ok(vector_to_angles(&v))
}
