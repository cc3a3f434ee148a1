//! Procedural face and eye renderer with exact labels.
//!
//! Scenes live in a camera frame measured in interocular distances (IOD).
//! A canonical set of facial points is rotated about a pivot behind the eyes
//! by the head rotation and projected orthographically: image column
//! `u = cx + s * x`, image row `v = cy - s * y`. Each eye fixates a 3D target
//! point, so per-eye gaze differs by vergence whenever the target is at a
//! finite distance.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ImageRef, Sample, SampleSet, Side};
use crate::geometry::{self, AnglePair, GeometryError, UnitVector3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("scene sampling infeasible: no acceptable scene in {attempts} attempts")]
    Infeasible { attempts: usize },
    #[error("iris fully occluded")]
    Occluded,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Eyeball radius in IOD units.
pub const EYEBALL_RADIUS: f64 = 0.19;
/// Angular radius of the iris on the eyeball, degrees.
pub const IRIS_ANGULAR_RADIUS_DEG: f64 = 30.0;
/// Angular radius of the pupil on the eyeball, degrees.
pub const PUPIL_ANGULAR_RADIUS_DEG: f64 = 12.0;
/// Eye crops span this many IOD horizontally (0.35 IOD either side of the eye).
pub const EYE_CROP_SPAN_IOD: f64 = 0.7;
/// Face images span this many IOD horizontally.
pub const FACE_SPAN_IOD: f64 = 3.6;

const LID_RADIUS: f64 = 1.15 * EYEBALL_RADIUS;
const CORNER_AZIMUTH_DEG: f64 = 70.0;
const UPPER_LID_DEG: f64 = 38.0;
const LOWER_LID_DEG: f64 = 26.0;
const HEAD_PIVOT: [f64; 3] = [0.0, -0.3, -1.0];
const FACE_CENTER_Y: f64 = -0.45;

/// 16 eye landmarks in crop pixels: 8 on the interior margin (both corners,
/// then three upper and three lower lid points) and 8 on the iris boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub interior_margin: [[f64; 2]; 8],
    pub iris: [[f64; 2]; 8],
    #[serde(default)]
    pub iris_occluded: [bool; 8],
}

impl LandmarkSet {
    pub const COUNT: usize = 16;

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.interior_margin.iter().chain(self.iris.iter()).copied()
    }

    /// The 32 coordinates divided by the crop size: `x / width`, `y / height`.
    pub fn normalized(&self, height: usize, width: usize) -> [f64; 32] {
        let mut out = [0.0; 32];
        for (i, p) in self.points().enumerate() {
            out[2 * i] = p[0] / width as f64;
            out[2 * i + 1] = p[1] / height as f64;
        }
        out
    }

    pub fn iris_centroid(&self) -> [f64; 2] {
        let (sx, sy) = self.iris.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / 8.0, sy / 8.0]
    }

    /// Width over height of the interior-margin bounding box.
    pub fn margin_aspect(&self) -> f64 {
        let xs = self.interior_margin.iter().map(|p| p[0]);
        let ys = self.interior_margin.iter().map(|p| p[1]);
        let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
        (x1 - x0) / (y1 - y0)
    }
}

/// Global intensity changes applied after shading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Photometrics {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for Photometrics {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl Photometrics {
    fn apply(&self, shade: f64, noise: f64) -> u8 {
        let v = self.contrast * (shade - 128.0) + 128.0 + self.brightness + noise;
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Per-subject appearance, fixed across all of a subject's samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: f64,
    pub iris: f64,
    pub sclera: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            skin: 150.0,
            iris: 95.0,
            sclera: 215.0,
        }
    }
}

/// Everything needed to render one capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub head: AnglePair,
    /// Fixation target in the camera frame, IOD units.
    pub target: [f64; 3],
    /// Eyeball centres in the camera frame: `[left, right]`.
    pub eye_centers: [[f64; 3]; 2],
    pub aperture: f64,
    pub photometrics: Photometrics,
    pub appearance: Appearance,
    /// Eye-crop centre offsets in fractions of the crop width: `[left, right]`.
    pub crop_jitter: [[f64; 2]; 2],
    pub seed: u64,
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

/// Canonical head-frame points relative to the eye midpoint, IOD units.
pub mod canonical {
    pub const LEFT_EYE: [f64; 3] = [0.5, 0.0, 0.0];
    pub const RIGHT_EYE: [f64; 3] = [-0.5, 0.0, 0.0];
    pub const NOSE_TIP: [f64; 3] = [0.0, -0.55, 0.55];
    pub const MOUTH_LEFT: [f64; 3] = [0.4, -1.05, 0.15];
    pub const MOUTH_RIGHT: [f64; 3] = [-0.4, -1.05, 0.15];
    pub const CHIN: [f64; 3] = [0.0, -1.6, 0.0];

    /// Fiducials in the order they are reported by `render_face`.
    pub const FIDUCIALS: [[f64; 3]; 6] = [LEFT_EYE, RIGHT_EYE, NOSE_TIP, MOUTH_LEFT, MOUTH_RIGHT, CHIN];
}

/// Camera-frame position of a canonical head point under `head`.
pub fn head_point(head: AnglePair, p: [f64; 3]) -> [f64; 3] {
    let rel = [p[0] - HEAD_PIVOT[0], p[1] - HEAD_PIVOT[1], p[2] - HEAD_PIVOT[2]];
    let r = geometry::rotate_by_head(head, rel);
    [r[0] + HEAD_PIVOT[0], r[1] + HEAD_PIVOT[1], r[2] + HEAD_PIVOT[2]]
}

impl SceneParams {
    /// A scene with default photometrics and no jitter.
    pub fn new(head: AnglePair, target: [f64; 3], aperture: f64) -> Self {
        Self {
            head,
            target,
            eye_centers: [head_point(head, canonical::LEFT_EYE), head_point(head, canonical::RIGHT_EYE)],
            aperture,
            photometrics: Photometrics::default(),
            appearance: Appearance::default(),
            crop_jitter: [[0.0; 2]; 2],
            seed: 0,
        }
    }

    /// Camera-frame gaze of one eye towards the target.
    pub fn gaze(&self, side: Side) -> Result<AnglePair, GeometryError> {
        let e = self.eye_centers[side_index(side)];
        let d = [self.target[0] - e[0], self.target[1] - e[1], self.target[2] - e[2]];
        let v = UnitVector3::normalize(d[0], d[1], d[2])?;
        Ok(geometry::vector_to_angles(&v))
    }

    pub fn eye_in_head(&self, side: Side) -> Result<AnglePair, GeometryError> {
        geometry::decompose_eye(self.head, self.gaze(side)?)
    }
}

/// A closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn symmetric(half: f64) -> Self {
        Self { min: -half, max: half }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Sampling ranges for scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub head_yaw: Range,
    pub head_pitch: Range,
    /// Accepted eye-in-head magnitude per component, degrees.
    pub eye_yaw_limit: f64,
    pub eye_pitch_limit: f64,
    pub target_x: Range,
    pub target_y: Range,
    pub target_z: Range,
    pub aperture: Range,
    pub brightness: Range,
    pub contrast: Range,
    pub noise_sigma: Range,
    /// Eye-crop centre jitter, fraction of crop width, each axis.
    pub crop_jitter: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            head_yaw: Range::symmetric(30.0),
            head_pitch: Range::symmetric(30.0),
            eye_yaw_limit: 30.0,
            eye_pitch_limit: 30.0,
            target_x: Range::symmetric(25.0),
            target_y: Range::symmetric(25.0),
            target_z: Range::new(8.0, 24.0),
            aperture: Range::new(0.3, 1.0),
            brightness: Range::symmetric(30.0),
            contrast: Range::new(0.8, 1.2),
            noise_sigma: Range::new(0.0, 6.0),
            crop_jitter: 0.04,
        }
    }
}

impl SceneRanges {
    /// Everything pinned: frontal head, target straight ahead at distance `z`.
    pub fn collapsed(z: f64) -> Self {
        Self {
            head_yaw: Range::point(0.0),
            head_pitch: Range::point(0.0),
            eye_yaw_limit: 30.0,
            eye_pitch_limit: 30.0,
            target_x: Range::point(0.0),
            target_y: Range::point(0.0),
            target_z: Range::point(z),
            aperture: Range::point(1.0),
            brightness: Range::point(0.0),
            contrast: Range::point(1.0),
            noise_sigma: Range::point(0.0),
            crop_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ranges = [
            ("head_yaw", self.head_yaw),
            ("head_pitch", self.head_pitch),
            ("target_x", self.target_x),
            ("target_y", self.target_y),
            ("target_z", self.target_z),
            ("aperture", self.aperture),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, r) in ranges {
            if !r.is_valid() {
                return Err(SynthError::Config(format!("{name}: min must not exceed max")));
            }
        }
        if self.head_yaw.min <= -90.0 || self.head_yaw.max >= 90.0 || self.head_pitch.min <= -90.0 || self.head_pitch.max >= 90.0 {
            return Err(SynthError::Config("head ranges must lie inside (-90, 90)".into()));
        }
        if self.target_z.min <= 0.5 {
            return Err(SynthError::Config("target_z must stay in front of the face (> 0.5 IOD)".into()));
        }
        if self.aperture.min < 0.3 || self.aperture.max > 1.0 {
            return Err(SynthError::Config("aperture must lie in [0.3, 1.0]".into()));
        }
        if self.contrast.min <= 0.0 || self.noise_sigma.min < 0.0 {
            return Err(SynthError::Config("contrast must be positive and noise non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.crop_jitter) {
            return Err(SynthError::Config("crop_jitter must lie in [0, 0.5)".into()));
        }
        if self.eye_yaw_limit <= 0.0 || self.eye_pitch_limit <= 0.0 {
            return Err(SynthError::Config("eye limits must be positive".into()));
        }
        Ok(())
    }

    /// Fraction of raw draws that [`sample_scene`] would accept, estimated
    /// from `trials` draws of a fixed stream.
    pub fn acceptance_rate(&self, trials: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let accepted = (0..trials)
            .filter(|_| self.accept(&draw_scene(&mut rng, self)))
            .count();
        accepted as f64 / trials as f64
    }

    fn accept(&self, scene: &SceneParams) -> bool {
        Side::BOTH.iter().all(|&side| {
            let (Ok(g), Ok(e)) = (scene.gaze(side), scene.eye_in_head(side)) else {
                return false;
            };
            g.in_label_range() && e.yaw.abs() <= self.eye_yaw_limit && e.pitch.abs() <= self.eye_pitch_limit
        })
    }
}

const MAX_SCENE_ATTEMPTS: usize = 1000;

fn draw_scene<R: Rng>(rng: &mut R, ranges: &SceneRanges) -> SceneParams {
    let head = AnglePair::new(ranges.head_yaw.sample(rng), ranges.head_pitch.sample(rng));
    let target = [ranges.target_x.sample(rng), ranges.target_y.sample(rng), ranges.target_z.sample(rng)];
    let aperture = ranges.aperture.sample(rng);
    let photometrics = Photometrics {
        brightness: ranges.brightness.sample(rng),
        contrast: ranges.contrast.sample(rng),
        noise_sigma: ranges.noise_sigma.sample(rng),
    };
    let j = ranges.crop_jitter;
    let mut jitter = || if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let crop_jitter = [[jitter(), jitter()], [jitter(), jitter()]];
    let seed = rng.random();
    SceneParams {
        photometrics,
        crop_jitter,
        seed,
        ..SceneParams::new(head, target, aperture)
    }
}

/// Draws a scene with head and target uniform in their ranges, resampling
/// until both eyes' eye-in-head directions respect the configured limits.
pub fn sample_scene<R: Rng>(rng: &mut R, ranges: &SceneRanges) -> Result<SceneParams, SynthError> {
    ranges.validate()?;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let scene = draw_scene(rng, ranges);
        if ranges.accept(&scene) {
            return Ok(scene);
        }
    }
    Err(SynthError::Infeasible {
        attempts: MAX_SCENE_ATTEMPTS,
    })
}

/// Eye geometry in IOD units relative to the eyeball centre, already rotated
/// into the camera frame. Projection drops `z` and flips `y` for image rows.
struct EyeModel {
    gaze: [f64; 3],
    upper: Vec<[f64; 2]>,
    lower: Vec<[f64; 2]>,
    polygon: Vec<[f64; 2]>,
    margin: [[f64; 2]; 8],
    iris: [[f64; 2]; 8],
    cos_iris: f64,
    cos_pupil: f64,
    appearance: Appearance,
}

const ARC_SAMPLES: usize = 24;

fn lid_point(head: AnglePair, azimuth_deg: f64, elevation_deg: f64) -> [f64; 2] {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    let p = [LID_RADIUS * ce * sa, LID_RADIUS * se, LID_RADIUS * ce * ca];
    let r = geometry::rotate_by_head(head, p);
    [r[0], r[1]]
}

impl EyeModel {
    fn new(head: AnglePair, gaze: AnglePair, aperture: f64, appearance: Appearance) -> Self {
        let arc = |t: f64, lid_deg: f64| {
            let az = -CORNER_AZIMUTH_DEG + 2.0 * CORNER_AZIMUTH_DEG * t;
            lid_point(head, az, lid_deg * aperture * (std::f64::consts::PI * t).sin())
        };
        let upper: Vec<[f64; 2]> = (0..=ARC_SAMPLES).map(|i| arc(i as f64 / ARC_SAMPLES as f64, UPPER_LID_DEG)).collect();
        let lower: Vec<[f64; 2]> = (0..=ARC_SAMPLES).map(|i| arc(i as f64 / ARC_SAMPLES as f64, -LOWER_LID_DEG)).collect();
        let mut polygon = upper.clone();
        polygon.extend(lower.iter().rev().skip(1).take(ARC_SAMPLES - 1));

        let mut margin = [[0.0; 2]; 8];
        margin[0] = arc(0.0, UPPER_LID_DEG);
        margin[1] = arc(1.0, UPPER_LID_DEG);
        for (k, t) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            margin[2 + k] = arc(t, UPPER_LID_DEG);
            margin[5 + k] = arc(t, -LOWER_LID_DEG);
        }

        let g = geometry::angles_to_vector(gaze).to_array();
        // Orthonormal frame around the gaze: e1 horizontal, e2 completing it.
        let up = [0.0, 1.0, 0.0];
        let e1 = normalize3(cross(up, g));
        let e2 = cross(g, e1);
        let rho = IRIS_ANGULAR_RADIUS_DEG.to_radians();
        let mut iris = [[0.0; 2]; 8];
        for (k, slot) in iris.iter_mut().enumerate() {
            let psi = k as f64 * std::f64::consts::FRAC_PI_4;
            let (s, c) = psi.sin_cos();
            let p: Vec<f64> = (0..3)
                .map(|i| EYEBALL_RADIUS * (rho.cos() * g[i] + rho.sin() * (c * e1[i] + s * e2[i])))
                .collect();
            *slot = [p[0], p[1]];
        }
        Self {
            gaze: g,
            upper,
            lower,
            polygon,
            margin,
            iris,
            cos_iris: rho.cos(),
            cos_pupil: PUPIL_ANGULAR_RADIUS_DEG.to_radians().cos(),
            appearance,
        }
    }

    fn inside_margin(&self, p: [f64; 2]) -> bool {
        point_in_polygon(p, &self.polygon)
    }

    fn iris_centre(&self) -> [f64; 2] {
        [EYEBALL_RADIUS * self.gaze[0], EYEBALL_RADIUS * self.gaze[1]]
    }

    fn occluded(&self) -> bool {
        self.gaze[2] <= 0.2 || !self.inside_margin(self.iris_centre())
    }

    /// Intensity at an eye-relative point, or `None` outside the interior margin.
    fn shade(&self, p: [f64; 2]) -> Option<f64> {
        if !self.inside_margin(p) {
            return None;
        }
        let r2 = p[0] * p[0] + p[1] * p[1];
        let rr = EYEBALL_RADIUS * EYEBALL_RADIUS;
        if r2 >= rr {
            return Some(self.appearance.sclera * 0.8);
        }
        let z = (rr - r2).sqrt();
        let cos_a = (p[0] * self.gaze[0] + p[1] * self.gaze[1] + z * self.gaze[2]) / EYEBALL_RADIUS;
        let v = if cos_a >= self.cos_pupil {
            25.0
        } else if cos_a >= self.cos_iris {
            let frac = (1.0 - cos_a) / (1.0 - self.cos_iris);
            self.appearance.iris * (0.7 + 0.5 * frac)
        } else {
            self.appearance.sclera * (0.85 + 0.15 * z / EYEBALL_RADIUS)
        };
        Some(v)
    }

    /// Distance to the upper lid curve, used for the dark lash line.
    fn upper_lid_distance(&self, p: [f64; 2]) -> f64 {
        polyline_distance(p, &self.upper)
    }

    #[allow(dead_code)]
    fn lower_lid(&self) -> &[[f64; 2]] {
        &self.lower
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        [a[0] / n, a[1] / n, a[2] / n]
    }
}

/// Even-odd rule.
pub(crate) fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    line.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        })
        .fold(f64::MAX, f64::min)
}

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 2;

/// Output of [`render_eye`].
#[derive(Debug, Clone)]
pub struct EyeRender {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub gaze: AnglePair,
    pub eye_in_head: AnglePair,
}

/// Renders one eye crop of `size = (height, width)` from explicit head pose
/// and camera-frame gaze. `jitter` offsets the crop centre (fractions of width).
pub fn render_eye_direct(
    head: AnglePair,
    gaze: AnglePair,
    aperture: f64,
    photometrics: Photometrics,
    appearance: Appearance,
    jitter: [f64; 2],
    noise_seed: u64,
    size: (usize, usize),
) -> Result<EyeRender, SynthError> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(SynthError::Config("eye crop size must be nonzero".into()));
    }
    let eye = EyeModel::new(head, gaze, aperture, appearance);
    if eye.occluded() {
        return Err(SynthError::Occluded);
    }
    let scale = w as f64 / EYE_CROP_SPAN_IOD;
    let cx = w as f64 / 2.0 + jitter[0] * w as f64;
    let cy = h as f64 / 2.0 + jitter[1] * w as f64;
    let to_px = |p: [f64; 2]| [cx + scale * p[0], cy - scale * p[1]];
    let lash_width = 1.2 / scale;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, photometrics.noise_sigma.max(0.0)).expect("sigma is finite");
    let mut image = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let p = [(px - cx) / scale, -(py - cy) / scale];
                    acc += match eye.shade(p) {
                        Some(v) => v,
                        None if eye.upper_lid_distance(p) < lash_width => 55.0,
                        None => appearance.skin * (1.0 - 0.15 * (p[1] / 0.35).clamp(-1.0, 1.0)),
                    };
                }
            }
            let shade = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let n = if photometrics.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            image.put_pixel(x as u32, y as u32, image::Luma([photometrics.apply(shade, n)]));
        }
    }

    let mut landmarks = LandmarkSet {
        interior_margin: eye.margin.map(to_px),
        iris: eye.iris.map(to_px),
        iris_occluded: [false; 8],
    };
    for (k, p) in eye.iris.iter().enumerate() {
        landmarks.iris_occluded[k] = !eye.inside_margin(*p);
    }
    Ok(EyeRender {
        image,
        landmarks,
        gaze,
        eye_in_head: geometry::decompose_eye(head, gaze)?,
    })
}

/// Renders the eye on `side` of a scene.
pub fn render_eye(scene: &SceneParams, side: Side, size: (usize, usize)) -> Result<EyeRender, SynthError> {
    let gaze = scene.gaze(side)?;
    let idx = side_index(side);
    render_eye_direct(
        scene.head,
        gaze,
        scene.aperture,
        scene.photometrics,
        scene.appearance,
        scene.crop_jitter[idx],
        scene.seed.wrapping_add(1 + idx as u64),
        size,
    )
}

/// Output of [`render_face`].
#[derive(Debug, Clone)]
pub struct FaceRender {
    pub image: GrayImage,
    /// Projected fiducials in pixels, ordered as [`canonical::FIDUCIALS`].
    pub fiducials: Vec<[f64; 2]>,
}

/// Pixels per IOD for a face image of the given width.
pub fn face_scale(width: usize) -> f64 {
    width as f64 / FACE_SPAN_IOD
}

/// Projects a camera-frame point into face-image pixels.
pub fn project_face_point(p: [f64; 3], size: (usize, usize)) -> [f64; 2] {
    let (h, w) = size;
    let s = face_scale(w);
    [w as f64 / 2.0 + s * p[0], h as f64 / 2.0 - s * (p[1] - FACE_CENTER_Y)]
}

/// Renders the face: elliptical head outline, shaded fiducial blobs and both
/// eyes drawn with the same eye model as [`render_eye`].
pub fn render_face(scene: &SceneParams, size: (usize, usize)) -> Result<FaceRender, SynthError> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(SynthError::Config("face size must be nonzero".into()));
    }
    let s = face_scale(w);
    let head = scene.head;
    let fid3: Vec<[f64; 3]> = canonical::FIDUCIALS.iter().map(|&p| head_point(head, p)).collect();
    let fiducials: Vec<[f64; 2]> = fid3.iter().map(|&p| project_face_point(p, size)).collect();
    let outline_c = project_face_point(head_point(head, [0.0, -0.55, -0.2]), size);
    let (ax, ay) = (1.25 * s, 1.7 * s);

    let eyes: Vec<(EyeModel, [f64; 2])> = Side::BOTH
        .iter()
        .map(|&side| {
            let g = scene.gaze(side)?;
            let c = project_face_point(scene.eye_centers[side_index(side)], size);
            Ok((EyeModel::new(head, g, scene.aperture, scene.appearance), c))
        })
        .collect::<Result<_, GeometryError>>()?;

    // Blobs: (pixel centre, sigma px, target intensity)
    let mut blobs = vec![
        (fiducials[2], 0.10 * s, 215.0),
        (fiducials[3], 0.07 * s, 55.0),
        (fiducials[4], 0.07 * s, 55.0),
        (fiducials[5], 0.12 * s, 95.0),
    ];
    // Mouth line and nose bridge as chains of small blobs.
    for k in 1..8 {
        let t = k as f64 / 8.0;
        let m = lerp2(fiducials[3], fiducials[4], t);
        blobs.push((m, 0.04 * s, 70.0));
        let bridge = head_point(head, [0.0, -0.55 * t, 0.55 * t]);
        blobs.push((project_face_point(bridge, size), 0.05 * s, 185.0));
    }
    // Brows above each eye.
    for side in [1.0, -1.0] {
        for k in 0..5 {
            let x = side * (0.32 + 0.09 * k as f64);
            let p = head_point(head, [x, 0.3 - 0.02 * (k as f64 - 2.0).abs(), 0.12]);
            blobs.push((project_face_point(p, size), 0.045 * s, 60.0));
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise = Normal::new(0.0, scene.photometrics.noise_sigma.max(0.0)).expect("sigma is finite");
    let skin = scene.appearance.skin;
    let mut image = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            let ex = (px[0] - outline_c[0]) / ax;
            let ey = (px[1] - outline_c[1]) / ay;
            let r = ex * ex + ey * ey;
            let mut v = if r <= 1.0 { skin * (1.0 - 0.25 * r) } else { 35.0 };
            for &(c, sigma, target) in &blobs {
                let d2 = (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2);
                if d2 < 16.0 * sigma * sigma {
                    let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                    v += (target - v) * wgt;
                }
            }
            for (eye, c) in &eyes {
                let p = [(px[0] - c[0]) / s, -(px[1] - c[1]) / s];
                if p[0].abs() < 0.3 && p[1].abs() < 0.3 {
                    if let Some(sh) = eye.shade(p) {
                        v = sh;
                    } else if eye.upper_lid_distance(p) < 1.0 / s {
                        v = 55.0;
                    }
                }
            }
            let n = if scene.photometrics.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            image.put_pixel(x as u32, y as u32, image::Luma([scene.photometrics.apply(v, n)]));
        }
    }
    Ok(FaceRender { image, fiducials })
}

fn lerp2(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Optional post-render image transform (e.g. a learned refiner), applied to
/// every face and eye image before it is written.
pub type Refiner = dyn Fn(&mut GrayImage) + Send + Sync;

/// Dataset generation settings, echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub ranges: SceneRanges,
    /// Eye crop `(height, width)`.
    pub eye_size: (usize, usize),
    /// Face image `(height, width)`.
    pub face_size: (usize, usize),
    /// Fraction of samples tagged `train`; the rest are `test`.
    pub train_fraction: f64,
    pub subjects: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ranges: SceneRanges::default(),
            eye_size: (64, 96),
            face_size: (224, 224),
            train_fraction: 0.9,
            subjects: 20,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const CONFIG_ECHO_NAME: &str = "generation.json";
const IMAGE_DIR: &str = "images";

/// One fully rendered sample, still in memory.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub scene: SceneParams,
    pub face: FaceRender,
    pub left: EyeRender,
    pub right: EyeRender,
}

fn subject_appearance(seed: u64, subject: usize) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    rng.set_stream(subject as u64);
    Appearance {
        skin: rng.random_range(120.0..175.0),
        iris: rng.random_range(70.0..120.0),
        sclera: rng.random_range(200.0..230.0),
    }
}

/// Renders sample `index` of a dataset. Each index owns its own random
/// stream, so the result does not depend on generation order.
pub fn render_sample(cfg: &GenerateConfig, index: usize) -> Result<RenderedSample, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let appearance = subject_appearance(cfg.seed, index % cfg.subjects.max(1));
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let mut scene = sample_scene(&mut rng, &cfg.ranges)?;
        scene.appearance = appearance;
        let left = render_eye(&scene, Side::Left, cfg.eye_size);
        let right = render_eye(&scene, Side::Right, cfg.eye_size);
        match (left, right) {
            (Ok(left), Ok(right)) => {
                let face = render_face(&scene, cfg.face_size)?;
                return Ok(RenderedSample { scene, face, left, right });
            }
            (Err(SynthError::Occluded), _) | (_, Err(SynthError::Occluded)) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Err(SynthError::Infeasible {
        attempts: MAX_SCENE_ATTEMPTS,
    })
}

impl RenderedSample {
    /// Converts into a dataset [`Sample`] holding in-memory pixels.
    pub fn into_sample(self, cfg: &GenerateConfig, index: usize) -> Result<Sample, SynthError> {
        let n_train = train_count(cfg, usize::MAX);
        let _ = n_train;
        let scene = &self.scene;
        Ok(Sample {
            subject_id: format!("synth{:03}", index % cfg.subjects.max(1)),
            camera_id: "synthetic".into(),
            face_image: ImageRef::Pixels(Arc::new(self.face.image)),
            left_eye: ImageRef::Pixels(Arc::new(self.left.image)),
            right_eye: ImageRef::Pixels(Arc::new(self.right.image)),
            head: scene.head,
            gaze_left: self.left.gaze,
            gaze_right: self.right.gaze,
            gaze_duplicated: false,
            landmarks: Some(self.face.fiducials),
            eye_landmarks_left: Some(self.left.landmarks),
            eye_landmarks_right: Some(self.right.landmarks),
            eye_in_head_left: Some(self.left.eye_in_head),
            eye_in_head_right: Some(self.right.eye_in_head),
            illumination_tag: Some(if scene.photometrics.brightness < -15.0 { "night" } else { "day" }.into()),
            split: None,
        })
    }
}

fn train_count(cfg: &GenerateConfig, n: usize) -> usize {
    if n == usize::MAX {
        return n;
    }
    ((n as f64) * cfg.train_fraction).round() as usize
}

/// Renders `n` samples fully in memory, tagging splits by index.
pub fn generate_in_memory(n: usize, cfg: &GenerateConfig) -> Result<SampleSet, SynthError> {
    check_generate_config(n, cfg)?;
    let n_train = train_count(cfg, n);
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = render_sample(cfg, i)?.into_sample(cfg, i)?;
            s.split = Some(if i < n_train { "train" } else { "test" }.into());
            Ok(s)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(SampleSet::new(samples))
}

fn check_generate_config(n: usize, cfg: &GenerateConfig) -> Result<(), SynthError> {
    if n == 0 {
        return Err(SynthError::Config("n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(SynthError::Config("train_fraction must lie in [0, 1]".into()));
    }
    if cfg.subjects == 0 {
        return Err(SynthError::Config("subjects must be at least 1".into()));
    }
    cfg.ranges.validate()?;
    let rate = cfg.ranges.acceptance_rate(2000);
    if rate < 0.01 {
        return Err(SynthError::Config(format!(
            "ranges reject {:.2}% of draws; widen the target box or eye limits",
            100.0 * (1.0 - rate)
        )));
    }
    Ok(())
}

fn write_png(img: &GrayImage, path: &Path) -> Result<(), SynthError> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| SynthError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `n` samples plus a manifest and a config echo under `out_dir`.
/// On failure, files written so far are removed.
pub fn generate_dataset(n: usize, cfg: &GenerateConfig, out_dir: &Path, refiner: Option<&Refiner>) -> Result<PathBuf, SynthError> {
    check_generate_config(n, cfg)?;
    let result = write_dataset(n, cfg, out_dir, refiner);
    if result.is_err() {
        let _ = fs::remove_dir_all(out_dir.join(IMAGE_DIR));
        let _ = fs::remove_file(out_dir.join(MANIFEST_NAME));
        let _ = fs::remove_file(out_dir.join(CONFIG_ECHO_NAME));
    }
    result
}

fn write_dataset(n: usize, cfg: &GenerateConfig, out_dir: &Path, refiner: Option<&Refiner>) -> Result<PathBuf, SynthError> {
    let io_err = |path: &Path, e: std::io::Error| SynthError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| io_err(&image_dir, e))?;
    let n_train = train_count(cfg, n);
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rendered = render_sample(cfg, i)?;
            if let Some(refine) = refiner {
                refine(&mut rendered.face.image);
                refine(&mut rendered.left.image);
                refine(&mut rendered.right.image);
            }
            let paths = ["face", "left", "right"].map(|k| image_dir.join(format!("{i:07}_{k}.png")));
            write_png(&rendered.face.image, &paths[0])?;
            write_png(&rendered.left.image, &paths[1])?;
            write_png(&rendered.right.image, &paths[2])?;
            let mut s = rendered.into_sample(cfg, i)?;
            let [face, left, right] = paths;
            s.face_image = ImageRef::File(face);
            s.left_eye = ImageRef::File(left);
            s.right_eye = ImageRef::File(right);
            s.split = Some(if i < n_train { "train" } else { "test" }.into());
            Ok(s)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = out_dir.join(MANIFEST_NAME);
    dataset::save_manifest(&SampleSet::new(samples), &manifest)?;
    let echo = out_dir.join(CONFIG_ECHO_NAME);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&echo, text + "\n").map_err(|e| io_err(&echo, e))?;
    Ok(manifest)
}

/// Import of UnityEyes-style JSON annotations.
///
/// Landmarks arrive with `y` measured from the image bottom and are flipped to
/// row coordinates; the look vector is converted so that positive yaw moves
/// the iris towards larger image columns, matching this crate's renderer.
pub mod unityeyes {
    use super::*;

    #[derive(Debug, Deserialize)]
    struct EyeDetails {
        look_vec: String,
    }

    #[derive(Debug, Deserialize)]
    struct RawAnnotation {
        interior_margin_2d: Vec<String>,
        iris_2d: Vec<String>,
        eye_details: EyeDetails,
        #[serde(default)]
        head_pose: Option<String>,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct Annotation {
        pub landmarks: LandmarkSet,
        pub gaze: AnglePair,
        /// `(yaw, pitch)` from the annotation's head pose, if present.
        pub head: Option<AnglePair>,
    }

    fn parse_tuple(s: &str) -> Result<Vec<f64>, SynthError> {
        s.trim()
            .trim_start_matches('(')
            .trim_end_matches(')')
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| SynthError::Config(format!("bad number {v:?}: {e}"))))
            .collect()
    }

    fn subsample(points: &[Vec<f64>], image_height: f64) -> Result<[[f64; 2]; 8], SynthError> {
        if points.len() < 8 {
            return Err(SynthError::Config(format!("need at least 8 points, got {}", points.len())));
        }
        let mut out = [[0.0; 2]; 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let p = &points[k * points.len() / 8];
            if p.len() < 2 {
                return Err(SynthError::Config("landmark with fewer than 2 coordinates".into()));
            }
            *slot = [p[0], image_height - p[1]];
        }
        Ok(out)
    }

    /// Parses one annotation file's JSON text for an image of `image_height` rows.
    pub fn parse_annotation(json: &str, image_height: usize) -> Result<Annotation, SynthError> {
        let raw: RawAnnotation = serde_json::from_str(json).map_err(|e| SynthError::Config(e.to_string()))?;
        let margin: Vec<Vec<f64>> = raw.interior_margin_2d.iter().map(|s| parse_tuple(s)).collect::<Result<_, _>>()?;
        let iris: Vec<Vec<f64>> = raw.iris_2d.iter().map(|s| parse_tuple(s)).collect::<Result<_, _>>()?;
        let look = parse_tuple(&raw.eye_details.look_vec)?;
        if look.len() < 3 {
            return Err(SynthError::Config("look_vec needs 3 components".into()));
        }
        let v = UnitVector3::normalize(look[0], look[1], -look[2])?;
        let head = match raw.head_pose {
            Some(h) => {
                let hp = parse_tuple(&h)?;
                (hp.len() >= 2).then(|| AnglePair::new(hp[1], hp[0]))
            }
            None => None,
        };
        let h = image_height as f64;
        Ok(Annotation {
            landmarks: LandmarkSet {
                interior_margin: subsample(&margin, h)?,
                iris: subsample(&iris, h)?,
                iris_occluded: [false; 8],
            },
            gaze: geometry::vector_to_angles(&v),
            head,
        })
    }
}
