//! Sample data model, manifest I/O, cross-subject splits, batching and the
//! four eye-merging strategies.
//!
//! A manifest is a UTF-8 text file: one header line naming the format and
//! version, then one JSON record per sample. Image payloads are 8-bit
//! grayscale PNG files referenced by paths relative to the manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::GrayImage;
use ndarray::{concatenate, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AnglePair;
use crate::synth::LandmarkSet;

pub const MANIFEST_FORMAT: &str = "headgaze-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: image decode failed: {message}")]
    Image { path: PathBuf, message: String },
    #[error("manifest line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("manifest line 1: unsupported header {0:?}")]
    Header(String),
    #[error("eye shapes differ: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("unknown subject id {0:?}")]
    UnknownSubject(String),
    #[error("held-out subject set is empty")]
    EmptyHoldOut,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("unknown eye strategy {0:?} (expected sem, beh, bev or bec)")]
    UnknownStrategy(String),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which eye of the subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

/// How both eye crops are turned into network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeStrategy {
    /// Single eye method: one eye per input unit, one gaze output.
    Sem,
    /// Both eyes stitched horizontally.
    Beh,
    /// Both eyes stitched vertically.
    Bev,
    /// Both eyes concatenated on the channel axis.
    Bec,
}

impl EyeStrategy {
    pub fn is_dual(self) -> bool {
        !matches!(self, EyeStrategy::Sem)
    }

    /// Gaze values per input unit: 2 for SEM, 4 for the dual-eye strategies.
    pub fn target_width(self) -> usize {
        if self.is_dual() {
            4
        } else {
            2
        }
    }

    /// The merges that one sample expands into.
    pub fn merges(self) -> Vec<Merge> {
        match self {
            EyeStrategy::Sem => vec![Merge::Single(Side::Left), Merge::Single(Side::Right)],
            EyeStrategy::Beh => vec![Merge::Horizontal],
            EyeStrategy::Bev => vec![Merge::Vertical],
            EyeStrategy::Bec => vec![Merge::Channel],
        }
    }

    /// Merged `(H, W, C)` shape for per-eye crops of shape `(h, w, c)`.
    pub fn merged_shape(self, h: usize, w: usize, c: usize) -> (usize, usize, usize) {
        match self {
            EyeStrategy::Sem => (h, w, c),
            EyeStrategy::Beh => (h, 2 * w, c),
            EyeStrategy::Bev => (2 * h, w, c),
            EyeStrategy::Bec => (h, w, 2 * c),
        }
    }
}

impl fmt::Display for EyeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EyeStrategy::Sem => "sem",
            EyeStrategy::Beh => "beh",
            EyeStrategy::Bev => "bev",
            EyeStrategy::Bec => "bec",
        };
        f.write_str(s)
    }
}

impl FromStr for EyeStrategy {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sem" => Ok(EyeStrategy::Sem),
            "beh" => Ok(EyeStrategy::Beh),
            "bev" => Ok(EyeStrategy::Bev),
            "bec" => Ok(EyeStrategy::Bec),
            _ => Err(DatasetError::UnknownStrategy(s.to_string())),
        }
    }
}

/// One concrete merge operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Single(Side),
    Horizontal,
    Vertical,
    Channel,
}

/// Merges two `(H, W, C)` eye crops. Channel merging puts the left eye's
/// channels first.
pub fn merge_eyes(left: &Array3<f32>, right: &Array3<f32>, merge: Merge) -> Result<Array3<f32>, DatasetError> {
    if left.shape() != right.shape() {
        return Err(DatasetError::ShapeMismatch {
            left: left.shape().to_vec(),
            right: right.shape().to_vec(),
        });
    }
    let out = match merge {
        Merge::Single(Side::Left) => left.clone(),
        Merge::Single(Side::Right) => right.clone(),
        Merge::Horizontal => concatenate(Axis(1), &[left.view(), right.view()]).expect("shapes checked"),
        Merge::Vertical => concatenate(Axis(0), &[left.view(), right.view()]).expect("shapes checked"),
        Merge::Channel => concatenate(Axis(2), &[left.view(), right.view()]).expect("shapes checked"),
    };
    Ok(out)
}

/// Splits a channel-merged tensor back into its two halves.
pub fn split_channels(merged: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let c = merged.shape()[2] / 2;
    let left = merged.slice(ndarray::s![.., .., ..c]).to_owned();
    let right = merged.slice(ndarray::s![.., .., c..]).to_owned();
    (left, right)
}

/// Grayscale image payload: a file on disk or pixels already in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    File(PathBuf),
    Pixels(Arc<GrayImage>),
}

impl ImageRef {
    pub fn load(&self) -> Result<GrayImage, DatasetError> {
        match self {
            ImageRef::Pixels(p) => Ok((**p).clone()),
            ImageRef::File(path) => {
                let img = image::open(path).map_err(|e| match e {
                    image::ImageError::IoError(source) => DatasetError::io(path, source),
                    other => DatasetError::Image {
                        path: path.clone(),
                        message: other.to_string(),
                    },
                })?;
                Ok(img.into_luma8())
            }
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            ImageRef::File(p) => Some(p),
            ImageRef::Pixels(_) => None,
        }
    }
}

/// One capture: face and both eye crops plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub camera_id: String,
    pub face_image: ImageRef,
    pub left_eye: ImageRef,
    pub right_eye: ImageRef,
    pub head: AnglePair,
    pub gaze_left: AnglePair,
    pub gaze_right: AnglePair,
    /// Set when only one gaze label was provided and it was copied to both eyes.
    pub gaze_duplicated: bool,
    /// Face-image landmarks in pixels; opaque to this crate.
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub eye_landmarks_left: Option<LandmarkSet>,
    pub eye_landmarks_right: Option<LandmarkSet>,
    pub eye_in_head_left: Option<AnglePair>,
    pub eye_in_head_right: Option<AnglePair>,
    pub illumination_tag: Option<String>,
    pub split: Option<String>,
}

impl Sample {
    pub fn gaze(&self, side: Side) -> AnglePair {
        match side {
            Side::Left => self.gaze_left,
            Side::Right => self.gaze_right,
        }
    }

    pub fn eye(&self, side: Side) -> &ImageRef {
        match side {
            Side::Left => &self.left_eye,
            Side::Right => &self.right_eye,
        }
    }

    pub fn eye_landmarks(&self, side: Side) -> Option<&LandmarkSet> {
        match side {
            Side::Left => self.eye_landmarks_left.as_ref(),
            Side::Right => self.eye_landmarks_right.as_ref(),
        }
    }
}

/// An ordered, immutable collection of samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub source: Option<PathBuf>,
    pub split: Option<String>,
}

impl SampleSet {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            source: None,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// Samples carrying the given split tag, order preserved.
    pub fn with_split(&self, tag: &str) -> SampleSet {
        SampleSet {
            samples: self
                .samples
                .iter()
                .filter(|s| s.split.as_deref() == Some(tag))
                .cloned()
                .collect(),
            source: self.source.clone(),
            split: Some(tag.to_string()),
        }
    }

    /// Batches of borrowed samples in the seed-determined order.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Vec<&Sample>>, DatasetError> {
        Ok(batch_iter(self.len(), batch_size, seed)?
            .into_iter()
            .map(|b| b.into_iter().map(|i| &self.samples[i]).collect())
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    subject_id: String,
    camera_id: String,
    face: String,
    left_eye: String,
    right_eye: String,
    head: AnglePair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaze_left: Option<AnglePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaze_right: Option<AnglePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaze: Option<AnglePair>,
    #[serde(default, skip_serializing_if = "is_false")]
    gaze_duplicated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    landmarks: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_landmarks_left: Option<LandmarkSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_landmarks_right: Option<LandmarkSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_in_head_left: Option<AnglePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_in_head_right: Option<AnglePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    illumination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

fn relative_ref(image: &ImageRef, root: &Path, field: &str) -> Result<String, DatasetError> {
    let path = image.path().ok_or_else(|| DatasetError::Schema {
        line: 0,
        message: format!("{field} holds in-memory pixels; write images before saving a manifest"),
    })?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

impl Record {
    fn from_sample(s: &Sample, root: &Path) -> Result<Self, DatasetError> {
        let (gaze_left, gaze_right, gaze) = if s.gaze_duplicated {
            (None, None, Some(s.gaze_left))
        } else {
            (Some(s.gaze_left), Some(s.gaze_right), None)
        };
        Ok(Record {
            subject_id: s.subject_id.clone(),
            camera_id: s.camera_id.clone(),
            face: relative_ref(&s.face_image, root, "face")?,
            left_eye: relative_ref(&s.left_eye, root, "left_eye")?,
            right_eye: relative_ref(&s.right_eye, root, "right_eye")?,
            head: s.head,
            gaze_left,
            gaze_right,
            gaze,
            gaze_duplicated: s.gaze_duplicated,
            landmarks: s.landmarks.clone(),
            eye_landmarks_left: s.eye_landmarks_left.clone(),
            eye_landmarks_right: s.eye_landmarks_right.clone(),
            eye_in_head_left: s.eye_in_head_left,
            eye_in_head_right: s.eye_in_head_right,
            illumination: s.illumination_tag.clone(),
            split: s.split.clone(),
        })
    }

    fn into_sample(self, root: &Path, line: usize) -> Result<Sample, DatasetError> {
        let (gaze_left, gaze_right, duplicated) = match (self.gaze_left, self.gaze_right, self.gaze) {
            (Some(l), Some(r), _) => (l, r, false),
            (None, None, Some(g)) => (g, g, true),
            (None, _, None) | (None, Some(_), Some(_)) => {
                return Err(DatasetError::Schema {
                    line,
                    message: "missing field `gaze_left`".into(),
                })
            }
            (Some(_), None, _) => {
                return Err(DatasetError::Schema {
                    line,
                    message: "missing field `gaze_right`".into(),
                })
            }
        };
        let resolve = |rel: &str| -> Result<ImageRef, DatasetError> {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(DatasetError::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
                ));
            }
            Ok(ImageRef::File(p))
        };
        Ok(Sample {
            subject_id: self.subject_id,
            camera_id: self.camera_id,
            face_image: resolve(&self.face)?,
            left_eye: resolve(&self.left_eye)?,
            right_eye: resolve(&self.right_eye)?,
            head: self.head,
            gaze_left,
            gaze_right,
            gaze_duplicated: duplicated || self.gaze_duplicated,
            landmarks: self.landmarks,
            eye_landmarks_left: self.eye_landmarks_left,
            eye_landmarks_right: self.eye_landmarks_right,
            eye_in_head_left: self.eye_in_head_left,
            eye_in_head_right: self.eye_in_head_right,
            illumination_tag: self.illumination,
            split: self.split,
        })
    }
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a manifest; image paths are resolved against the manifest's directory
/// and must exist.
pub fn load_manifest(path: &Path) -> Result<SampleSet, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let root = manifest_root(path);
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        None => {
            return Ok(SampleSet {
                samples: Vec::new(),
                source: Some(path.to_path_buf()),
                split: None,
            })
        }
        Some(l) => l.map_err(|e| DatasetError::io(path, e))?,
    };
    match serde_json::from_str::<Header>(&header_line) {
        Ok(h) if h.format == MANIFEST_FORMAT && h.version == MANIFEST_VERSION => {}
        _ => return Err(DatasetError::Header(header_line)),
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(record.into_sample(&root, line_no)?);
    }
    Ok(SampleSet {
        samples,
        source: Some(path.to_path_buf()),
        split: None,
    })
}

/// Writes the manifest for `set`. Image references must be files; they are
/// stored relative to the manifest's directory when they live under it.
pub fn save_manifest(set: &SampleSet, path: &Path) -> Result<(), DatasetError> {
    let root = manifest_root(path);
    let file = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
    };
    let mut write_line = |s: String| -> Result<(), DatasetError> {
        w.write_all(s.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| DatasetError::io(path, e))
    };
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for s in &set.samples {
        let rec = Record::from_sample(s, &root)?;
        write_line(serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

/// Partitions by subject: every sample of a held-out subject goes to the test
/// side, everything else to train. Relative order is preserved on both sides.
pub fn split_cross_subject(
    set: &SampleSet,
    held_out: &BTreeSet<String>,
) -> Result<(SampleSet, SampleSet), DatasetError> {
    if held_out.is_empty() {
        return Err(DatasetError::EmptyHoldOut);
    }
    let present = set.subjects();
    if let Some(missing) = held_out.iter().find(|s| !present.contains(*s)) {
        return Err(DatasetError::UnknownSubject(missing.clone()));
    }
    let (test, train): (Vec<Sample>, Vec<Sample>) = set
        .samples
        .iter()
        .cloned()
        .partition(|s| held_out.contains(&s.subject_id));
    let wrap = |samples, tag: &str| SampleSet {
        samples,
        source: set.source.clone(),
        split: Some(tag.to_string()),
    };
    Ok((wrap(train, "train"), wrap(test, "test")))
}

/// Seed-determined shuffled index batches covering `0..n` exactly once. The
/// final batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatchSize);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Converts an 8-bit grayscale image into an `(H, W, 1)` float tensor with the
/// raw 0..255 intensities.
pub fn gray_to_tensor(img: &GrayImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| img.get_pixel(x as u32, y as u32)[0] as f32)
}

/// A merged eye tensor with its targets, ready for a network.
#[derive(Debug, Clone)]
pub struct InputUnit {
    pub sample_index: usize,
    pub merge: Merge,
    pub eye_tensor: Array3<f32>,
    pub face_tensor: Option<Array3<f32>>,
    /// `(yaw, pitch)` for SEM, `(left_yaw, left_pitch, right_yaw, right_pitch)` otherwise.
    pub targets: Vec<f64>,
    pub head_target: AnglePair,
}

/// Gaze targets for one merge, in the fixed left-then-right layout.
pub fn unit_targets(sample: &Sample, merge: Merge) -> Vec<f64> {
    match merge {
        Merge::Single(side) => sample.gaze(side).to_array().to_vec(),
        _ => vec![
            sample.gaze_left.yaw,
            sample.gaze_left.pitch,
            sample.gaze_right.yaw,
            sample.gaze_right.pitch,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize, offset: f32) -> Array3<f32> {
        Array3::from_shape_fn((h, w, c), |(y, x, k)| offset + (y * w * c + x * c + k) as f32)
    }

    fn sample(subject: &str, i: usize) -> Sample {
        let px = Arc::new(GrayImage::new(4, 4));
        Sample {
            subject_id: subject.to_string(),
            camera_id: "cam0".into(),
            face_image: ImageRef::Pixels(px.clone()),
            left_eye: ImageRef::Pixels(px.clone()),
            right_eye: ImageRef::Pixels(px),
            head: AnglePair::new(i as f64, 0.0),
            gaze_left: AnglePair::new(i as f64, 1.0),
            gaze_right: AnglePair::new(i as f64, -1.0),
            gaze_duplicated: false,
            landmarks: None,
            eye_landmarks_left: None,
            eye_landmarks_right: None,
            eye_in_head_left: None,
            eye_in_head_right: None,
            illumination_tag: None,
            split: None,
        }
    }

    #[test]
    fn merge_shapes() {
        let l = ramp(224, 224, 1, 0.0);
        let r = ramp(224, 224, 1, 1e6);
        assert_eq!(merge_eyes(&l, &r, Merge::Channel).unwrap().shape(), &[224, 224, 2]);
        assert_eq!(merge_eyes(&l, &r, Merge::Horizontal).unwrap().shape(), &[224, 448, 1]);
        assert_eq!(merge_eyes(&l, &r, Merge::Vertical).unwrap().shape(), &[448, 224, 1]);
        assert_eq!(merge_eyes(&l, &r, Merge::Single(Side::Right)).unwrap(), r);
    }

    #[test]
    fn merge_rejects_mismatch() {
        let l = ramp(4, 6, 1, 0.0);
        let r = ramp(4, 5, 1, 0.0);
        assert!(matches!(merge_eyes(&l, &r, Merge::Channel), Err(DatasetError::ShapeMismatch { .. })));
    }

    #[test]
    fn channel_order_is_left_then_right() {
        let l = ramp(3, 5, 2, 0.0);
        let r = ramp(3, 5, 2, 100.0);
        let m = merge_eyes(&l, &r, Merge::Channel).unwrap();
        assert_eq!(m[[1, 2, 0]], l[[1, 2, 0]]);
        assert_eq!(m[[1, 2, 3]], r[[1, 2, 1]]);
        let (a, b) = split_channels(&m);
        assert_eq!(a, l);
        assert_eq!(b, r);
    }

    #[test]
    fn batches_of_five_by_two() {
        let b = batch_iter(5, 2, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(batch_iter(64, 64, 0).unwrap().len(), 1);
        assert!(matches!(batch_iter(3, 0, 0), Err(DatasetError::ZeroBatchSize)));
    }

    #[test]
    fn batch_order_determinism() {
        let a = batch_iter(50, 8, 42).unwrap();
        assert_eq!(a, batch_iter(50, 8, 42).unwrap());
        let differing = (0..100u64)
            .filter(|&s| batch_iter(50, 8, s).unwrap() != batch_iter(50, 8, s + 1000).unwrap())
            .count();
        assert!(differing >= 99, "only {differing} of 100 seed pairs differ");
    }

    #[test]
    fn cross_subject_split_edge_cases() {
        let set = SampleSet::new((0..6).map(|i| sample(&format!("s{}", i % 3), i)).collect());
        let all: BTreeSet<String> = set.subjects();
        let (train, test) = split_cross_subject(&set, &all).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 6);
        let none: BTreeSet<String> = ["nobody".to_string()].into();
        assert!(matches!(split_cross_subject(&set, &none), Err(DatasetError::UnknownSubject(_))));
        assert!(matches!(split_cross_subject(&set, &BTreeSet::new()), Err(DatasetError::EmptyHoldOut)));
    }

    #[test]
    fn cross_subject_partition_exhaustive() {
        let set = SampleSet::new((0..50).map(|i| sample(&format!("s{}", i % 10), i)).collect());
        let held: BTreeSet<String> = ["s3".to_string(), "s7".to_string()].into();
        let (train, test) = split_cross_subject(&set, &held).unwrap();
        assert_eq!(train.len() + test.len(), set.len());
        for s in &set.samples {
            let in_train = train.samples.contains(s);
            let in_test = test.samples.contains(s);
            assert!(in_train ^ in_test);
            assert_eq!(in_test, held.contains(&s.subject_id));
        }
        let train_subjects = train.subjects();
        assert!(test.subjects().iter().all(|s| !train_subjects.contains(s)));
        // order preserved
        let idx: Vec<f64> = train.samples.iter().map(|s| s.head.yaw).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn targets_keep_eyes_apart() {
        let s = sample("a", 3);
        assert_eq!(unit_targets(&s, Merge::Channel), vec![3.0, 1.0, 3.0, -1.0]);
        assert_eq!(unit_targets(&s, Merge::Single(Side::Right)), vec![3.0, -1.0]);
    }

    #[test]
    fn strategy_parse_and_shapes() {
        assert_eq!("BEC".parse::<EyeStrategy>().unwrap(), EyeStrategy::Bec);
        assert!("xyz".parse::<EyeStrategy>().is_err());
        assert_eq!(EyeStrategy::Beh.merged_shape(64, 96, 1), (64, 192, 1));
        assert_eq!(EyeStrategy::Sem.target_width(), 2);
        assert_eq!(EyeStrategy::Bev.target_width(), 4);
    }

    proptest! {
        #[test]
        fn merged_element_count(h in 1usize..12, w in 1usize..12, c in 1usize..4) {
            let l = ramp(h, w, c, 0.0);
            let r = ramp(h, w, c, 7.0);
            for strategy in [EyeStrategy::Sem, EyeStrategy::Beh, EyeStrategy::Bev, EyeStrategy::Bec] {
                for merge in strategy.merges() {
                    let m = merge_eyes(&l, &r, merge).unwrap();
                    let expected = if strategy.is_dual() { 2 * h * w * c } else { h * w * c };
                    prop_assert_eq!(m.len(), expected);
                    let (eh, ew, ec) = strategy.merged_shape(h, w, c);
                    prop_assert_eq!(m.shape(), &[eh, ew, ec]);
                }
            }
        }

        #[test]
        fn every_index_once_per_epoch(n in 0usize..200, bs in 1usize..70, seed in any::<u64>()) {
            let batches = batch_iter(n, bs, seed).unwrap();
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!(batches.iter().rev().skip(1).all(|b| b.len() == bs));
        }
    }
}
