//! Training regimes: HGD implicit multi-task, HGD explicit two-stage, the
//! staged noHP pipeline and the zone classifier.
//!
//! Samples are first turned into a [`Prepared`] set (resized, optionally
//! mHoG-augmented, merged per the eye strategy, flattened `CHW`), from which
//! batches are gathered in a seed-fixed order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use nalgebra::DMatrix;
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{gray_to_tensor, merge_eyes, unit_targets, DatasetError, EyeStrategy, Merge, SampleSet, Side};
use crate::geometry::{self, AnglePair};
use crate::nets::{self, HgdConfig, HgdModel, HgdOutput, NetError, NoHpStack, OutputKind};
use crate::preprocess::{self, HogConfig, LdaTransform, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch}: {components}")]
    NonFinite {
        stage: String,
        epoch: usize,
        batch: usize,
        components: String,
    },
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("frozen parameter `{name}` of {part} changed")]
    Freeze { part: String, name: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Net(NetError::Candle(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Head-loss weakening factor.
    pub beta: f64,
    pub seed: u64,
    pub wing_w: f64,
    pub wing_eps: f64,
    /// Explicit stage 1: stop once validation head AEM has not improved by
    /// more than `min_delta` degrees for `patience` epochs.
    pub patience: usize,
    pub min_delta: f64,
    pub stage1_max_epochs: usize,
    /// noHP stage lengths; `None` falls back to `epochs`.
    pub landmark_epochs: Option<usize>,
    pub module_epochs: Option<usize>,
    pub final_epochs: Option<usize>,
    /// `(height, width)` of the crop in which landmark residuals are measured
    /// in pixels, both for the loss and the reported error.
    pub landmark_crop: (usize, usize),
    /// Ends a stage early once validation gaze AEM falls below this.
    pub stop_below_val_aem: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_every: 30,
            beta: 0.3,
            seed: 0,
            wing_w: nets::WING_W,
            wing_eps: nets::WING_EPS,
            patience: 10,
            min_delta: 0.05,
            stage1_max_epochs: 100,
            landmark_epochs: None,
            module_epochs: None,
            final_epochs: None,
            landmark_crop: (64, 96),
            stop_below_val_aem: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return bad("batch_size and decay_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be positive");
        }
        if !(self.wing_w > 0.0 && self.wing_eps > 0.0) {
            return bad("wing parameters must be positive");
        }
        Ok(())
    }

    /// Step size at a stage-local epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One epoch of one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub seconds: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_gaze_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_head_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_landmark_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_aem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_vem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_head_aem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_gaze_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_head_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_aem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_vem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_head_aem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_landmark_px: Option<f64>,
}

impl EpochRecord {
    /// Every numeric field paired with its name.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("lr", self.lr), ("train_loss", self.train_loss)];
        let optional = [
            ("train_gaze_loss", self.train_gaze_loss),
            ("train_head_loss", self.train_head_loss),
            ("train_landmark_loss", self.train_landmark_loss),
            ("train_aem", self.train_aem),
            ("train_vem", self.train_vem),
            ("train_head_aem", self.train_head_aem),
            ("train_accuracy", self.train_accuracy),
            ("val_gaze_loss", self.val_gaze_loss),
            ("val_head_loss", self.val_head_loss),
            ("val_aem", self.val_aem),
            ("val_vem", self.val_vem),
            ("val_head_aem", self.val_head_aem),
            ("val_accuracy", self.val_accuracy),
            ("val_landmark_px", self.val_landmark_px),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HistoryLine {
    Epoch(EpochRecord),
    Warning { message: String },
    Baseline { stage: String, val_aem: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    /// Untrained final-model AEM measured before noHP stage C.
    pub baseline_aem: Option<f64>,
}

impl TrainHistory {
    fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some((name, v)) = rec.metrics().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                stage: rec.stage.clone(),
                epoch: rec.epoch,
                batch: 0,
                components: format!("{name} = {v}"),
            });
        }
        log::info!(
            "epoch {} [{}] lr {:.2e} loss {:.4} val aem {:?}",
            rec.epoch,
            rec.stage,
            rec.lr,
            rec.train_loss,
            rec.val_aem
        );
        self.records.push(rec);
        Ok(())
    }

    fn next_epoch(&self) -> usize {
        self.records.len()
    }

    /// Epoch indices at which a new stage begins (the first stage excluded).
    pub fn stage_boundaries(&self) -> Vec<usize> {
        self.records
            .windows(2)
            .filter(|w| w[0].stage != w[1].stage)
            .map(|w| w[1].epoch)
            .collect()
    }

    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.stage) {
                out.push(r.stage.clone());
            }
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| TrainError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        let mut lines: Vec<HistoryLine> = self.records.iter().cloned().map(HistoryLine::Epoch).collect();
        if let Some(b) = self.baseline_aem {
            lines.push(HistoryLine::Baseline {
                stage: "final".into(),
                val_aem: b,
            });
        }
        lines.extend(self.warnings.iter().map(|m| HistoryLine::Warning { message: m.clone() }));
        for line in lines {
            let s = serde_json::to_string(&line).expect("history records serialize");
            writeln!(f, "{s}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |m: String| TrainError::Io {
            path: path.to_path_buf(),
            message: m,
        };
        let f = fs::File::open(path).map_err(|e| io(e.to_string()))?;
        let mut h = TrainHistory::default();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", i + 1)))? {
                HistoryLine::Epoch(r) => h.records.push(r),
                HistoryLine::Warning { message } => h.warnings.push(message),
                HistoryLine::Baseline { val_aem, .. } => h.baseline_aem = Some(val_aem),
            }
        }
        Ok(h)
    }
}

/// 3x3-style partition of the gaze range into zones numbered row-major from
/// the top-left (highest pitch, most negative yaw), starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneGrid {
    pub rows: usize,
    pub cols: usize,
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
}

impl Default for ZoneGrid {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            yaw: (-60.0, 60.0),
            pitch: (-30.0, 30.0),
        }
    }
}

impl ZoneGrid {
    pub fn zones(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.yaw.0 < self.yaw.1) || !(self.pitch.0 < self.pitch.1) {
            return Err(TrainError::Config(format!("degenerate zone grid {self:?}")));
        }
        Ok(())
    }

    /// Zone id of a gaze label and whether it lay outside the grid (in which
    /// case the nearest zone is returned).
    pub fn zone(&self, g: AnglePair) -> (usize, bool) {
        let outside = g.yaw < self.yaw.0 || g.yaw > self.yaw.1 || g.pitch < self.pitch.0 || g.pitch > self.pitch.1;
        let bin = |t: f64, n: usize| ((t * n as f64).floor().max(0.0) as usize).min(n - 1);
        let col = bin((g.yaw - self.yaw.0) / (self.yaw.1 - self.yaw.0), self.cols);
        let row = bin((self.pitch.1 - g.pitch) / (self.pitch.1 - self.pitch.0), self.rows);
        (row * self.cols + col + 1, outside)
    }
}

/// Input preparation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    /// Face input `(height, width)`; `None` skips faces.
    pub face_size: Option<(usize, usize)>,
    pub eye_size: (usize, usize),
    pub strategy: EyeStrategy,
    /// mHoG channels appended to every image when set.
    pub mhog: Option<HogConfig>,
    /// HoG descriptor settings for the LDA vector when set.
    pub lda_hog: Option<HogConfig>,
}

impl PrepConfig {
    pub fn for_hgd(cfg: &HgdConfig, hog: &HogConfig) -> Result<Self> {
        if cfg.mhog_levels > 0 && hog.levels() != cfg.mhog_levels {
            return Err(TrainError::Config(format!(
                "model expects {} mHoG levels, HoG config has {}",
                cfg.mhog_levels,
                hog.levels()
            )));
        }
        Ok(Self {
            face_size: cfg.use_face_model.then_some(cfg.face_size),
            eye_size: cfg.eye_size,
            strategy: cfg.strategy,
            mhog: (cfg.mhog_levels > 0).then(|| hog.clone()),
            lda_hog: (cfg.lda_dim > 0).then(|| hog.clone()),
        })
    }

    pub fn for_nohp(stack: &NoHpStack, hog: &HogConfig) -> Self {
        let (c, h, w) = stack.cfg.detector.input;
        Self {
            face_size: None,
            eye_size: (h, w),
            strategy: EyeStrategy::Sem,
            mhog: (c > 1).then(|| hog.clone()),
            lda_hog: None,
        }
    }
}

/// Network-ready units derived from a sample set. SEM yields two units per
/// sample (left, right), the dual strategies one.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub units: Vec<(usize, Merge)>,
    /// `(C, H, W)` of one eye unit.
    pub eye_shape: (usize, usize, usize),
    pub eye: Vec<f32>,
    pub face_shape: Option<(usize, usize, usize)>,
    pub face: Vec<f32>,
    /// Gaze targets, `units x gaze_width`, left then right for dual units.
    pub gaze: Vec<f32>,
    pub gaze_width: usize,
    pub head: Vec<f32>,
    /// Normalized landmark targets, `units x 32`, when every unit has them.
    pub landmarks: Option<Vec<f32>>,
    pub descriptors: Option<Vec<Vec<f64>>>,
    pub lda: Option<Vec<f32>>,
    pub lda_width: usize,
    pub subjects: Vec<String>,
}

fn hwc_to_chw(a: &Array3<f32>) -> Vec<f32> {
    a.view().permuted_axes([2, 0, 1]).iter().copied().collect()
}

fn to_input(img: &image::GrayImage, size: (usize, usize), mhog: Option<&HogConfig>) -> Result<(Array3<f32>, image::GrayImage)> {
    let resized = preprocess::resize(img, size);
    let base = gray_to_tensor(&resized);
    let extra = match mhog {
        Some(cfg) => Some(preprocess::mhog(&preprocess::gray_to_array(&resized), cfg)?),
        None => None,
    };
    Ok((preprocess::assemble_input(&base, extra.as_ref(), mhog.is_some())?, resized))
}

struct SamplePrep {
    face: Option<Vec<f32>>,
    units: Vec<UnitPrep>,
}

struct UnitPrep {
    merge: Merge,
    eye: Vec<f32>,
    landmarks: Option<Vec<f32>>,
    descriptor: Option<Vec<f64>>,
}

impl Prepared {
    pub fn new(set: &SampleSet, cfg: &PrepConfig) -> Result<Self> {
        if set.is_empty() {
            return Err(TrainError::Config("empty sample set".into()));
        }
        let per_sample: Vec<SamplePrep> = set
            .samples
            .par_iter()
            .map(|s| -> Result<SamplePrep> {
                let face = match cfg.face_size {
                    Some(size) => Some(hwc_to_chw(&to_input(&s.face_image.load()?, size, cfg.mhog.as_ref())?.0)),
                    None => None,
                };
                let mut eyes = Vec::with_capacity(2);
                for side in Side::BOTH {
                    let raw = s.eye(side).load()?;
                    let (h, w) = (raw.height() as usize, raw.width() as usize);
                    let (t, resized) = to_input(&raw, cfg.eye_size, cfg.mhog.as_ref())?;
                    let lm = s.eye_landmarks(side).map(|l| l.normalized(h, w).iter().map(|&v| v as f32).collect::<Vec<_>>());
                    let desc = match &cfg.lda_hog {
                        Some(h) => Some(preprocess::hog_descriptor(&preprocess::gray_to_array(&resized), h)?),
                        None => None,
                    };
                    eyes.push((t, lm, desc));
                }
                let units = cfg
                    .strategy
                    .merges()
                    .into_iter()
                    .map(|merge| -> Result<UnitPrep> {
                        let merged = merge_eyes(&eyes[0].0, &eyes[1].0, merge)?;
                        let (landmarks, descriptor) = match merge {
                            Merge::Single(side) => {
                                let e = &eyes[side as usize];
                                (e.1.clone(), e.2.clone())
                            }
                            _ => (
                                None,
                                match (&eyes[0].2, &eyes[1].2) {
                                    (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
                                    _ => None,
                                },
                            ),
                        };
                        Ok(UnitPrep {
                            merge,
                            eye: hwc_to_chw(&merged),
                            landmarks,
                            descriptor,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(SamplePrep { face, units })
            })
            .collect::<Result<_>>()?;

        let (h, w) = cfg.eye_size;
        let c = 1 + cfg.mhog.as_ref().map_or(0, HogConfig::levels);
        let (mh, mw, mc) = cfg.strategy.merged_shape(h, w, c);
        let gaze_width = cfg.strategy.target_width();
        let mut out = Prepared {
            units: Vec::new(),
            eye_shape: (mc, mh, mw),
            eye: Vec::new(),
            face_shape: cfg.face_size.map(|(fh, fw)| (c, fh, fw)),
            face: Vec::new(),
            gaze: Vec::new(),
            gaze_width,
            head: Vec::new(),
            landmarks: Some(Vec::new()),
            descriptors: cfg.lda_hog.as_ref().map(|_| Vec::new()),
            lda: None,
            lda_width: 0,
            subjects: Vec::new(),
        };
        for (i, sp) in per_sample.into_iter().enumerate() {
            let s = &set.samples[i];
            for u in sp.units {
                out.units.push((i, u.merge));
                out.eye.extend_from_slice(&u.eye);
                if let Some(f) = &sp.face {
                    out.face.extend_from_slice(f);
                }
                out.gaze.extend(unit_targets(s, u.merge).into_iter().map(|v| v as f32));
                out.head.extend([s.head.yaw as f32, s.head.pitch as f32]);
                match (&mut out.landmarks, u.landmarks) {
                    (Some(all), Some(l)) => all.extend(l),
                    (lm, _) => *lm = None,
                }
                if let (Some(all), Some(d)) = (&mut out.descriptors, u.descriptor) {
                    all.push(d);
                }
                out.subjects.push(s.subject_id.clone());
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Gaze labels of unit `i` (one pair for SEM, left and right otherwise).
    pub fn gaze_pairs(&self, i: usize) -> Vec<AnglePair> {
        let row = &self.gaze[i * self.gaze_width..(i + 1) * self.gaze_width];
        pairs(row)
    }

    pub fn all_gaze_pairs(&self) -> Vec<AnglePair> {
        pairs(&self.gaze)
    }

    pub fn head_pairs(&self) -> Vec<AnglePair> {
        pairs(&self.head)
    }

    /// Fits LDA on the HoG descriptors against each unit's first gaze label.
    pub fn fit_lda(&self, bin_width: f64) -> Result<LdaTransform> {
        let desc = self
            .descriptors
            .as_ref()
            .ok_or_else(|| TrainError::Config("set was prepared without HoG descriptors".into()))?;
        let d = desc[0].len();
        let x = DMatrix::from_fn(desc.len(), d, |r, c| desc[r][c]);
        let labels: Vec<AnglePair> = (0..self.len()).map(|i| self.gaze_pairs(i)[0]).collect();
        Ok(preprocess::fit_lda(&x, &labels, bin_width)?)
    }

    pub fn apply_lda(&mut self, lda: &LdaTransform) -> Result<()> {
        let desc = self
            .descriptors
            .as_ref()
            .ok_or_else(|| TrainError::Config("set was prepared without HoG descriptors".into()))?;
        let mut v = Vec::with_capacity(desc.len() * lda.k());
        for d in desc {
            v.extend(lda.project(d)?.into_iter().map(|x| x as f32));
        }
        self.lda = Some(v);
        self.lda_width = lda.k();
        Ok(())
    }

    pub fn check_hgd(&self, cfg: &HgdConfig) -> Result<()> {
        let mismatch = |what: &str, want: String, got: String| {
            Err(TrainError::Config(format!("{what}: model expects {want}, data has {got}")))
        };
        if self.eye_shape != cfg.eye_input() {
            return mismatch("eye input", format!("{:?}", cfg.eye_input()), format!("{:?}", self.eye_shape));
        }
        let want_face = cfg.use_face_model.then(|| cfg.face_input());
        if self.face_shape != want_face {
            return mismatch("face input", format!("{want_face:?}"), format!("{:?}", self.face_shape));
        }
        if self.lda_width != cfg.lda_dim {
            return mismatch("LDA width", cfg.lda_dim.to_string(), self.lda_width.to_string());
        }
        if cfg.output == OutputKind::Regression && self.gaze_width != cfg.outputs() {
            return mismatch("gaze targets", cfg.outputs().to_string(), self.gaze_width.to_string());
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize], device: &Device) -> Result<Batch> {
        let b = idx.len();
        let (c, h, w) = self.eye_shape;
        let eye = Tensor::from_vec(gather(&self.eye, c * h * w, idx), (b, c, h, w), device)?;
        let face = match self.face_shape {
            Some((fc, fh, fw)) => Some(Tensor::from_vec(gather(&self.face, fc * fh * fw, idx), (b, fc, fh, fw), device)?),
            None => None,
        };
        let lda = match &self.lda {
            Some(v) => Some(Tensor::from_vec(gather(v, self.lda_width, idx), (b, self.lda_width), device)?),
            None => None,
        };
        let landmarks = match &self.landmarks {
            Some(v) => Some(Tensor::from_vec(gather(v, nets::LANDMARK_OUTPUTS, idx), (b, nets::LANDMARK_OUTPUTS), device)?),
            None => None,
        };
        Ok(Batch {
            eye,
            face,
            lda,
            gaze: Tensor::from_vec(gather(&self.gaze, self.gaze_width, idx), (b, self.gaze_width), device)?,
            head: Tensor::from_vec(gather(&self.head, 2, idx), (b, 2), device)?,
            landmarks,
        })
    }
}

fn gather(data: &[f32], width: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&data[i * width..(i + 1) * width]);
    }
    out
}

/// Consecutive `(yaw, pitch)` values as angle pairs.
pub fn pairs(values: &[f32]) -> Vec<AnglePair> {
    values
        .chunks_exact(2)
        .map(|p| AnglePair::new(p[0] as f64, p[1] as f64))
        .collect()
}

pub struct Batch {
    pub eye: Tensor,
    pub face: Option<Tensor>,
    pub lda: Option<Tensor>,
    pub gaze: Tensor,
    pub head: Tensor,
    pub landmarks: Option<Tensor>,
}

/// Loss components of one HGD batch.
pub struct LossParts {
    pub total: Tensor,
    pub gaze: Tensor,
    pub head: Option<Tensor>,
}

/// `gaze + beta * head` with both terms wing losses averaged over the batch
/// (and over both eyes for dual units).
pub fn implicit_loss(out: &HgdOutput, batch: &Batch, beta: f64, cfg: &TrainConfig) -> Result<LossParts> {
    let gaze = nets::wing_loss(&out.gaze, &batch.gaze, cfg.wing_w, cfg.wing_eps)?;
    let head = match &out.head {
        Some(h) => Some(nets::wing_loss(h, &batch.head, cfg.wing_w, cfg.wing_eps)?),
        None => None,
    };
    let total = match &head {
        Some(h) => (&gaze + (h * beta)?)?,
        None => gaze.clone(),
    };
    Ok(LossParts { total, gaze, head })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn stage_seed(seed: u64, stage: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Weighted running mean of per-batch values.
#[derive(Default)]
struct Running {
    sum: f64,
    n: f64,
}

impl Running {
    fn add(&mut self, v: f64, w: usize) {
        self.sum += v * w as f64;
        self.n += w as f64;
    }

    fn mean(&self) -> f64 {
        if self.n == 0.0 {
            0.0
        } else {
            self.sum / self.n
        }
    }
}

fn non_finite(stage: &str, epoch: usize, batch: usize, parts: &[(&str, f64)]) -> Option<TrainError> {
    parts.iter().any(|(_, v)| !v.is_finite()).then(|| TrainError::NonFinite {
        stage: stage.to_string(),
        epoch,
        batch,
        components: parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", "),
    })
}

/// Eval-mode outputs of an HGD model over a prepared set, in unit order.
#[derive(Debug, Clone)]
pub struct HgdPredictions {
    /// `units x outputs` (degrees, or logits for the classifier).
    pub gaze: Vec<f32>,
    pub width: usize,
    pub head: Option<Vec<f32>>,
}

pub fn predict_hgd(model: &HgdModel, data: &Prepared, batch_size: usize) -> Result<HgdPredictions> {
    let device = Device::Cpu;
    let mut gaze = Vec::new();
    let mut head: Option<Vec<f32>> = model.face.as_ref().map(|_| Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, &device)?;
        let out = model.forward(b.face.as_ref(), &b.eye, b.lda.as_ref(), false)?;
        gaze.extend(out.gaze.flatten_all()?.to_vec1::<f32>()?);
        if let (Some(all), Some(h)) = (&mut head, &out.head) {
            all.extend(h.flatten_all()?.to_vec1::<f32>()?);
        }
    }
    Ok(HgdPredictions {
        width: model.cfg.outputs(),
        gaze,
        head,
    })
}

/// Row-wise argmax, 1-based.
pub fn argmax_ids(logits: &[f32], k: usize) -> Vec<usize> {
    logits
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}

struct ValMetrics {
    gaze_loss: Option<f64>,
    head_loss: Option<f64>,
    aem: Option<f64>,
    vem: Option<f64>,
    head_aem: Option<f64>,
    accuracy: Option<f64>,
}

fn wing_mean(pred: &[f32], target: &[f32], cfg: &TrainConfig) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| nets::wing_value(*p as f64 - *t as f64, cfg.wing_w, cfg.wing_eps))
        .sum();
    s / pred.len() as f64
}

fn hgd_val_metrics(model: &HgdModel, data: &Prepared, cfg: &TrainConfig, zones: Option<&[u32]>) -> Result<ValMetrics> {
    let p = predict_hgd(model, data, cfg.batch_size)?;
    let head_aem = match &p.head {
        Some(h) => Some(geometry::aem(&pairs(h), &data.head_pairs()).map_err(|e| TrainError::Config(e.to_string()))?),
        None => None,
    };
    let head_loss = p.head.as_ref().map(|h| wing_mean(h, &data.head, cfg));
    if let Some(z) = zones {
        let ids = argmax_ids(&p.gaze, p.width);
        let hits = ids.iter().zip(z).filter(|(a, b)| **a == **b as usize + 1).count();
        return Ok(ValMetrics {
            gaze_loss: None,
            head_loss,
            aem: None,
            vem: None,
            head_aem,
            accuracy: Some(hits as f64 / ids.len() as f64),
        });
    }
    let (pred, refs) = (pairs(&p.gaze), data.all_gaze_pairs());
    Ok(ValMetrics {
        gaze_loss: Some(wing_mean(&p.gaze, &data.gaze, cfg)),
        head_loss,
        aem: Some(geometry::aem(&pred, &refs).map_err(|e| TrainError::Config(e.to_string()))?),
        vem: Some(geometry::mean_vem(&pred, &refs).map_err(|e| TrainError::Config(e.to_string()))?),
        head_aem,
        accuracy: None,
    })
}

fn fill_val(rec: &mut EpochRecord, v: ValMetrics) {
    rec.val_gaze_loss = v.gaze_loss;
    rec.val_head_loss = v.head_loss;
    rec.val_aem = v.aem;
    rec.val_vem = v.vem;
    rec.val_head_aem = v.head_aem;
    rec.val_accuracy = v.accuracy;
}

fn reached_target(cfg: &TrainConfig, rec: &EpochRecord) -> bool {
    matches!((cfg.stop_below_val_aem, rec.val_aem), (Some(t), Some(a)) if a < t)
}

/// Which HGD loss to optimize in a stage.
#[derive(Clone, Copy, PartialEq)]
enum HgdStage {
    /// Gaze plus weighted head loss, both models updated.
    Joint,
    /// Head loss only, face model updated.
    HeadOnly,
    /// Gaze loss only through frozen face features, gaze model updated.
    GazeFrozenFace,
    /// Cross-entropy on zones (plus weighted head loss).
    Zones,
}

struct StageSpec<'a> {
    name: &'a str,
    kind: HgdStage,
    vars: Vec<Var>,
    epochs: usize,
    zones_train: Option<&'a [u32]>,
    zones_val: Option<&'a [u32]>,
}

fn hgd_forward_for(model: &HgdModel, b: &Batch, kind: HgdStage) -> Result<HgdOutput> {
    match kind {
        HgdStage::GazeFrozenFace => {
            let face = model.face.as_ref().ok_or_else(|| TrainError::Config("explicit training needs the face model".into()))?;
            let (feat, head) = face.forward(b.face.as_ref().expect("face batch"), false)?;
            let feat = feat.detach();
            let gaze = model.gaze.forward(&b.eye, Some(&feat), b.lda.as_ref(), true)?;
            Ok(HgdOutput {
                head_feature: Some(feat),
                head: Some(head.detach()),
                gaze,
            })
        }
        HgdStage::HeadOnly => {
            let face = model.face.as_ref().ok_or_else(|| TrainError::Config("explicit training needs the face model".into()))?;
            let (feat, head) = face.forward(b.face.as_ref().expect("face batch"), true)?;
            Ok(HgdOutput {
                head_feature: Some(feat),
                head: Some(head),
                gaze: Tensor::zeros((1, 1), candle_core::DType::F32, &Device::Cpu)?,
            })
        }
        _ => Ok(model.forward(b.face.as_ref(), &b.eye, b.lda.as_ref(), true)?),
    }
}

fn run_hgd_stage(
    model: &HgdModel,
    train: &Prepared,
    val: Option<&Prepared>,
    cfg: &TrainConfig,
    spec: StageSpec,
    history: &mut TrainHistory,
) -> Result<()> {
    let device = Device::Cpu;
    let mut opt = optimizer(spec.vars, cfg.lr)?;
    let head_task = model.cfg.use_head_task;
    let mut best_head = f64::INFINITY;
    let mut stale = 0;
    let mut converged = false;
    for e in 0..spec.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(e);
        opt.set_learning_rate(lr);
        let epoch = history.next_epoch();
        let (mut total, mut gaze_l, mut head_l, mut aem, mut vem, mut acc) =
            (Running::default(), Running::default(), Running::default(), Running::default(), Running::default(), Running::default());
        for (bi, idx) in crate::dataset::batch_iter(train.len(), cfg.batch_size, stage_seed(cfg.seed, spec.name, e))?
            .into_iter()
            .enumerate()
        {
            let b = train.batch(&idx, &device)?;
            let out = hgd_forward_for(model, &b, spec.kind)?;
            let (loss, g, h) = match spec.kind {
                HgdStage::HeadOnly => {
                    let h = nets::wing_loss(out.head.as_ref().expect("face head"), &b.head, cfg.wing_w, cfg.wing_eps)?;
                    (h.clone(), None, Some(h))
                }
                HgdStage::GazeFrozenFace => {
                    let g = nets::wing_loss(&out.gaze, &b.gaze, cfg.wing_w, cfg.wing_eps)?;
                    (g.clone(), Some(g), None)
                }
                HgdStage::Joint => {
                    let parts = implicit_loss(&out, &b, cfg.beta, cfg)?;
                    let head = if head_task { parts.head } else { None };
                    let total = if head_task { parts.total } else { parts.gaze.clone() };
                    (total, Some(parts.gaze), head)
                }
                HgdStage::Zones => {
                    let z = spec.zones_train.expect("zone labels");
                    let ids: Vec<u32> = idx.iter().map(|&i| z[i]).collect();
                    let target = Tensor::from_vec(ids, idx.len(), &device)?;
                    let ce = candle_nn::loss::cross_entropy(&out.gaze, &target)?;
                    let head = if head_task {
                        Some(nets::wing_loss(out.head.as_ref().expect("face head"), &b.head, cfg.wing_w, cfg.wing_eps)?)
                    } else {
                        None
                    };
                    let total = match &head {
                        Some(h) => (&ce + (h * cfg.beta)?)?,
                        None => ce.clone(),
                    };
                    (total, Some(ce), head)
                }
            };
            let lv = scalar(&loss)?;
            let gv = g.as_ref().map(scalar).transpose()?;
            let hv = h.as_ref().map(scalar).transpose()?;
            let mut comps = vec![("total", lv)];
            comps.extend(gv.map(|v| ("gaze", v)));
            comps.extend(hv.map(|v| ("head", v)));
            if let Some(err) = non_finite(spec.name, epoch, bi, &comps) {
                return Err(err);
            }
            opt.backward_step(&loss)?;
            let n = idx.len();
            total.add(lv, n);
            if let Some(v) = gv {
                gaze_l.add(v, n);
            }
            if let Some(v) = hv {
                head_l.add(v, n);
            }
            match spec.kind {
                HgdStage::Joint | HgdStage::GazeFrozenFace => {
                    let pred = pairs(&out.gaze.detach().flatten_all()?.to_vec1::<f32>()?);
                    let refs = pairs(&b.gaze.flatten_all()?.to_vec1::<f32>()?);
                    let k = pred.len();
                    aem.add(geometry::aem(&pred, &refs).map_err(|e| TrainError::Config(e.to_string()))?, k);
                    vem.add(geometry::mean_vem(&pred, &refs).map_err(|e| TrainError::Config(e.to_string()))?, k);
                }
                HgdStage::Zones => {
                    let z = spec.zones_train.expect("zone labels");
                    let ids = argmax_ids(&out.gaze.detach().flatten_all()?.to_vec1::<f32>()?, model.cfg.zones);
                    let hits = ids.iter().zip(&idx).filter(|(p, &i)| **p == z[i] as usize + 1).count();
                    acc.add(hits as f64 / n as f64, n);
                }
                HgdStage::HeadOnly => {}
            }
        }
        let mut rec = EpochRecord {
            epoch,
            stage: spec.name.to_string(),
            lr,
            train_loss: total.mean(),
            train_gaze_loss: (gaze_l.n > 0.0).then(|| gaze_l.mean()),
            train_head_loss: (head_l.n > 0.0).then(|| head_l.mean()),
            train_aem: (aem.n > 0.0).then(|| aem.mean()),
            train_vem: (vem.n > 0.0).then(|| vem.mean()),
            train_accuracy: (acc.n > 0.0).then(|| acc.mean()),
            ..EpochRecord::default()
        };
        let val_set = match (spec.kind, val) {
            (_, Some(v)) => Some(v),
            // Stage 1 convergence needs a held-out signal; fall back to train.
            (HgdStage::HeadOnly, None) => Some(train),
            _ => None,
        };
        if let Some(v) = val_set {
            let z = if spec.kind == HgdStage::Zones { Some(spec.zones_val.expect("zone labels")) } else { None };
            let mut m = hgd_val_metrics(model, v, cfg, z)?;
            if spec.kind == HgdStage::HeadOnly {
                m.gaze_loss = None;
                m.aem = None;
                m.vem = None;
            }
            fill_val(&mut rec, m);
        }
        rec.seconds = start.elapsed().as_secs_f64();
        let head_aem = rec.val_head_aem;
        let stop = reached_target(cfg, &rec);
        history.push(rec)?;
        if spec.kind == HgdStage::HeadOnly {
            let a = head_aem.expect("stage 1 records head AEM");
            if a < best_head - cfg.min_delta {
                best_head = a;
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= cfg.patience {
                converged = true;
                break;
            }
        }
        if stop {
            break;
        }
    }
    if spec.kind == HgdStage::HeadOnly && !converged {
        history.warnings.push(format!(
            "stage 1 reached its cap of {} epochs without a {}-epoch plateau (best head AEM {best_head:.3})",
            spec.epochs, cfg.patience
        ));
    }
    Ok(())
}

fn hgd_vars(model: &HgdModel, face: bool, gaze: bool) -> Vec<Var> {
    let mut v = Vec::new();
    if face {
        v.extend(nets::trainable_vars(&model.face_vars));
    }
    if gaze {
        v.extend(nets::trainable_vars(&model.gaze_vars));
    }
    v
}

fn check_prepared(model: &HgdModel, train: &Prepared, val: Option<&Prepared>) -> Result<()> {
    train.check_hgd(&model.cfg)?;
    if let Some(v) = val {
        v.check_hgd(&model.cfg)?;
    }
    Ok(())
}

/// Joint multi-task training: one update over both models per batch on
/// `gaze + beta * head` (gaze only when the head task is off).
pub fn train_implicit(model: &HgdModel, train: &Prepared, val: Option<&Prepared>, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    check_prepared(model, train, val)?;
    if model.cfg.output != OutputKind::Regression {
        return Err(TrainError::Config("use train_classifier for the zone classifier".into()));
    }
    let mut history = TrainHistory::default();
    let spec = StageSpec {
        name: "implicit",
        kind: HgdStage::Joint,
        vars: hgd_vars(model, true, true),
        epochs: cfg.epochs,
        zones_train: None,
        zones_val: None,
    };
    run_hgd_stage(model, train, val, cfg, spec, &mut history)?;
    Ok(history)
}

fn verify_frozen(part: &str, before: &std::collections::BTreeMap<String, Vec<f32>>, vars: &VarMap) -> Result<()> {
    let after = nets::snapshot(vars)?;
    for (name, v) in before {
        let same = after.get(name).is_some_and(|a| a.iter().zip(v).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same {
            return Err(TrainError::Freeze {
                part: part.to_string(),
                name: name.clone(),
            });
        }
    }
    Ok(())
}

/// Stage 1 trains the face model on head pose until a plateau; stage 2 trains
/// the gaze model on gaze loss through the frozen face features.
pub fn train_explicit(model: &HgdModel, train: &Prepared, val: Option<&Prepared>, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    check_prepared(model, train, val)?;
    if model.face.is_none() || model.cfg.output != OutputKind::Regression {
        return Err(TrainError::Config("explicit training needs the face model and a regression head".into()));
    }
    let mut history = TrainHistory::default();
    let head = StageSpec {
        name: "head",
        kind: HgdStage::HeadOnly,
        vars: hgd_vars(model, true, false),
        epochs: cfg.stage1_max_epochs,
        zones_train: None,
        zones_val: None,
    };
    run_hgd_stage(model, train, val, cfg, head, &mut history)?;
    let frozen = nets::snapshot(&model.face_vars)?;
    let gaze = StageSpec {
        name: "gaze",
        kind: HgdStage::GazeFrozenFace,
        vars: hgd_vars(model, false, true),
        epochs: cfg.epochs,
        zones_train: None,
        zones_val: None,
    };
    run_hgd_stage(model, train, val, cfg, gaze, &mut history)?;
    verify_frozen("face model", &frozen, &model.face_vars)?;
    Ok(history)
}

/// Zero-based zone labels for every unit plus the count of labels that fell
/// outside the grid.
pub fn zone_labels(data: &Prepared, grid: &ZoneGrid) -> Result<(Vec<u32>, usize)> {
    if data.gaze_width != 2 {
        return Err(TrainError::Config("zone labels need single-eye units".into()));
    }
    let mut outside = 0;
    let ids = (0..data.len())
        .map(|i| {
            let (z, out) = grid.zone(data.gaze_pairs(i)[0]);
            outside += out as usize;
            (z - 1) as u32
        })
        .collect();
    Ok((ids, outside))
}

/// Cross-entropy training of the zone-classifier HGD variant, with the head
/// task weighted by `beta` when enabled.
pub fn train_classifier(
    model: &HgdModel,
    train: &Prepared,
    val: Option<&Prepared>,
    cfg: &TrainConfig,
    grid: &ZoneGrid,
) -> Result<TrainHistory> {
    cfg.validate()?;
    grid.validate()?;
    check_prepared(model, train, val)?;
    if model.cfg.output != OutputKind::Classifier || model.cfg.zones != grid.zones() {
        return Err(TrainError::Config(format!(
            "model must be a {}-zone classifier",
            grid.zones()
        )));
    }
    let mut history = TrainHistory::default();
    let (zt, out_t) = zone_labels(train, grid)?;
    let zv = val.map(|v| zone_labels(v, grid)).transpose()?;
    let outside = out_t + zv.as_ref().map_or(0, |z| z.1);
    if outside > 0 {
        history
            .warnings
            .push(format!("{outside} gaze labels outside the zone grid were assigned to the nearest zone"));
    }
    let spec = StageSpec {
        name: "classifier",
        kind: HgdStage::Zones,
        vars: hgd_vars(model, true, true),
        epochs: cfg.epochs,
        zones_train: Some(&zt),
        zones_val: zv.as_ref().map(|z| z.0.as_slice()),
    };
    run_hgd_stage(model, train, val, cfg, spec, &mut history)?;
    Ok(history)
}

fn landmark_scale(cfg: &TrainConfig, device: &Device) -> Result<Tensor> {
    let (h, w) = cfg.landmark_crop;
    let s: Vec<f32> = (0..nets::LANDMARK_OUTPUTS).map(|i| if i % 2 == 0 { w as f32 } else { h as f32 }).collect();
    Ok(Tensor::from_vec(s, (1, nets::LANDMARK_OUTPUTS), device)?)
}

/// Mean Euclidean landmark error in pixels of the `landmark_crop` frame.
pub fn landmark_error_px(pred: &[f32], target: &[f32], crop: (usize, usize)) -> f64 {
    let (h, w) = (crop.0 as f64, crop.1 as f64);
    let errs: Vec<f64> = pred
        .chunks_exact(2)
        .zip(target.chunks_exact(2))
        .map(|(p, t)| (((p[0] - t[0]) as f64 * w).powi(2) + ((p[1] - t[1]) as f64 * h).powi(2)).sqrt())
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Eval-mode detector outputs `(coords, features)`, flattened in unit order.
pub fn detector_outputs(stack: &NoHpStack, data: &Prepared, batch_size: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let device = Device::Cpu;
    let (mut coords, mut feats) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, &device)?;
        let (c, f) = stack.detector.forward(&b.eye, false)?;
        coords.extend(c.flatten_all()?.to_vec1::<f32>()?);
        feats.extend(f.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok((coords, feats))
}

/// Eval-mode noHP gaze predictions (degrees), flattened in unit order.
pub fn predict_nohp(stack: &NoHpStack, data: &Prepared, batch_size: usize) -> Result<Vec<f32>> {
    let device = Device::Cpu;
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, &device)?;
        out.extend(stack.predict(&b.eye)?.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(out)
}

fn check_nohp_data(stack: &NoHpStack, data: &Prepared, what: &str) -> Result<()> {
    if data.gaze_width != 2 || data.face_shape.is_some() {
        return Err(TrainError::Config(format!("{what}: noHP takes single-eye inputs without faces")));
    }
    if data.eye_shape != stack.cfg.detector.input {
        return Err(TrainError::Config(format!(
            "{what}: detector expects {:?}, data has {:?}",
            stack.cfg.detector.input, data.eye_shape
        )));
    }
    Ok(())
}

fn aem_of(pred: &[f32], target: &[f32]) -> Result<f64> {
    geometry::aem(&pairs(pred), &pairs(target)).map_err(|e| TrainError::Config(e.to_string()))
}

/// Feature-level training set for the MLP stages.
struct FeatureSet {
    x: Vec<f32>,
    width: usize,
    gaze: Vec<f32>,
    head: Vec<f32>,
}

impl FeatureSet {
    fn len(&self) -> usize {
        self.gaze.len() / 2
    }

    fn rows(&self, idx: &[usize], device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
        let b = idx.len();
        Ok((
            Tensor::from_vec(gather(&self.x, self.width, idx), (b, self.width), device)?,
            Tensor::from_vec(gather(&self.gaze, 2, idx), (b, 2), device)?,
            Tensor::from_vec(gather(&self.head, 2, idx), (b, 2), device)?,
        ))
    }

    fn all(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.x.clone(), (self.len(), self.width), device)?)
    }
}

fn concat_set(stack: &NoHpStack, data: &Prepared, batch_size: usize) -> Result<FeatureSet> {
    let device = Device::Cpu;
    let mut x = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, &device)?;
        x.extend(stack.concat_features(&b.eye)?.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(FeatureSet {
        x,
        width: nets::FINAL_INPUT,
        gaze: data.gaze.clone(),
        head: data.head.clone(),
    })
}

/// Staged noHP training. A: landmark detector on synthetic eyes (wing loss on
/// pixel-scaled coordinates). B: detector frozen, gaze and head modules on
/// synthetic labels from the detector feature. C: on target data, the final
/// model on the 600-unit concatenation. Target head labels are never read.
pub fn train_nohp(
    stack: &NoHpStack,
    synth_train: &Prepared,
    synth_val: Option<&Prepared>,
    target_train: &Prepared,
    target_val: Option<&Prepared>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    for (d, what) in [(Some(synth_train), "synthetic train"), (synth_val, "synthetic val"), (Some(target_train), "target train"), (target_val, "target val")] {
        if let Some(d) = d {
            check_nohp_data(stack, d, what)?;
        }
    }
    if synth_train.landmarks.is_none() || synth_val.is_some_and(|v| v.landmarks.is_none()) {
        return Err(TrainError::MissingLabels("synthetic data lacks eye landmarks".into()));
    }
    let device = Device::Cpu;
    let mut history = TrainHistory::default();
    let scale = landmark_scale(cfg, &device)?;

    // Stage A.
    let mut opt = optimizer(nets::trainable_vars(&stack.detector_vars), cfg.lr)?;
    for e in 0..cfg.landmark_epochs.unwrap_or(cfg.epochs) {
        let start = Instant::now();
        let lr = cfg.lr_at(e);
        opt.set_learning_rate(lr);
        let epoch = history.next_epoch();
        let mut total = Running::default();
        for (bi, idx) in crate::dataset::batch_iter(synth_train.len(), cfg.batch_size, stage_seed(cfg.seed, "landmarks", e))?
            .into_iter()
            .enumerate()
        {
            let b = synth_train.batch(&idx, &device)?;
            let (coords, _) = stack.detector.forward(&b.eye, true)?;
            let target = b.landmarks.as_ref().expect("checked above");
            let loss = nets::wing_loss(&coords.broadcast_mul(&scale)?, &target.broadcast_mul(&scale)?, cfg.wing_w, cfg.wing_eps)?;
            let lv = scalar(&loss)?;
            if let Some(err) = non_finite("landmarks", epoch, bi, &[("landmark", lv)]) {
                return Err(err);
            }
            opt.backward_step(&loss)?;
            total.add(lv, idx.len());
        }
        let mut rec = EpochRecord {
            epoch,
            stage: "landmarks".into(),
            lr,
            train_loss: total.mean(),
            train_landmark_loss: Some(total.mean()),
            ..EpochRecord::default()
        };
        if let Some(v) = synth_val {
            let (coords, _) = detector_outputs(stack, v, cfg.batch_size)?;
            rec.val_landmark_px = Some(landmark_error_px(&coords, v.landmarks.as_ref().expect("checked"), cfg.landmark_crop));
        }
        rec.seconds = start.elapsed().as_secs_f64();
        history.push(rec)?;
    }

    // Stage B on cached detector features.
    let frozen_detector = nets::snapshot(&stack.detector_vars)?;
    let feature_set = |d: &Prepared| -> Result<FeatureSet> {
        Ok(FeatureSet {
            x: detector_outputs(stack, d, cfg.batch_size)?.1,
            width: nets::LANDMARK_FEATURE,
            gaze: d.gaze.clone(),
            head: d.head.clone(),
        })
    };
    let ftrain = feature_set(synth_train)?;
    let fval = synth_val.map(feature_set).transpose()?;
    let mut vars = nets::trainable_vars(&stack.gaze_module_vars);
    vars.extend(nets::trainable_vars(&stack.head_module_vars));
    let mut opt = optimizer(vars, cfg.lr)?;
    for e in 0..cfg.module_epochs.unwrap_or(cfg.epochs) {
        let start = Instant::now();
        let lr = cfg.lr_at(e);
        opt.set_learning_rate(lr);
        let epoch = history.next_epoch();
        let (mut total, mut gl, mut hl, mut aem) = (Running::default(), Running::default(), Running::default(), Running::default());
        for (bi, idx) in crate::dataset::batch_iter(ftrain.len(), cfg.batch_size, stage_seed(cfg.seed, "modules", e))?
            .into_iter()
            .enumerate()
        {
            let (x, g, h) = ftrain.rows(&idx, &device)?;
            let (gp, _) = stack.gaze_module.forward(&x)?;
            let (hp, _) = stack.head_module.forward(&x)?;
            let g_loss = nets::wing_loss(&gp, &g, cfg.wing_w, cfg.wing_eps)?;
            let h_loss = nets::wing_loss(&hp, &h, cfg.wing_w, cfg.wing_eps)?;
            let loss = (&g_loss + &h_loss)?;
            let (lv, gv, hv) = (scalar(&loss)?, scalar(&g_loss)?, scalar(&h_loss)?);
            if let Some(err) = non_finite("modules", epoch, bi, &[("total", lv), ("gaze", gv), ("head", hv)]) {
                return Err(err);
            }
            opt.backward_step(&loss)?;
            let n = idx.len();
            total.add(lv, n);
            gl.add(gv, n);
            hl.add(hv, n);
            aem.add(aem_of(&gp.flatten_all()?.to_vec1::<f32>()?, &g.flatten_all()?.to_vec1::<f32>()?)?, n);
        }
        let mut rec = EpochRecord {
            epoch,
            stage: "modules".into(),
            lr,
            train_loss: total.mean(),
            train_gaze_loss: Some(gl.mean()),
            train_head_loss: Some(hl.mean()),
            train_aem: Some(aem.mean()),
            ..EpochRecord::default()
        };
        if let Some(v) = &fval {
            let x = v.all(&device)?;
            let gp = stack.gaze_module.forward(&x)?.0.flatten_all()?.to_vec1::<f32>()?;
            let hp = stack.head_module.forward(&x)?.0.flatten_all()?.to_vec1::<f32>()?;
            rec.val_gaze_loss = Some(wing_mean(&gp, &v.gaze, cfg));
            rec.val_head_loss = Some(wing_mean(&hp, &v.head, cfg));
            rec.val_aem = Some(aem_of(&gp, &v.gaze)?);
            rec.val_head_aem = Some(aem_of(&hp, &v.head)?);
        }
        rec.seconds = start.elapsed().as_secs_f64();
        history.push(rec)?;
    }
    verify_frozen("landmark detector", &frozen_detector, &stack.detector_vars)?;

    // Stage C on cached concatenations of the target data.
    let frozen_gaze = nets::snapshot(&stack.gaze_module_vars)?;
    let frozen_head = nets::snapshot(&stack.head_module_vars)?;
    let ctrain = concat_set(stack, target_train, cfg.batch_size)?;
    let cval = target_val.map(|v| concat_set(stack, v, cfg.batch_size)).transpose()?;
    let baseline_set = cval.as_ref().unwrap_or(&ctrain);
    let final_aem = |s: &FeatureSet| -> Result<f64> {
        let p = stack.final_model.forward(&s.all(&device)?)?.flatten_all()?.to_vec1::<f32>()?;
        aem_of(&p, &s.gaze)
    };
    history.baseline_aem = Some(final_aem(baseline_set)?);
    let mut opt = optimizer(nets::trainable_vars(&stack.final_vars), cfg.lr)?;
    for e in 0..cfg.final_epochs.unwrap_or(cfg.epochs) {
        let start = Instant::now();
        let lr = cfg.lr_at(e);
        opt.set_learning_rate(lr);
        let epoch = history.next_epoch();
        let (mut total, mut aem) = (Running::default(), Running::default());
        for (bi, idx) in crate::dataset::batch_iter(ctrain.len(), cfg.batch_size, stage_seed(cfg.seed, "final", e))?
            .into_iter()
            .enumerate()
        {
            let (x, g, _) = ctrain.rows(&idx, &device)?;
            let p = stack.final_model.forward(&x)?;
            let loss = nets::wing_loss(&p, &g, cfg.wing_w, cfg.wing_eps)?;
            let lv = scalar(&loss)?;
            if let Some(err) = non_finite("final", epoch, bi, &[("gaze", lv)]) {
                return Err(err);
            }
            opt.backward_step(&loss)?;
            total.add(lv, idx.len());
            aem.add(aem_of(&p.flatten_all()?.to_vec1::<f32>()?, &g.flatten_all()?.to_vec1::<f32>()?)?, idx.len());
        }
        let mut rec = EpochRecord {
            epoch,
            stage: "final".into(),
            lr,
            train_loss: total.mean(),
            train_gaze_loss: Some(total.mean()),
            train_aem: Some(aem.mean()),
            ..EpochRecord::default()
        };
        if let Some(v) = &cval {
            let p = stack.final_model.forward(&v.all(&device)?)?.flatten_all()?.to_vec1::<f32>()?;
            rec.val_gaze_loss = Some(wing_mean(&p, &v.gaze, cfg));
            rec.val_aem = Some(aem_of(&p, &v.gaze)?);
            rec.val_vem = Some(geometry::mean_vem(&pairs(&p), &pairs(&v.gaze)).map_err(|e| TrainError::Config(e.to_string()))?);
        }
        rec.seconds = start.elapsed().as_secs_f64();
        let stop = reached_target(cfg, &rec);
        history.push(rec)?;
        if stop {
            break;
        }
    }
    verify_frozen("landmark detector", &frozen_detector, &stack.detector_vars)?;
    verify_frozen("gaze module", &frozen_gaze, &stack.gaze_module_vars)?;
    verify_frozen("head module", &frozen_head, &stack.head_module_vars)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zone_grid_row_major_from_top_left() {
        let g = ZoneGrid::default();
        assert_eq!(g.zone(AnglePair::new(-50.0, 25.0)), (1, false));
        assert_eq!(g.zone(AnglePair::new(0.0, 25.0)), (2, false));
        assert_eq!(g.zone(AnglePair::new(50.0, 25.0)), (3, false));
        assert_eq!(g.zone(AnglePair::new(0.0, 0.0)), (5, false));
        assert_eq!(g.zone(AnglePair::new(50.0, -25.0)), (9, false));
        // Closed at the outer edges, clamped beyond them.
        assert_eq!(g.zone(AnglePair::new(60.0, -30.0)), (9, false));
        assert_eq!(g.zone(AnglePair::new(80.0, -40.0)), (9, true));
        assert_eq!(g.zone(AnglePair::new(-80.0, 0.0)), (4, true));
    }

    #[test]
    fn lr_schedule_steps_every_decay_period() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(29), 1e-4);
        assert_eq!(c.lr_at(30), 1e-4 * 0.1);
        assert_eq!(c.lr_at(95), 1e-4 * 0.1f64.powi(3));
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let tmp = tempfile::tempdir().unwrap();
        let mut h = TrainHistory::default();
        for (i, stage) in ["head", "head", "gaze"].iter().enumerate() {
            h.push(EpochRecord {
                epoch: i,
                stage: stage.to_string(),
                lr: 1e-4,
                train_loss: 0.1 * i as f64,
                val_head_aem: Some(1.5),
                ..EpochRecord::default()
            })
            .unwrap();
        }
        h.warnings.push("capped".into());
        h.baseline_aem = Some(12.5);
        let p = tmp.path().join("h.jsonl");
        h.save(&p).unwrap();
        assert_eq!(TrainHistory::load(&p).unwrap(), h);
        assert_eq!(h.stage_boundaries(), vec![2]);
    }

    #[test]
    fn non_finite_record_rejected() {
        let mut h = TrainHistory::default();
        let rec = EpochRecord {
            stage: "x".into(),
            train_loss: f64::NAN,
            ..EpochRecord::default()
        };
        assert!(matches!(h.push(rec), Err(TrainError::NonFinite { .. })));
    }
}
