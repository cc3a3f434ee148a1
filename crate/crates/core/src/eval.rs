//! Evaluation harness: AEM/VEM tables per split, subject and eye, and zone
//! confusion matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Merge, SampleSet, Side};
use crate::geometry::{self, AnglePair};
use crate::nets::{HgdModel, NoHpStack, OutputKind};
use crate::preprocess::{HogConfig, LdaTransform};
use crate::train::{self, PrepConfig, Prepared, TrainError, ZoneGrid};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("zone id {id} outside 1..={k}")]
    ZoneOutOfRange { id: usize, k: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One evaluated angle pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub subject: String,
    pub eye: Side,
    pub pred: AnglePair,
    pub label: AnglePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub aem: f64,
    pub vem: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub k: usize,
    /// `counts[true - 1][pred - 1]`.
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized counts; rows without support are left at zero.
    pub rows: Vec<Vec<f64>>,
    /// 1-based ids of true zones that never occur.
    pub zero_support: Vec<usize>,
}

impl Confusion {
    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().flatten().sum();
        let diag: u64 = (0..self.k).map(|i| self.counts[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

/// Row `i` is the distribution of predictions given true zone `i + 1`.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(EvalError::Mismatch(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        for id in [p, l] {
            if id == 0 || id > k {
                return Err(EvalError::ZoneOutOfRange { id, k });
            }
        }
        counts[l - 1][p - 1] += 1;
    }
    let mut zero_support = Vec::new();
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                zero_support.push(i + 1);
                vec![0.0; k]
            } else {
                row.iter().map(|&c| c as f64 / n as f64).collect()
            }
        })
        .collect();
    Ok(Confusion {
        k,
        counts,
        rows,
        zero_support,
    })
}

pub const METRICS_FORMAT: &str = "headgaze-metrics";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub samples: usize,
    /// Evaluated angle pairs (both eyes count for dual strategies and SEM).
    pub pairs: usize,
    pub aem: f64,
    pub vem: f64,
    pub head_aem: Option<f64>,
    pub per_eye: BTreeMap<String, ErrorStats>,
    pub per_subject: BTreeMap<String, ErrorStats>,
    pub confusion: Option<Confusion>,
    pub accuracy: Option<f64>,
    pub config_hash: String,
}

impl MetricsReport {
    fn empty(split: &str, samples: usize, config_hash: &str) -> Self {
        Self {
            format: METRICS_FORMAT.into(),
            version: 1,
            split: split.into(),
            samples,
            pairs: 0,
            aem: 0.0,
            vem: 0.0,
            head_aem: None,
            per_eye: BTreeMap::new(),
            per_subject: BTreeMap::new(),
            confusion: None,
            accuracy: None,
            config_hash: config_hash.into(),
        }
    }
}

pub fn config_hash(config_json: &str) -> String {
    hex::encode(Sha256::digest(config_json.as_bytes()))
}

fn eye_name(s: Side) -> &'static str {
    match s {
        Side::Left => "left",
        Side::Right => "right",
    }
}

fn stats(entries: &[&EvalEntry]) -> ErrorStats {
    let preds: Vec<AnglePair> = entries.iter().map(|e| e.pred).collect();
    let refs: Vec<AnglePair> = entries.iter().map(|e| e.label).collect();
    ErrorStats {
        aem: geometry::aem(&preds, &refs).unwrap_or(f64::NAN),
        vem: geometry::mean_vem(&preds, &refs).unwrap_or(f64::NAN),
        count: entries.len(),
    }
}

fn sort_key(e: &EvalEntry) -> (String, u8, [u64; 4]) {
    (
        e.subject.clone(),
        e.eye as u8,
        [e.label.yaw.to_bits(), e.label.pitch.to_bits(), e.pred.yaw.to_bits(), e.pred.pitch.to_bits()],
    )
}

/// AEM over all pairs, VEM as the mean per-pair arc, plus per-eye and
/// per-subject breakdowns. Entries are put in a canonical order first so the
/// result does not depend on sample order.
pub fn evaluate_entries(entries: &[EvalEntry], split: &str, samples: usize, config_hash: &str) -> Result<MetricsReport> {
    if entries.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted: Vec<&EvalEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| sort_key(e));
    let all = stats(&sorted);
    let mut report = MetricsReport::empty(split, samples, config_hash);
    report.pairs = all.count;
    report.aem = all.aem;
    report.vem = all.vem;
    for side in Side::BOTH {
        let part: Vec<&EvalEntry> = sorted.iter().copied().filter(|e| e.eye == side).collect();
        if !part.is_empty() {
            report.per_eye.insert(eye_name(side).into(), stats(&part));
        }
    }
    let mut by_subject: BTreeMap<&str, Vec<&EvalEntry>> = BTreeMap::new();
    for e in &sorted {
        by_subject.entry(e.subject.as_str()).or_default().push(e);
    }
    for (s, part) in by_subject {
        report.per_subject.insert(s.to_string(), stats(&part));
    }
    Ok(report)
}

/// Per-eye entries of regression outputs over prepared units.
pub fn entries_from(data: &Prepared, gaze: &[f32]) -> Vec<EvalEntry> {
    let w = data.gaze_width;
    let mut out = Vec::with_capacity(data.len() * w / 2);
    for (i, (_, merge)) in data.units.iter().enumerate() {
        let preds = train::pairs(&gaze[i * w..(i + 1) * w]);
        let labels = data.gaze_pairs(i);
        let sides: Vec<Side> = match merge {
            Merge::Single(s) => vec![*s],
            _ => Side::BOTH.to_vec(),
        };
        for ((side, pred), label) in sides.into_iter().zip(preds).zip(labels) {
            out.push(EvalEntry {
                subject: data.subjects[i].clone(),
                eye: side,
                pred,
                label,
            });
        }
    }
    out
}

fn head_aem(data: &Prepared, head: &[f32]) -> Result<f64> {
    geometry::aem(&train::pairs(head), &data.head_pairs()).map_err(|e| EvalError::Mismatch(e.to_string()))
}

fn split_name(set: &SampleSet) -> String {
    set.split.clone().unwrap_or_else(|| "all".into())
}

/// Confusion of zones obtained by binning predicted and labelled angles.
pub fn angle_confusion(entries: &[EvalEntry], grid: &ZoneGrid) -> Result<Confusion> {
    let preds: Vec<usize> = entries.iter().map(|e| grid.zone(e.pred).0).collect();
    let labels: Vec<usize> = entries.iter().map(|e| grid.zone(e.label).0).collect();
    confusion(&preds, &labels, grid.zones())
}

/// Evaluates an HGD model on a sample set. With a grid, regression outputs
/// are also binned into zones for a confusion matrix; classifiers need one.
pub fn evaluate_hgd(
    model: &HgdModel,
    set: &SampleSet,
    hog: &HogConfig,
    lda: Option<&LdaTransform>,
    grid: Option<&ZoneGrid>,
    config_hash: &str,
) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut data = Prepared::new(set, &PrepConfig::for_hgd(&model.cfg, hog)?)?;
    if let Some(l) = lda {
        data.apply_lda(l)?;
    }
    data.check_hgd(&model.cfg)?;
    let p = train::predict_hgd(model, &data, 64)?;
    let mut report = match model.cfg.output {
        OutputKind::Regression => {
            let entries = entries_from(&data, &p.gaze);
            let mut r = evaluate_entries(&entries, &split_name(set), set.len(), config_hash)?;
            if let Some(g) = grid {
                let c = angle_confusion(&entries, g)?;
                r.accuracy = Some(c.accuracy());
                r.confusion = Some(c);
            }
            r
        }
        OutputKind::Classifier => {
            let grid = grid.ok_or_else(|| EvalError::Mismatch("classifier evaluation needs a zone grid".into()))?;
            let (labels, _) = train::zone_labels(&data, grid)?;
            let labels: Vec<usize> = labels.into_iter().map(|z| z as usize + 1).collect();
            let preds = train::argmax_ids(&p.gaze, p.width);
            let c = confusion(&preds, &labels, grid.zones())?;
            let mut r = MetricsReport::empty(&split_name(set), set.len(), config_hash);
            r.accuracy = Some(c.accuracy());
            r.confusion = Some(c);
            r
        }
    };
    if let Some(h) = &p.head {
        report.head_aem = Some(head_aem(&data, h)?);
    }
    Ok(report)
}

/// Evaluates the noHP stack's final gaze model on a sample set.
pub fn evaluate_nohp(stack: &NoHpStack, set: &SampleSet, hog: &HogConfig, grid: Option<&ZoneGrid>, config_hash: &str) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(EvalError::Empty);
    }
    let data = Prepared::new(set, &PrepConfig::for_nohp(stack, hog))?;
    let gaze = train::predict_nohp(stack, &data, 64)?;
    let entries = entries_from(&data, &gaze);
    let mut r = evaluate_entries(&entries, &split_name(set), set.len(), config_hash)?;
    if let Some(g) = grid {
        let c = angle_confusion(&entries, g)?;
        r.accuracy = Some(c.accuracy());
        r.confusion = Some(c);
    }
    Ok(r)
}
