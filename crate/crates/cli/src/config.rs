//! Flat run configuration: a TOML file of `key = value` pairs plus
//! `--set key=value` overrides. Unknown keys are rejected in both.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use headgaze::nets::{BackboneConfig, HgdConfig, NoHpConfig, OutputKind, Pool, Stem};
use headgaze::preprocess::HogConfig;
use headgaze::synth::{GenerateConfig, Range, SceneRanges};
use headgaze::train::{TrainConfig, ZoneGrid};
use headgaze::EyeStrategy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Generation.
    pub gen_eye_size: [usize; 2],
    pub gen_face_size: [usize; 2],
    pub subjects: usize,
    pub train_fraction: f64,
    pub head_range: f64,
    pub eye_range: f64,
    pub crop_jitter: f64,

    // Model.
    pub depth: usize,
    pub base_width: usize,
    pub stem: Stem,
    pub stem_stride: usize,
    pub pool: Pool,
    pub face_input: [usize; 2],
    pub eye_input: [usize; 2],
    pub strategy: EyeStrategy,
    pub use_face_model: bool,
    pub use_head_task: bool,
    pub mhog: bool,
    pub hog_cells: Vec<usize>,
    pub hog_bins: usize,
    pub lda: bool,
    pub lda_bin_width: f64,

    // noHP detector.
    pub detector_depth: usize,
    pub detector_base_width: usize,
    pub detector_stem: Stem,
    pub detector_stem_stride: usize,
    pub detector_pool: Pool,
    pub detector_input: [usize; 2],

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub beta: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub stage1_max_epochs: usize,
    /// 0 means `epochs`.
    pub landmark_epochs: usize,
    pub module_epochs: usize,
    pub final_epochs: usize,
    pub landmark_crop: [usize; 2],

    // Zones.
    pub zone_rows: usize,
    pub zone_cols: usize,
    pub zone_yaw: [f64; 2],
    pub zone_pitch: [f64; 2],
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenerateConfig::default();
        let m = HgdConfig::default();
        let t = TrainConfig::default();
        let h = HogConfig::default();
        let z = ZoneGrid::default();
        Self {
            seed: 0,
            gen_eye_size: [g.eye_size.0, g.eye_size.1],
            gen_face_size: [g.face_size.0, g.face_size.1],
            subjects: g.subjects,
            train_fraction: g.train_fraction,
            head_range: g.ranges.head_yaw.max,
            eye_range: g.ranges.eye_yaw_limit,
            crop_jitter: g.ranges.crop_jitter,
            depth: m.depth,
            base_width: m.base_width,
            stem: m.stem,
            stem_stride: m.stem_stride,
            pool: m.pool,
            face_input: [m.face_size.0, m.face_size.1],
            eye_input: [m.eye_size.0, m.eye_size.1],
            strategy: m.strategy,
            use_face_model: m.use_face_model,
            use_head_task: m.use_head_task,
            mhog: false,
            hog_cells: h.cell_sizes,
            hog_bins: h.bins,
            lda: false,
            lda_bin_width: 5.0,
            detector_depth: 18,
            detector_base_width: 16,
            detector_stem: Stem::Compact,
            detector_stem_stride: 2,
            detector_pool: Pool::Flatten,
            detector_input: [64, 96],
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            decay_every: t.decay_every,
            beta: t.beta,
            patience: t.patience,
            min_delta: t.min_delta,
            stage1_max_epochs: t.stage1_max_epochs,
            landmark_epochs: 0,
            module_epochs: 0,
            final_epochs: 0,
            landmark_crop: [t.landmark_crop.0, t.landmark_crop.1],
            zone_rows: z.rows,
            zone_cols: z.cols,
            zone_yaw: [z.yaw.0, z.yaw.1],
            zone_pitch: [z.pitch.0, z.pitch.1],
        }
    }
}

/// A config plus the keys that were set explicitly (file or override).
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    // `key = <raw>` parses any TOML literal; anything else is a bare string.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Reads the optional file, applies `key=value` overrides in order and
/// validates the result.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Loaded> {
    let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let known: BTreeSet<String> = table.keys().cloned().collect();
    let mut explicit = BTreeSet::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let given: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for (k, v) in given {
            if !known.contains(&k) {
                bail!("unknown config key `{k}` in {}", path.display());
            }
            explicit.insert(k.clone());
            table.insert(k, v);
        }
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override `{o}` is not of the form key=value");
        };
        let k = k.trim();
        if !known.contains(k) {
            bail!("unknown config key `{k}`");
        }
        explicit.insert(k.to_string());
        table.insert(k.to_string(), parse_value(v.trim()));
    }
    let config: RunConfig = table.try_into().context("invalid config value")?;
    config.validate()?;
    Ok(Loaded { config, explicit })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hog_cells.is_empty() {
            bail!("hog_cells must not be empty");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            seed: self.seed,
            ranges: SceneRanges {
                head_yaw: Range::symmetric(self.head_range),
                head_pitch: Range::symmetric(self.head_range),
                eye_yaw_limit: self.eye_range,
                eye_pitch_limit: self.eye_range,
                crop_jitter: self.crop_jitter,
                ..SceneRanges::default()
            },
            eye_size: (self.gen_eye_size[0], self.gen_eye_size[1]),
            face_size: (self.gen_face_size[0], self.gen_face_size[1]),
            train_fraction: self.train_fraction,
            subjects: self.subjects,
        }
    }

    pub fn hog(&self) -> HogConfig {
        HogConfig {
            cell_sizes: self.hog_cells.clone(),
            bins: self.hog_bins,
            ..HogConfig::default()
        }
    }

    /// HGD config; `lda_dim` is filled in once the LDA has been fitted.
    pub fn hgd_config(&self, classifier: bool, lda_dim: usize) -> HgdConfig {
        HgdConfig {
            depth: self.depth,
            base_width: self.base_width,
            stem: self.stem,
            stem_stride: self.stem_stride,
            pool: self.pool,
            face_size: (self.face_input[0], self.face_input[1]),
            eye_size: (self.eye_input[0], self.eye_input[1]),
            strategy: self.strategy,
            use_face_model: self.use_face_model,
            use_head_task: self.use_head_task,
            mhog_levels: if self.mhog { self.hog_cells.len() } else { 0 },
            lda_dim,
            output: if classifier { OutputKind::Classifier } else { OutputKind::Regression },
            zones: self.zone_rows * self.zone_cols,
        }
    }

    pub fn nohp_config(&self) -> NoHpConfig {
        let channels = 1 + if self.mhog { self.hog_cells.len() } else { 0 };
        NoHpConfig {
            detector: BackboneConfig {
                depth: self.detector_depth,
                base_width: self.detector_base_width,
                stem: self.detector_stem,
                stem_stride: self.detector_stem_stride,
                pool: self.detector_pool,
                input: (channels, self.detector_input[0], self.detector_input[1]),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let nz = |v: usize| (v > 0).then_some(v);
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            beta: self.beta,
            seed: self.seed,
            patience: self.patience,
            min_delta: self.min_delta,
            stage1_max_epochs: self.stage1_max_epochs,
            landmark_epochs: nz(self.landmark_epochs),
            module_epochs: nz(self.module_epochs),
            final_epochs: nz(self.final_epochs),
            landmark_crop: (self.landmark_crop[0], self.landmark_crop[1]),
            ..TrainConfig::default()
        }
    }

    pub fn zone_grid(&self) -> ZoneGrid {
        ZoneGrid {
            rows: self.zone_rows,
            cols: self.zone_cols,
            yaw: (self.zone_yaw[0], self.zone_yaw[1]),
            pitch: (self.zone_pitch[0], self.zone_pitch[1]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let l = load(None, &["beta=0.5".into(), "strategy=bec".into(), "eye_input=[32, 48]".into()]).unwrap();
        assert_eq!(l.config.beta, 0.5);
        assert_eq!(l.config.strategy, EyeStrategy::Bec);
        assert_eq!(l.config.eye_input, [32, 48]);
        assert!(l.explicit.contains("beta"));
        assert!(load(None, &["nope=1".into()]).is_err());
        assert!(load(None, &["beta=-1".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
