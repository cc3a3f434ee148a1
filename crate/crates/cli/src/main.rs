mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use headgaze::dataset::{load_manifest, SampleSet};
use headgaze::nets::{self, HgdModel, NoHpStack};
use headgaze::preprocess::LdaTransform;
use headgaze::train::{self, PrepConfig, Prepared, TrainHistory};
use headgaze::{eval, report, synth, Device, EyeStrategy};
use serde::{Deserialize, Serialize};

use config::RunConfig;

const RUN_ECHO: &str = "run.toml";
const HISTORY: &str = "history.jsonl";
const CHECKPOINT: &str = "model.safetensors";
const LDA_FILE: &str = "lda.bin";
const METRICS: &str = "metrics.json";

/// Raised for invalid invocations; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "headgaze", version, about = "Head-pose-aware gaze estimation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory. Defaults to `<HEADGAZE_OUT_ROOT>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "HEADGAZE_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; same as `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Regime {
    Implicit,
    Explicit,
    Nohp,
    Classifier,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[arg(long, value_enum, default_value = "implicit")]
        regime: Regime,
        /// Manifest (or dataset directory) for the HGD regimes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation manifest; defaults to the `test` split of `--data`.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Synthetic dataset for noHP stages A and B.
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Target dataset for noHP stage C.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Head-loss weakening factor; same as `--set beta=B`.
        #[arg(long)]
        beta: Option<f64>,
        /// Same as `--set epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split tag to evaluate, or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Add a zone confusion matrix.
        #[arg(long)]
        classify: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Render plots and a summary from a run directory.
    Report {
        /// Directory holding `history.jsonl` and/or `metrics.json`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Metrics file; defaults to `<run>/metrics.json` when present.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Manifest for the head-gaze scatter.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, common } => cmd_generate(n, &common),
        Command::Train {
            regime,
            data,
            val,
            synth,
            target,
            beta,
            epochs,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(b) = beta {
                extra.push(format!("beta={b}"));
            }
            if let Some(e) = epochs {
                extra.push(format!("epochs={e}"));
            }
            cmd_train(regime, data, val, synth, target, &extra, &common)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            classify,
            common,
        } => cmd_eval(&checkpoint, &data, &split, classify, &common),
        Command::Report {
            run,
            metrics,
            data,
            common,
        } => cmd_report(run, metrics, data, &common),
    }
}

fn load_config(common: &Common, extra: &[String]) -> Result<config::Loaded> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    config::load(common.config.as_deref(), &overrides).map_err(|e| Usage(format!("{e:#}")).into())
}

/// Resolves and prepares the output directory.
fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| common.out_root.join(command));
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !common.force {
            return usage(format!("output directory {} is not empty (use --force)", dir.display()));
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_echo(dir: &Path, cfg: &RunConfig, header: &str) -> Result<()> {
    let p = dir.join(RUN_ECHO);
    fs::write(&p, format!("# {header}\n{}", cfg.to_toml())).with_context(|| format!("writing {}", p.display()))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(synth::MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn load_set(p: &Path) -> Result<SampleSet> {
    let m = manifest_path(p);
    load_manifest(&m).with_context(|| format!("loading {}", m.display()))
}

/// The `train` split if the manifest is tagged, otherwise everything; the
/// validation side is `--val` or the `test` split when present.
fn train_val(data: &Path, val: Option<&Path>) -> Result<(SampleSet, Option<SampleSet>)> {
    let set = load_set(data)?;
    let tagged = set.with_split("train");
    let train = if tagged.is_empty() { set.clone() } else { tagged };
    let val = match val {
        Some(v) => Some(load_set(v)?),
        None => Some(set.with_split("test")).filter(|s| !s.is_empty()),
    };
    if train.is_empty() {
        bail!("{} has no training samples", data.display());
    }
    Ok((train, val))
}

fn cmd_generate(n: usize, common: &Common) -> Result<()> {
    if n == 0 {
        return usage("--n must be at least 1");
    }
    let loaded = load_config(common, &[])?;
    let dir = out_dir(common, "generate")?;
    let gen = loaded.config.generate_config();
    let manifest = synth::generate_dataset(n, &gen, &dir, None)?;
    write_echo(&dir, &loaded.config, &format!("generate --n {n}"))?;
    let set = load_manifest(&manifest)?;
    if set.len() != n {
        bail!("manifest holds {} records, expected {n}", set.len());
    }
    println!("{}", manifest.display());
    Ok(())
}

/// Stored in the checkpoint sidecar so `eval` can rebuild the model.
#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    regime: Regime,
    lda_dim: usize,
    config: RunConfig,
}

fn check_combination(regime: Regime, loaded: &config::Loaded, has_data: bool, has_nohp_data: bool) -> Result<()> {
    let c = &loaded.config;
    match regime {
        Regime::Nohp => {
            if c.strategy != EyeStrategy::Sem {
                return usage("the nohp regime takes single eyes; use strategy=sem");
            }
            if loaded.explicit.contains("use_face_model") && c.use_face_model {
                return usage("the nohp regime has no face inputs");
            }
            if c.lda {
                return usage("the nohp regime does not use the LDA vector");
            }
            if !has_nohp_data || has_data {
                return usage("the nohp regime needs --synth and --target (not --data)");
            }
        }
        _ => {
            if has_nohp_data {
                return usage("--synth/--target only apply to the nohp regime");
            }
            if !has_data {
                return usage("--data is required");
            }
            if regime == Regime::Explicit && !c.use_face_model {
                return usage("the explicit regime needs the face model");
            }
            if regime == Regime::Classifier && c.strategy.is_dual() {
                return usage("the classifier predicts one zone per eye; use strategy=sem");
            }
            if c.use_head_task && !c.use_face_model {
                return usage("use_head_task needs use_face_model");
            }
        }
    }
    Ok(())
}

fn cmd_train(
    regime: Regime,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    synth_dir: Option<PathBuf>,
    target: Option<PathBuf>,
    extra: &[String],
    common: &Common,
) -> Result<()> {
    let loaded = load_config(common, extra)?;
    check_combination(regime, &loaded, data.is_some(), synth_dir.is_some() && target.is_some())?;
    let cfg = loaded.config.clone();
    let tc = cfg.train_config();
    let hog = cfg.hog();
    let dir = out_dir(common, "train")?;
    write_echo(&dir, &cfg, "train")?;
    let device = Device::Cpu;

    let (history, parts_owner, lda_dim) = if regime == Regime::Nohp {
        let (s_train, s_val) = train_val(synth_dir.as_deref().expect("checked"), None)?;
        let (t_train, t_val) = train_val(target.as_deref().expect("checked"), None)?;
        let stack = NoHpStack::new(&cfg.nohp_config(), cfg.seed, &device)?;
        let prep = PrepConfig::for_nohp(&stack, &hog);
        let st = Prepared::new(&s_train, &prep)?;
        let sv = s_val.as_ref().map(|s| Prepared::new(s, &prep)).transpose()?;
        let tt = Prepared::new(&t_train, &prep)?;
        let tv = t_val.as_ref().map(|s| Prepared::new(s, &prep)).transpose()?;
        let h = train::train_nohp(&stack, &st, sv.as_ref(), &tt, tv.as_ref(), &tc)?;
        (h, Model::NoHp(stack), 0)
    } else {
        let (train_set, val_set) = train_val(data.as_deref().expect("checked"), val.as_deref())?;
        let classifier = regime == Regime::Classifier;
        let base = cfg.hgd_config(classifier, 0);
        let prep = PrepConfig::for_hgd(&base, &hog)?;
        let prep = PrepConfig {
            lda_hog: cfg.lda.then(|| hog.clone()),
            ..prep
        };
        let mut tr = Prepared::new(&train_set, &prep)?;
        let mut va = val_set.as_ref().map(|s| Prepared::new(s, &prep)).transpose()?;
        let mut lda_dim = 0;
        if cfg.lda {
            let lda = tr.fit_lda(cfg.lda_bin_width)?;
            tr.apply_lda(&lda)?;
            if let Some(v) = &mut va {
                v.apply_lda(&lda)?;
            }
            lda.save(&dir.join(LDA_FILE))?;
            lda_dim = lda.k();
        }
        let model = HgdModel::new(&cfg.hgd_config(classifier, lda_dim), cfg.seed, &device)?;
        let h = match regime {
            Regime::Implicit => train::train_implicit(&model, &tr, va.as_ref(), &tc)?,
            Regime::Explicit => train::train_explicit(&model, &tr, va.as_ref(), &tc)?,
            Regime::Classifier => train::train_classifier(&model, &tr, va.as_ref(), &tc, &cfg.zone_grid())?,
            Regime::Nohp => unreachable!(),
        };
        (h, Model::Hgd(Box::new(model)), lda_dim)
    };
    for w in &history.warnings {
        log::warn!("{w}");
    }
    let hist_path = dir.join(HISTORY);
    history.save(&hist_path)?;
    let ck = CheckpointConfig {
        regime,
        lda_dim,
        config: cfg.clone(),
    };
    let ck_json = serde_json::to_string(&ck)?;
    let ck_path = dir.join(CHECKPOINT);
    nets::save_checkpoint(&ck_path, &parts_owner.parts(), &ck_json, cfg.seed)?;

    // Validate what was written.
    nets::read_checkpoint_meta(&ck_path)?;
    if TrainHistory::load(&hist_path)?.records.len() != history.records.len() {
        bail!("history file does not round-trip");
    }
    println!("{}", ck_path.display());
    Ok(())
}

enum Model {
    Hgd(Box<HgdModel>),
    NoHp(NoHpStack),
}

impl Model {
    fn parts(&self) -> Vec<(&'static str, &headgaze::VarMap)> {
        match self {
            Model::Hgd(m) => m.parts(),
            Model::NoHp(s) => s.parts(),
        }
    }
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, classify: bool, common: &Common) -> Result<()> {
    if !checkpoint.is_file() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let meta = nets::read_checkpoint_meta(checkpoint)?;
    let ck: CheckpointConfig = serde_json::from_str(&meta.config).context("checkpoint config")?;
    let cfg = ck.config;
    let dir = out_dir(common, "eval")?;
    write_echo(&dir, &cfg, &format!("eval --split {split}"))?;
    let all = load_set(data)?;
    let set = if split == "all" { all } else { all.with_split(split) };
    if set.is_empty() {
        bail!("no samples with split `{split}` in {}", data.display());
    }
    let device = Device::Cpu;
    let hash = eval::config_hash(&meta.config);
    let grid = cfg.zone_grid();
    let hog = cfg.hog();
    let report = match ck.regime {
        Regime::Nohp => {
            let stack = NoHpStack::new(&cfg.nohp_config(), cfg.seed, &device)?;
            nets::load_checkpoint(checkpoint, &stack.parts())?;
            eval::evaluate_nohp(&stack, &set, &hog, classify.then_some(&grid), &hash)?
        }
        regime => {
            let classifier = regime == Regime::Classifier;
            let model = HgdModel::new(&cfg.hgd_config(classifier, ck.lda_dim), cfg.seed, &device)?;
            nets::load_checkpoint(checkpoint, &model.parts())?;
            let lda = if ck.lda_dim > 0 {
                let p = checkpoint.with_file_name(LDA_FILE);
                Some(LdaTransform::load(&p).with_context(|| format!("loading {}", p.display()))?)
            } else {
                None
            };
            let grid = (classify || classifier).then_some(&grid);
            eval::evaluate_hgd(&model, &set, &hog, lda.as_ref(), grid, &hash)?
        }
    };
    let p = dir.join(METRICS);
    fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    let back: eval::MetricsReport = serde_json::from_str(&fs::read_to_string(&p)?)?;
    if back.pairs != report.pairs {
        bail!("metrics file does not round-trip");
    }
    println!("aem {:.4} vem {:.4}", report.aem, report.vem);
    Ok(())
}

fn cmd_report(run: Option<PathBuf>, metrics: Option<PathBuf>, data: Option<PathBuf>, common: &Common) -> Result<()> {
    if run.is_none() && metrics.is_none() && data.is_none() {
        return usage("give at least one of --run, --metrics, --data");
    }
    let loaded = load_config(common, &[])?;
    let history = match run.as_ref().map(|r| r.join(HISTORY)).filter(|p| p.is_file()) {
        Some(p) => Some(TrainHistory::load(&p)?),
        None => None,
    };
    let metrics_path = metrics.or_else(|| run.as_ref().map(|r| r.join(METRICS)).filter(|p| p.is_file()));
    let report = match metrics_path {
        Some(p) => Some(
            serde_json::from_str::<eval::MetricsReport>(
                &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let set = data.as_deref().map(load_set).transpose()?;
    let dir = out_dir(common, "report")?;
    write_echo(&dir, &loaded.config, "report")?;
    let files = report::render_reports(report.as_ref(), history.as_ref(), set.as_ref(), &dir)?;
    for f in &files {
        if !f.is_file() {
            bail!("{} was not written", f.display());
        }
        println!("{}", f.display());
    }
    Ok(())
}
