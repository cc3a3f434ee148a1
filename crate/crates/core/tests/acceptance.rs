//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness capture, so the lines show up in a
//! plain `cargo test`) and then asserts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use headgaze::dataset::{self, EyeStrategy, Merge, SampleSet};
use headgaze::eval;
use headgaze::geometry::{self, AnglePair};
use headgaze::nets::{self, BackboneConfig, HgdConfig, HgdModel, NoHpConfig, NoHpStack, OutputKind, Pool, Stem};
use headgaze::preprocess::HogConfig;
use headgaze::synth::{self, GenerateConfig};
use headgaze::train::{self, PrepConfig, Prepared, TrainConfig, TrainHistory, ZoneGrid};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    let line = format!("criterion {n:>2} {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn set(n: usize, seed: u64, eye: (usize, usize), face: (usize, usize)) -> SampleSet {
    let cfg = GenerateConfig {
        seed,
        eye_size: eye,
        face_size: face,
        ..GenerateConfig::default()
    };
    synth::generate_in_memory(n, &cfg).unwrap()
}

/// Desk-scale HGD: ResNet-10 style, narrow, on 32x48 eyes and 32x32 faces.
fn desk_hgd(strategy: EyeStrategy) -> HgdConfig {
    HgdConfig {
        depth: 10,
        base_width: 8,
        stem: Stem::Compact,
        stem_stride: 2,
        pool: Pool::Average,
        face_size: (32, 32),
        eye_size: (32, 48),
        strategy,
        ..HgdConfig::default()
    }
}

fn prepare(set: &SampleSet, cfg: &HgdConfig) -> Prepared {
    Prepared::new(set, &PrepConfig::for_hgd(cfg, &HogConfig::default()).unwrap()).unwrap()
}

/// The step size used for desk-scale runs; see the README for why it is
/// higher than the full-scale default.
fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        decay_every: 60,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn c01_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pair = || AnglePair::new(rng.random_range(-89.0..89.0), rng.random_range(-89.0..89.0));
    let preds: Vec<AnglePair> = (0..10_000).map(|_| pair()).collect();
    let refs: Vec<AnglePair> = (0..10_000).map(|_| pair()).collect();

    // Direction by rotating the forward axis: pitch about x, then yaw about y.
    let vector = |a: AnglePair| {
        let (y, p) = (a.yaw.to_radians(), a.pitch.to_radians());
        let v = [0.0, p.sin(), p.cos()];
        [y.cos() * v[0] + y.sin() * v[2], v[1], -y.sin() * v[0] + y.cos() * v[2]]
    };
    // Arc via atan2(|a x b|, a . b), well conditioned at every angle.
    let arc = |a: [f64; 3], b: [f64; 3]| {
        let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        cn.atan2(a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).to_degrees()
    };
    let mut vem_err = 0f64;
    for (p, r) in preds.iter().zip(&refs) {
        vem_err = vem_err.max((geometry::vem(*p, *r) - arc(vector(*p), vector(*r))).abs());
    }
    let mut sum = 0.0;
    for i in 0..preds.len() {
        sum += (preds[i].yaw - refs[i].yaw).abs();
        sum += (preds[i].pitch - refs[i].pitch).abs();
    }
    let aem_oracle = sum / (2.0 * preds.len() as f64);
    let aem_err = (geometry::aem(&preds, &refs).unwrap() - aem_oracle).abs();
    let mean_oracle = preds.iter().zip(&refs).map(|(p, r)| arc(vector(*p), vector(*r))).sum::<f64>() / preds.len() as f64;
    let mean_err = (geometry::mean_vem(&preds, &refs).unwrap() - mean_oracle).abs();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "metric oracle equivalence",
        vem_err <= 1e-9 && mean_err <= 1e-9 && aem_err <= 1e-12 && secs < 5.0,
        format!("max vem diff {vem_err:.2e} deg, mean vem diff {mean_err:.2e}, aem diff {aem_err:.2e}, {secs:.2}s"),
    );
}

#[test]
fn c02_transform_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let a = AnglePair::new(rng.random_range(-89.0..89.0), rng.random_range(-89.0..89.0));
        let b = geometry::vector_to_angles(&geometry::angles_to_vector(a));
        worst = worst.max((a.yaw - b.yaw).abs()).max((a.pitch - b.pitch).abs());
    }
    verdict(2, "angle/vector round trip", worst <= 1e-9, format!("max error {worst:.2e} deg over 10000 points"));
}

#[test]
fn c03_gaze_range_doubling() {
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for h in -30..=30 {
        for e in -30..=30 {
            let g = geometry::compose_gaze(AnglePair::new(h as f64, 0.0), AnglePair::new(e as f64, 0.0)).unwrap();
            lo = lo.min(g.yaw);
            hi = hi.max(g.yaw);
        }
    }
    verdict(
        3,
        "gaze range doubling",
        (lo + 60.0).abs() <= 1e-6 && (hi - 60.0).abs() <= 1e-6,
        format!("composed yaw spans [{lo:.9}, {hi:.9}]"),
    );
}

#[test]
fn c04_wing_loss() {
    let (w, eps) = (10.0, 2.0);
    let knee = (nets::wing_value(w - 1e-12, w, eps) - nets::wing_value(w + 1e-12, w, eps)).abs();
    let reference = (nets::wing_value(20.0, w, eps) - (10.0 + 10.0 * 6f64.ln())).abs();

    // Autograd through the tensor loss against central differences of the
    // scalar definition, away from the knee and the origin.
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let xs: Vec<f64> = (0..2000)
        .map(|_| rng.random_range(-40.0..40.0))
        .filter(|x: &f64| (x.abs() - w).abs() > 1e-2 && x.abs() > 1e-2)
        .collect();
    let pred = Var::new(xs.clone(), &Device::Cpu).unwrap();
    let target = Tensor::zeros(xs.len(), DType::F64, &Device::Cpu).unwrap();
    let loss = nets::wing_loss(pred.as_tensor(), &target, w, eps).unwrap();
    let grads = loss.backward().unwrap();
    let g = grads.get(pred.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
    let n = xs.len() as f64;
    let h = 1e-6;
    let mut worst = 0f64;
    for (x, gi) in xs.iter().zip(g) {
        let fd = (nets::wing_value(x + h, w, eps) - nets::wing_value(x - h, w, eps)) / (2.0 * h);
        worst = worst.max(((gi * n - fd) / fd).abs());
    }
    verdict(
        4,
        "wing loss",
        knee <= 1e-6 && reference <= 1e-9 && worst < 1e-4,
        format!("knee gap {knee:.2e}, wing(20) error {reference:.2e}, worst gradient rel error {worst:.2e}"),
    );
}

#[test]
fn c05_shape_contracts() {
    let mut problems = Vec::new();
    let left = Array3::<f32>::zeros((224, 224, 1));
    let right = Array3::<f32>::ones((224, 224, 1));
    let merged = dataset::merge_eyes(&left, &right, Merge::Channel).unwrap();
    if merged.shape() != [224, 224, 2] {
        problems.push(format!("BEC gave {:?}", merged.shape()));
    }
    let full = HgdConfig {
        strategy: EyeStrategy::Bec,
        ..HgdConfig::default()
    };
    if full.eye_input() != (2, 224, 224) {
        problems.push("BEC model input".into());
    }

    let cfg = desk_hgd(EyeStrategy::Sem);
    let m = HgdModel::new(&cfg, 1, &Device::Cpu).unwrap();
    let face = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let eye = Tensor::zeros((2, 1, 32, 48), DType::F32, &Device::Cpu).unwrap();
    let out = m.forward(Some(&face), &eye, None, false).unwrap();
    let head_w = out.head_feature.unwrap().dims().to_vec();
    let gaze_w = m.gaze.feature(&eye, false).unwrap().dims().to_vec();
    if head_w != [2, 64] || gaze_w != [2, 64] {
        problems.push(format!("HGD features {head_w:?}/{gaze_w:?}"));
    }

    let stack = NoHpStack::new(
        &NoHpConfig {
            detector: BackboneConfig {
                depth: 10,
                base_width: 4,
                stem: Stem::Compact,
                stem_stride: 2,
                pool: Pool::Flatten,
                input: (1, 64, 96),
            },
        },
        1,
        &Device::Cpu,
    )
    .unwrap();
    let eye = Tensor::zeros((2, 1, 64, 96), DType::F32, &Device::Cpu).unwrap();
    let (coords, feat) = stack.detector.forward(&eye, false).unwrap();
    let (_, gtap) = stack.gaze_module.forward(&feat).unwrap();
    let (_, htap) = stack.head_module.forward(&feat).unwrap();
    let cat = stack.concat_features(&eye).unwrap();
    let pred = stack.predict(&eye).unwrap();
    let widths = [coords.dim(1), feat.dim(1), gtap.dim(1), cat.dim(1), pred.dim(1)].map(|r| r.unwrap());
    if widths != [32, 200, 200, 600, 2] || htap.dim(1).unwrap() != 200 {
        problems.push(format!("noHP widths {widths:?}"));
    }
    // Violations are hard errors, not silent reshapes.
    let wrong = Tensor::zeros((2, 1, 32, 40), DType::F32, &Device::Cpu).unwrap();
    if m.forward(Some(&face), &wrong, None, false).is_ok() {
        problems.push("mis-shaped eye accepted".into());
    }
    verdict(
        5,
        "shape contracts",
        problems.is_empty(),
        if problems.is_empty() {
            "BEC (224,224,2); HGD 64/64; noHP 32/200/200/600/2".into()
        } else {
            problems.join("; ")
        },
    );
}

fn bit_equal(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> bool {
    a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| w.len() == v.len() && w.iter().zip(v).all(|(x, y)| x.to_bits() == y.to_bits())))
}

#[test]
fn c06_freeze_invariants() {
    // Explicit stage 2 only (stage-1 cap of zero): 64 units, batch 8, 2 epochs = 16 steps.
    let s = set(32, 61, (32, 48), (64, 64));
    let cfg = desk_hgd(EyeStrategy::Sem);
    let data = prepare(&s, &cfg);
    let m = HgdModel::new(&cfg, 2, &Device::Cpu).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        stage1_max_epochs: 0,
        ..desk_train(2, 1)
    };
    let face0 = nets::snapshot(&m.face_vars).unwrap();
    let gaze0 = nets::snapshot(&m.gaze_vars).unwrap();
    let h = train::train_explicit(&m, &data, None, &tc).unwrap();
    let steps_explicit = h.records.iter().filter(|r| r.stage == "gaze").count() * data.len().div_ceil(8);
    let explicit_ok = bit_equal(&face0, &nets::snapshot(&m.face_vars).unwrap()) && !bit_equal(&gaze0, &nets::snapshot(&m.gaze_vars).unwrap());

    // noHP: stages B and C with the detector untouched, then C alone with the modules untouched.
    let stack = NoHpStack::new(
        &NoHpConfig {
            detector: BackboneConfig {
                depth: 10,
                base_width: 4,
                stem: Stem::Compact,
                stem_stride: 2,
                pool: Pool::Average,
                input: (1, 32, 48),
            },
        },
        3,
        &Device::Cpu,
    )
    .unwrap();
    let prep = PrepConfig::for_nohp(&stack, &HogConfig::default());
    let synth_data = Prepared::new(&s, &prep).unwrap();
    let target = Prepared::new(&set(32, 62, (32, 48), (64, 64)), &prep).unwrap();
    let det0 = nets::snapshot(&stack.detector_vars).unwrap();
    let bc = TrainConfig {
        batch_size: 8,
        landmark_epochs: Some(0),
        module_epochs: Some(2),
        final_epochs: Some(2),
        ..desk_train(2, 2)
    };
    train::train_nohp(&stack, &synth_data, None, &target, None, &bc).unwrap();
    let det_ok = bit_equal(&det0, &nets::snapshot(&stack.detector_vars).unwrap());
    let (g0, h0, f0) = (
        nets::snapshot(&stack.gaze_module_vars).unwrap(),
        nets::snapshot(&stack.head_module_vars).unwrap(),
        nets::snapshot(&stack.final_vars).unwrap(),
    );
    let c_only = TrainConfig {
        module_epochs: Some(0),
        ..bc
    };
    train::train_nohp(&stack, &synth_data, None, &target, None, &c_only).unwrap();
    let modules_ok = bit_equal(&g0, &nets::snapshot(&stack.gaze_module_vars).unwrap())
        && bit_equal(&h0, &nets::snapshot(&stack.head_module_vars).unwrap())
        && bit_equal(&det0, &nets::snapshot(&stack.detector_vars).unwrap())
        && !bit_equal(&f0, &nets::snapshot(&stack.final_vars).unwrap());
    let steps_nohp = 2 * target.len().div_ceil(8);
    verdict(
        6,
        "freeze invariants",
        explicit_ok && det_ok && modules_ok && steps_explicit >= 10 && steps_nohp >= 10,
        format!(
            "explicit face frozen {explicit_ok} over {steps_explicit} steps; detector frozen through B+C {det_ok}; modules frozen through C {modules_ok} over {steps_nohp} steps"
        ),
    );
}

#[test]
fn c07_beta_zero_degenerates_to_gaze_only() {
    let s = set(48, 71, (32, 48), (64, 64));
    let with_head = desk_hgd(EyeStrategy::Bec);
    let gaze_only = HgdConfig {
        use_head_task: false,
        ..with_head.clone()
    };
    let data = prepare(&s, &with_head);
    let tc = TrainConfig {
        beta: 0.0,
        batch_size: 16,
        ..desk_train(3, 7)
    };
    let a = HgdModel::new(&with_head, 9, &Device::Cpu).unwrap();
    let b = HgdModel::new(&gaze_only, 9, &Device::Cpu).unwrap();
    train::train_implicit(&a, &data, None, &tc).unwrap();
    train::train_implicit(&b, &data, None, &tc).unwrap();
    let (sa, sb) = (nets::snapshot(&a.gaze_vars).unwrap(), nets::snapshot(&b.gaze_vars).unwrap());
    let mut worst = 0f32;
    for (k, v) in &sa {
        for (x, y) in v.iter().zip(&sb[k]) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(7, "beta = 0 matches gaze-only training", worst <= 1e-7, format!("max gaze-branch parameter difference {worst:.2e} after 9 steps"));
}

#[test]
fn c08_overfit_sanity() {
    let start = Instant::now();
    let s = set(256, 1, (32, 48), (64, 64));
    let cfg = desk_hgd(EyeStrategy::Bec);
    let data = prepare(&s, &cfg);
    let m = HgdModel::new(&cfg, 7, &Device::Cpu).unwrap();
    // Validation on the training set itself gives the eval-mode train AEM.
    let tc = TrainConfig {
        stop_below_val_aem: Some(3.0),
        ..desk_train(200, 3)
    };
    let h = train::train_implicit(&m, &data, Some(&data), &tc).unwrap();
    let last = h.last().unwrap();
    let aem = last.val_aem.unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "overfit sanity",
        aem < 3.0 && h.records.len() <= 200 && secs < 1800.0,
        format!("train AEM {aem:.2} deg after {} epochs, {secs:.0}s", h.records.len()),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn c09_face_branch_helps() {
    let train_set = set(768, 91, (32, 48), (64, 64));
    let val_set = set(128, 92, (32, 48), (64, 64));
    let with_face = desk_hgd(EyeStrategy::Bec);
    let without = HgdConfig {
        use_face_model: false,
        use_head_task: false,
        ..with_face.clone()
    };
    let run = |cfg: &HgdConfig, seed: u64| {
        let (tr, va) = (prepare(&train_set, cfg), prepare(&val_set, cfg));
        let m = HgdModel::new(cfg, seed, &Device::Cpu).unwrap();
        let h = train::train_implicit(&m, &tr, Some(&va), &desk_train(25, seed)).unwrap();
        let aem = h.last().unwrap().val_aem.unwrap();
        let _ = writeln!(std::io::stderr(), "  c09 face model {} seed {seed}: val AEM {aem:.2}", cfg.use_face_model);
        aem
    };
    let a: Vec<f64> = (1..=3).map(|s| run(&with_face, s)).collect();
    let b: Vec<f64> = (1..=3).map(|s| run(&without, s)).collect();
    let (ma, mb) = (median(a.clone()), median(b.clone()));
    verdict(
        9,
        "face branch lowers val AEM",
        ma < mb,
        format!("median val AEM with face {ma:.2} {a:.2?}, without {mb:.2} {b:.2?}"),
    );
}

#[test]
fn c10_nohp_pipeline() {
    let detector = BackboneConfig {
        depth: 10,
        base_width: 8,
        stem: Stem::Compact,
        stem_stride: 2,
        pool: Pool::Flatten,
        input: (1, 64, 96),
    };
    let stack = NoHpStack::new(&NoHpConfig { detector }, 5, &Device::Cpu).unwrap();
    let prep = PrepConfig::for_nohp(&stack, &HogConfig::default());
    let synth_train = Prepared::new(&set(384, 101, (64, 96), (64, 64)), &prep).unwrap();
    let synth_val = Prepared::new(&set(96, 102, (64, 96), (64, 64)), &prep).unwrap();
    let target_train = Prepared::new(&set(256, 103, (64, 96), (64, 64)), &prep).unwrap();
    let target_val = Prepared::new(&set(96, 104, (64, 96), (64, 64)), &prep).unwrap();
    // Small batches: the detector is step-limited, not data-limited, at this scale.
    let tc = TrainConfig {
        landmark_crop: (64, 96),
        batch_size: 16,
        ..desk_train(30, 5)
    };
    let h = train::train_nohp(&stack, &synth_train, Some(&synth_val), &target_train, Some(&target_val), &tc).unwrap();
    let px = h.records.iter().filter(|r| r.stage == "landmarks").last().unwrap().val_landmark_px.unwrap();
    let baseline = h.baseline_aem.unwrap();
    let final_aem = h.last().unwrap().val_aem.unwrap();
    let gain = 1.0 - final_aem / baseline;
    verdict(
        10,
        "noHP pipeline",
        px < 3.0 && gain >= 0.5,
        format!("landmark error {px:.2} px; target AEM {final_aem:.2} vs untrained {baseline:.2} ({:.0}% better)", gain * 100.0),
    );
}

#[test]
fn c11_zone_classifier() {
    let grid = ZoneGrid::default();
    let cfg = HgdConfig {
        output: OutputKind::Classifier,
        ..desk_hgd(EyeStrategy::Sem)
    };
    let tr = prepare(&set(384, 111, (32, 48), (64, 64)), &cfg);
    let val_set = set(128, 112, (32, 48), (64, 64));
    let m = HgdModel::new(&cfg, 11, &Device::Cpu).unwrap();
    train::train_classifier(&m, &tr, None, &desk_train(30, 11), &grid).unwrap();
    let r = eval::evaluate_hgd(&m, &val_set, &HogConfig::default(), None, Some(&grid), "").unwrap();
    let c = r.confusion.unwrap();
    let mut worst_row = 0f64;
    for (i, row) in c.rows.iter().enumerate() {
        if !c.zero_support.contains(&(i + 1)) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let acc = c.accuracy();
    verdict(
        11,
        "zone classifier",
        worst_row <= 1e-9 && acc >= 0.33,
        format!("accuracy {:.1}% (chance 11.1%), worst row-sum error {worst_row:.1e}, zero-support rows {:?}", acc * 100.0, c.zero_support),
    );
}

fn hash_dir(dir: &Path) -> String {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn c12_determinism() {
    let gen = GenerateConfig {
        seed: 121,
        eye_size: (32, 48),
        face_size: (64, 64),
        ..GenerateConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synth::generate_dataset(24, &gen, a.path(), None).unwrap();
    synth::generate_dataset(24, &gen, b.path(), None).unwrap();
    let same_data = hash_dir(a.path()) == hash_dir(b.path());
    let loaded = dataset::load_manifest(&ma).unwrap();

    let cfg = desk_hgd(EyeStrategy::Sem);
    let data = prepare(&loaded, &cfg);
    let run = || -> (TrainHistory, eval::MetricsReport) {
        let m = HgdModel::new(&cfg, 12, &Device::Cpu).unwrap();
        let h = train::train_implicit(&m, &data, Some(&data), &TrainConfig { batch_size: 16, ..desk_train(3, 12) }).unwrap();
        let r = eval::evaluate_hgd(&m, &loaded, &HogConfig::default(), None, Some(&ZoneGrid::default()), "x").unwrap();
        (h, r)
    };
    let ((h1, r1), (h2, r2)) = (run(), run());
    let mut worst = 0f64;
    for (x, y) in h1.records.iter().zip(&h2.records) {
        for ((_, u), (_, v)) in x.metrics().into_iter().zip(y.metrics()) {
            worst = worst.max((u - v).abs());
        }
    }
    let same_metrics = (r1.aem - r2.aem).abs() <= 1e-6 && (r1.vem - r2.vem).abs() <= 1e-6 && r1.confusion == r2.confusion;
    verdict(
        12,
        "determinism",
        same_data && h1.records.len() == h2.records.len() && worst <= 1e-6 && same_metrics,
        format!("dataset hashes equal {same_data}; max history difference {worst:.1e}; eval metrics equal {same_metrics}"),
    );
}
