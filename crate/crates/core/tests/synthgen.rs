use std::fs;
use std::path::Path;

use headgaze::dataset::{load_manifest, save_manifest, Side};
use headgaze::geometry::{self, AnglePair};
use headgaze::synth::{self, canonical, GenerateConfig, SceneParams, SceneRanges};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn small_config(seed: u64) -> GenerateConfig {
    GenerateConfig {
        seed,
        eye_size: (16, 24),
        face_size: (48, 48),
        subjects: 4,
        ..GenerateConfig::default()
    }
}

// Independent rotation: yaw about +y, then pitch lifting +z towards +y.
fn oracle_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, sp, 0.0, -sp, cp);
    ry * rx
}

/// Residual of the best scale + translation fit of rotated canonical points
/// onto the observed image points (closed-form linear least squares).
fn fit_residual(yaw: f64, pitch: f64, observed: &[[f64; 2]]) -> f64 {
    let r = oracle_rotation(yaw, pitch);
    let model: Vec<[f64; 2]> = canonical::FIDUCIALS
        .iter()
        .map(|p| {
            let q = r * Vector3::new(p[0], p[1], p[2]);
            [q.x, -q.y]
        })
        .collect();
    let n = model.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..model.len()).map(f).sum::<f64>() / n;
    let (mx, my) = (mean(&|i| model[i][0]), mean(&|i| model[i][1]));
    let (ox, oy) = (mean(&|i| observed[i][0]), mean(&|i| observed[i][1]));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..model.len() {
        let (a, b) = (model[i][0] - mx, model[i][1] - my);
        num += a * (observed[i][0] - ox) + b * (observed[i][1] - oy);
        den += a * a + b * b;
    }
    let s = num / den;
    (0..model.len())
        .map(|i| {
            let dx = ox + s * (model[i][0] - mx) - observed[i][0];
            let dy = oy + s * (model[i][1] - my) - observed[i][1];
            dx * dx + dy * dy
        })
        .sum()
}

fn recover_pose(observed: &[[f64; 2]]) -> AnglePair {
    let mut best = (f64::MAX, 0.0, 0.0);
    let search = |y0: f64, y1: f64, p0: f64, p1: f64, step: f64, best: &mut (f64, f64, f64)| {
        let mut yaw = y0;
        while yaw <= y1 {
            let mut pitch = p0;
            while pitch <= p1 {
                let r = fit_residual(yaw, pitch, observed);
                if r < best.0 {
                    *best = (r, yaw, pitch);
                }
                pitch += step;
            }
            yaw += step;
        }
    };
    search(-40.0, 40.0, -40.0, 40.0, 1.0, &mut best);
    let (y, p) = (best.1, best.2);
    search(y - 1.0, y + 1.0, p - 1.0, p + 1.0, 0.02, &mut best);
    AnglePair::new(best.1, best.2)
}

#[test]
fn face_pose_is_recoverable_from_fiducials() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ranges = SceneRanges::default();
    for _ in 0..20 {
        let scene = synth::sample_scene(&mut rng, &ranges).unwrap();
        let face = synth::render_face(&scene, (224, 224)).unwrap();
        let got = recover_pose(&face.fiducials);
        assert!((got.yaw - scene.head.yaw).abs() < 2.0, "{got:?} vs {:?}", scene.head);
        assert!((got.pitch - scene.head.pitch).abs() < 2.0, "{got:?} vs {:?}", scene.head);
    }
}

#[test]
fn recovered_yaw_is_monotone_in_true_yaw() {
    let mut last = f64::MIN;
    for k in -6..=6 {
        let yaw = 5.0 * k as f64;
        let scene = SceneParams::new(AnglePair::new(yaw, 0.0), [0.0, 0.0, 20.0], 1.0);
        let face = synth::render_face(&scene, (224, 224)).unwrap();
        let got = recover_pose(&face.fiducials).yaw;
        assert!(got > last, "yaw {yaw}: recovered {got} after {last}");
        last = got;
    }
}

#[test]
fn yawed_face_shifts_nose_towards_larger_columns() {
    let scene = SceneParams::new(AnglePair::new(30.0, 0.0), [0.0, 0.0, 20.0], 1.0);
    let face = synth::render_face(&scene, (224, 224)).unwrap();
    assert!(face.fiducials[2][0] > 112.0);
}

#[test]
fn stored_gaze_is_composition_of_head_and_eye() {
    let set = synth::generate_in_memory(200, &small_config(3)).unwrap();
    for s in set.iter() {
        for (side, eih) in [(Side::Left, s.eye_in_head_left), (Side::Right, s.eye_in_head_right)] {
            let composed = geometry::compose_gaze(s.head, eih.unwrap()).unwrap();
            let g = s.gaze(side);
            assert!((composed.yaw - g.yaw).abs() < 1e-6 && (composed.pitch - g.pitch).abs() < 1e-6);
        }
    }
}

#[test]
fn iris_offset_tracks_eye_in_head_yaw() {
    let set = synth::generate_in_memory(1000, &GenerateConfig {
        eye_size: (32, 48),
        face_size: (16, 16),
        ..small_config(5)
    })
    .unwrap();
    // Offset measured against the eye corners so crop jitter cancels.
    let (xs, ys): (Vec<f64>, Vec<f64>) = set
        .iter()
        .map(|s| {
            let lm = s.eye_landmarks_left.as_ref().unwrap();
            let mid = (lm.interior_margin[0][0] + lm.interior_margin[1][0]) / 2.0;
            (lm.iris_centroid()[0] - mid, s.eye_in_head_left.unwrap().yaw)
        })
        .unzip();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert!(r > 0.9, "correlation {r}");
}

#[test]
fn iris_landmarks_inside_margin_unless_flagged() {
    let set = synth::generate_in_memory(300, &small_config(8)).unwrap();
    let mut flagged = 0;
    for s in set.iter() {
        for lm in [s.eye_landmarks_left.as_ref().unwrap(), s.eye_landmarks_right.as_ref().unwrap()] {
            assert_eq!(lm.points().count(), 16);
            flagged += lm.iris_occluded.iter().filter(|&&o| o).count();
        }
    }
    // Upper and lower lids cover part of the iris at most poses.
    assert!(flagged > 0);
}

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(hash_dir(&p));
        } else {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
        }
    }
    out
}

#[test]
fn generation_is_reproducible_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = small_config(42);
    let ma = synth::generate_dataset(20, &cfg, &a, None).unwrap();
    let mb = synth::generate_dataset(20, &cfg, &b, None).unwrap();
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    assert_eq!(hash_dir(&a), hash_dir(&b));

    let set = load_manifest(&ma).unwrap();
    assert_eq!(set.len(), 20);
    assert_eq!(set.with_split("train").len(), 18);
    assert_eq!(set.with_split("test").len(), 2);
    let s = &set.samples[0];
    assert_eq!(s.left_eye.load().unwrap().dimensions(), (24, 16));
    assert_eq!(s.face_image.load().unwrap().dimensions(), (48, 48));
    assert!(s.eye_landmarks_left.is_some() && s.eye_in_head_right.is_some());

    // Saving the loaded set reproduces the manifest bytes.
    let again = a.join("again.jsonl");
    save_manifest(&set, &again).unwrap();
    assert_eq!(fs::read_to_string(&ma).unwrap(), fs::read_to_string(&again).unwrap());
}

#[test]
fn single_sample_dataset_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth::generate_dataset(1, &small_config(1), tmp.path(), None).unwrap();
    let set = load_manifest(&m).unwrap();
    assert_eq!(set.len(), 1);
    assert!(tmp.path().join(synth::CONFIG_ECHO_NAME).is_file());
}

#[test]
fn split_ratio_of_large_run_matches() {
    let cfg = GenerateConfig::default();
    let n_train = (100_000f64 * cfg.train_fraction).round() as usize;
    assert_eq!((n_train, 100_000 - n_train), (90_000, 10_000));
}

#[test]
fn refiner_hook_runs_on_every_image() {
    let tmp = tempfile::tempdir().unwrap();
    let invert = |img: &mut image::GrayImage| img.pixels_mut().for_each(|p| p[0] = 255 - p[0]);
    let plain = synth::render_sample(&small_config(9), 0).unwrap();
    let m = synth::generate_dataset(1, &small_config(9), tmp.path(), Some(&invert)).unwrap();
    let set = load_manifest(&m).unwrap();
    let refined = set.samples[0].left_eye.load().unwrap();
    let expected: Vec<u8> = plain.left.image.pixels().map(|p| 255 - p[0]).collect();
    assert_eq!(refined.pixels().map(|p| p[0]).collect::<Vec<_>>(), expected);
}

#[test]
fn failed_generation_cleans_up() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("images");
    fs::write(&blocker, b"not a directory").unwrap();
    assert!(synth::generate_dataset(2, &small_config(0), tmp.path(), None).is_err());
    assert!(!tmp.path().join(synth::MANIFEST_NAME).exists());
}
