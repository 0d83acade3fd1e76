//! Acceptance suite: one test per shipping criterion, each ending in a
//! `criterion NN PASS` line (run with `--nocapture` to see them all; a
//! failure panics with the measured numbers).
//!
//! Criteria 7 and 8 share one desk-scale pipeline run — three model variants
//! trained on the synthetic dataset — which takes several minutes on one CPU
//! core. Everything else finishes in seconds.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkgnet::config::load_config;
use pkgnet::data::{assemble_stclips, load_boxes, write_synthetic_dataset, FrameStore, STClip};
use pkgnet::eval::auroc;
use pkgnet::loss::{
    feature_inconsistency_block, feature_inconsistency_block_grad, gradient_loss,
    gradient_loss_grad, prediction_loss, prediction_loss_grad, LossWeights, Reduction,
};
use pkgnet::model::{
    build_student, build_teacher, forward, load_checkpoint, save_checkpoint, Backbone, Mode,
    StudentConfig, TapSpec, TeacherSpec,
};
use pkgnet::nn::Adam;
use pkgnet::pipeline;
use pkgnet::scoring::{combined_score, ClipScore, ScoreStats, ScoreWeights};

fn pass(criterion: usize, detail: &str) {
    println!("criterion {criterion:02} PASS: {detail}");
}

fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>() * 2.0 - 1.0)
}

// ---------------------------------------------------------------------------
// Criterion 1: the loss implementations match scalar reference loops on random
// tensors, max abs error <= 1e-6, in under 30 s.
// ---------------------------------------------------------------------------

fn ref_prediction(p: &Array3<f32>, t: &Array3<f32>) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (a, b) in p.iter().zip(t.iter()) {
        let d = *a as f64 - *b as f64;
        sum += d * d;
        n += 1;
    }
    sum / n as f64
}

fn ref_gradient(p: &Array3<f32>, t: &Array3<f32>, alpha: u32) -> f64 {
    let (c, h, w) = p.dim();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ci in 0..c {
        for i in 1..h {
            for j in 0..w {
                let dp = (p[(ci, i, j)] as f64 - p[(ci, i - 1, j)] as f64).abs();
                let dt = (t[(ci, i, j)] as f64 - t[(ci, i - 1, j)] as f64).abs();
                sum += (dt - dp).abs().powi(alpha as i32);
                n += 1;
            }
        }
        for i in 0..h {
            for j in 1..w {
                let dp = (p[(ci, i, j - 1)] as f64 - p[(ci, i, j)] as f64).abs();
                let dt = (t[(ci, i, j - 1)] as f64 - t[(ci, i, j)] as f64).abs();
                sum += (dt - dp).abs().powi(alpha as i32);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ref_inconsistency(fs: &Array3<f32>, ft: &Array3<f32>) -> f64 {
    let (c, m, n) = fs.dim();
    let mut acc = 0.0f64;
    for mi in 0..m {
        for ni in 0..n {
            let mut dot = 0.0f64;
            let mut ss = 0.0f64;
            let mut st = 0.0f64;
            for ci in 0..c {
                let a = fs[(ci, mi, ni)] as f64;
                let b = ft[(ci, mi, ni)] as f64;
                dot += a * b;
                ss += a * a;
                st += b * b;
            }
            let denom = ss.sqrt().max(1e-8) * st.sqrt().max(1e-8);
            acc += 1.0 - dot / denom;
        }
    }
    acc / (m * n) as f64
}

#[test]
fn c01_losses_match_scalar_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..120 {
        let c = rng.random_range(1..=4);
        let h = rng.random_range(1..=6);
        let w = rng.random_range(1..=6);
        let p = rand3(&mut rng, c, h, w);
        let t = rand3(&mut rng, c, h, w);
        let alpha = 1 + (case % 2) as u32;

        let e = prediction_loss(&p.view(), &t.view()).unwrap();
        worst = worst.max((e - ref_prediction(&p, &t)).abs());
        let g = gradient_loss(&p.view(), &t.view(), alpha).unwrap();
        worst = worst.max((g - ref_gradient(&p, &t, alpha)).abs());
        let ic = feature_inconsistency_block(&p.view(), &t.view()).unwrap();
        worst = worst.max((ic - ref_inconsistency(&p, &t)).abs());
    }
    // Identical tensors: zero error losses, zero inconsistency.
    let same = rand3(&mut rng, 3, 5, 5);
    assert_eq!(prediction_loss(&same.view(), &same.view()).unwrap(), 0.0);
    assert_eq!(gradient_loss(&same.view(), &same.view(), 2).unwrap(), 0.0);
    assert!(feature_inconsistency_block(&same.view(), &same.view()).unwrap() < 1e-6);

    let secs = start.elapsed().as_secs_f64();
    assert!(worst <= 1e-6, "criterion 01 FAIL: max abs error {worst:.3e} > 1e-6");
    assert!(secs < 30.0, "criterion 01 FAIL: oracle suite took {secs:.1}s >= 30s");
    pass(1, &format!("360 oracle comparisons, max abs error {worst:.2e}, {secs:.2}s"));
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients match central finite differences on random
// 4x4 inputs, relative error <= 1e-4.
// ---------------------------------------------------------------------------

/// Central differences with the step that was actually realized after f32
/// rounding of x ± eps; the error is scaled by the gradient's own magnitude.
fn fd_worst_rel(
    f: &mut dyn FnMut(&Array3<f32>) -> f64,
    x: &Array3<f32>,
    analytic: &Array3<f32>,
) -> f64 {
    let eps = 1e-3f32;
    let mut numeric = Array3::<f64>::zeros(x.dim());
    for idx in 0..x.len() {
        let x0 = x.as_slice().unwrap()[idx];
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] = x0 + eps;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[idx] = x0 - eps;
        let h = (x0 + eps) as f64 - (x0 - eps) as f64;
        numeric.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / h;
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, n)| m.max((*a as f64 - n).abs() / scale))
}

#[test]
fn c02_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let p = rand3(&mut rng, 2, 4, 4);
        let t = rand3(&mut rng, 2, 4, 4);

        let (_, ge) = prediction_loss_grad(&p.view(), &t.view(), Reduction::Mean).unwrap();
        let mut fe = |x: &Array3<f32>| prediction_loss(&x.view(), &t.view()).unwrap();
        worst = worst.max(fd_worst_rel(&mut fe, &p, &ge));

        let (_, gg) = gradient_loss_grad(&p.view(), &t.view(), 2, Reduction::Mean).unwrap();
        let mut fg = |x: &Array3<f32>| gradient_loss(&x.view(), &t.view(), 2).unwrap();
        worst = worst.max(fd_worst_rel(&mut fg, &p, &gg));

        let fs = rand3(&mut rng, 4, 4, 4);
        let ft = rand3(&mut rng, 4, 4, 4);
        let (_, gc) = feature_inconsistency_block_grad(&fs.view(), &ft.view()).unwrap();
        let mut fc =
            |x: &Array3<f32>| feature_inconsistency_block(&x.view(), &ft.view()).unwrap();
        worst = worst.max(fd_worst_rel(&mut fc, &fs, &gc));
    }
    assert!(worst <= 1e-4, "criterion 02 FAIL: worst relative gradient error {worst:.3e} > 1e-4");
    pass(2, &format!("24 finite-difference checks, worst relative error {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// Criterion 3: with a resnet50 teacher tapping blocks 1 and 2 on 32x32 input,
// student and teacher tap tensors have the frozen expected shapes.
// ---------------------------------------------------------------------------

#[test]
fn c03_tap_shapes_match_frozen_oracle() {
    // 32x32 input: stem halves twice (conv stride 2, then max pool), block 2
    // halves once more; resnet50 block channels are 256 and 512.
    const EXPECT: [(usize, [usize; 3]); 2] = [(1, [256, 8, 8]), (2, [512, 4, 4])];

    let spec = TeacherSpec {
        backbone: Backbone::Resnet50,
        pretrained_weights: "seeded:3".to_string(),
        tap_blocks: vec![1, 2],
    };
    let teacher = build_teacher(&spec).unwrap();
    let student_cfg = StudentConfig::default();
    let tap = TapSpec::build(&spec, &student_cfg).unwrap();
    let student = build_student(&student_cfg, tap, 42).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cube = Array4::from_shape_fn((5, 3, 32, 32), |_| rng.random::<f32>());
    let clip = STClip { video_id: "v".to_string(), frame_index: 4, cube };
    let out = forward(&student, Some(&teacher), &clip).unwrap();

    for (block, want) in EXPECT {
        let s = out.student_taps.get(&block).unwrap_or_else(|| {
            panic!("criterion 03 FAIL: student tap {block} missing")
        });
        let t = out.teacher_taps.get(&block).unwrap_or_else(|| {
            panic!("criterion 03 FAIL: teacher tap {block} missing")
        });
        assert_eq!(s.dim(), (want[0], want[1], want[2]), "criterion 03 FAIL: student tap {block}");
        assert_eq!(t.dim(), (want[0], want[1], want[2]), "criterion 03 FAIL: teacher tap {block}");
    }
    pass(3, "resnet50 taps {1: 256x8x8, 2: 512x4x4} match on both sides");
}

// ---------------------------------------------------------------------------
// Criterion 4: after 10 optimization steps the teacher is bitwise unchanged
// and at least one student parameter moved in each of encoder, bottleneck,
// and decoder.
// ---------------------------------------------------------------------------

#[test]
fn c04_teacher_frozen_student_trains() {
    let dir = tempfile::tempdir().unwrap();
    let synth = pkgnet::data::SyntheticConfig {
        n_train_videos: 2,
        n_test_videos: 1,
        frames_per_video: 24,
        image_size: 48,
        anomaly_rate: 0.2,
        objects_per_video: 1,
    };
    write_synthetic_dataset(dir.path(), &synth, 7).unwrap();
    let store =
        FrameStore::open(&dir.path().join("train"), pkgnet::data::ChannelMode::Rgb).unwrap();
    let (boxes, _) = load_boxes(
        &dir.path().join("train_boxes.csv"),
        &store,
        pkgnet::data::DEFAULT_CONFIDENCE_THRESHOLD,
    )
    .unwrap();
    let clips: Vec<STClip> =
        assemble_stclips(&store, &boxes, 4).unwrap().collect::<pkgnet::Result<_>>().unwrap();
    assert!(clips.len() >= 8, "need a handful of clips, got {}", clips.len());

    let spec = TeacherSpec {
        backbone: Backbone::Resnet18,
        pretrained_weights: "seeded:5".to_string(),
        tap_blocks: vec![1, 2],
    };
    let teacher = build_teacher(&spec).unwrap();
    let student_cfg =
        StudentConfig { base_width: 4, bottleneck_depth: 1, ..StudentConfig::default() };
    let tap = TapSpec::build(&spec, &student_cfg).unwrap();
    let mut student = build_student(&student_cfg, tap, 11).unwrap();

    let teacher_before = teacher.flat_params();
    let params_before = student.named_params();

    let weights = LossWeights::default();
    let mut adam = Adam::new(0.9, 0.999);
    let batch = 8.min(clips.len());
    for step in 0..10 {
        let picks: Vec<&STClip> =
            (0..batch).map(|i| &clips[(step * batch + i) % clips.len()]).collect();
        let (c0, h0, w0) = picks[0].past_frames_channel_stacked().dim();
        let mut x = Array4::<f32>::zeros((batch, c0, h0, w0));
        for (i, clip) in picks.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&clip.past_frames_channel_stacked());
        }
        let (pred, taps, cache) = student.forward_train(&x.view()).unwrap();
        let mut gpred = Array4::<f32>::zeros(pred.dim());
        let mut gtaps: BTreeMap<usize, Array4<f32>> =
            taps.iter().map(|(k, v)| (*k, Array4::zeros(v.dim()))).collect();
        let inv_n = 1.0 / batch as f64;
        let k_blocks = taps.len() as f64;
        for (i, clip) in picks.iter().enumerate() {
            let target = clip.target_frame();
            let (_, ge) = prediction_loss_grad(
                &pred.index_axis(Axis(0), i),
                &target.view(),
                Reduction::Mean,
            )
            .unwrap();
            let (_, gg) = gradient_loss_grad(
                &pred.index_axis(Axis(0), i),
                &target.view(),
                weights.alpha,
                Reduction::Mean,
            )
            .unwrap();
            let mut gp = gpred.index_axis_mut(Axis(0), i);
            gp.scaled_add((weights.lambda_e * inv_n) as f32, &ge);
            gp.scaled_add((weights.lambda_g * inv_n) as f32, &gg);
            let t_taps = teacher.tap(&target).unwrap();
            for (k, tap_batch) in &taps {
                let (_, gc) = feature_inconsistency_block_grad(
                    &tap_batch.index_axis(Axis(0), i),
                    &t_taps[k].view(),
                )
                .unwrap();
                gtaps
                    .get_mut(k)
                    .unwrap()
                    .index_axis_mut(Axis(0), i)
                    .scaled_add((weights.lambda_c * inv_n / k_blocks) as f32, &gc);
            }
        }
        let grads = student.backward(&cache, &gpred, &gtaps);
        adam.step(&mut student.param_slices_mut(), &grads, 1e-3);
    }

    let teacher_after = teacher.flat_params();
    assert_eq!(teacher_before.len(), teacher_after.len());
    let frozen = teacher_before
        .iter()
        .zip(teacher_after.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(frozen, "criterion 04 FAIL: teacher parameters changed during training");

    let params_after = student.named_params();
    for section in ["enc", "bott", "dec"] {
        let moved = params_before.iter().any(|(name, before)| {
            pkgnet::model::Student::param_section(name) == section
                && before
                    .iter()
                    .zip(params_after[name].iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
        });
        assert!(moved, "criterion 04 FAIL: no parameter moved in student section '{section}'");
    }
    pass(4, "10 steps: teacher bitwise frozen; enc, bott and dec all moved");
}

// ---------------------------------------------------------------------------
// Criterion 5: the rank-based AUROC equals an O(n^2) pairwise oracle on 200
// random instances within 1e-9.
// ---------------------------------------------------------------------------

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut won = 0.0f64;
    let mut pairs = 0.0f64;
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != 0 {
                continue;
            }
            pairs += 1.0;
            won += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    won / pairs
}

#[test]
fn c05_auroc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(2..=80);
        // Half the cases draw from a coarse grid so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1; // force both classes present
        labels[n - 1] = 0;
        let fast = auroc(&scores, &labels).unwrap();
        let slow = pairwise_auroc(&scores, &labels);
        worst = worst.max((fast - slow).abs());
    }
    assert!(worst <= 1e-9, "criterion 05 FAIL: max |rank - pairwise| = {worst:.3e} > 1e-9");
    pass(5, &format!("200 random instances, max abs difference {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// Criterion 6: combined_score reproduces hand-computed cases exactly,
// including the all-at-mean zero case under the ped2 preset weights.
// ---------------------------------------------------------------------------

#[test]
fn c06_combined_score_hand_cases() {
    // Every component exactly at its calibration mean scores exactly zero,
    // whatever the weights (here the ped2 preset's 0.01 / 0.65 / 0.35).
    let stats = ScoreStats {
        mu_e: 0.4,
        sigma_e: 2.0,
        mu_c: [(1, 0.1), (2, 0.2)].into_iter().collect(),
        sigma_c: [(1, 1.5), (2, 3.0)].into_iter().collect(),
        min_combined: 0.0,
    };
    let weights = ScoreWeights {
        w_e: 0.01,
        w_c: [(1, 0.65), (2, 0.35)].into_iter().collect(),
    };
    let at_mean = ClipScore {
        video_id: "v".to_string(),
        frame_index: 0,
        s_e: 0.4,
        s_c: [(1, 0.1), (2, 0.2)].into_iter().collect(),
    };
    assert_eq!(combined_score(&at_mean, &stats, &weights).unwrap(), 0.0);

    // Unit moments, z-scores (2, 1, -1), weights (0.5, 0.25, 0.25) -> exactly 1.
    let unit = ScoreStats {
        mu_e: 0.0,
        sigma_e: 1.0,
        mu_c: [(1, 0.0), (2, 0.0)].into_iter().collect(),
        sigma_c: [(1, 1.0), (2, 1.0)].into_iter().collect(),
        min_combined: 0.0,
    };
    let w = ScoreWeights { w_e: 0.5, w_c: [(1, 0.25), (2, 0.25)].into_iter().collect() };
    let cs = ClipScore {
        video_id: "v".to_string(),
        frame_index: 1,
        s_e: 2.0,
        s_c: [(1, 1.0), (2, -1.0)].into_iter().collect(),
    };
    assert_eq!(combined_score(&cs, &unit, &w).unwrap(), 1.0);

    // Non-unit moments chosen so both z-scores are exactly 2.
    let stats2 = ScoreStats {
        mu_e: 1.0,
        sigma_e: 2.0,
        mu_c: [(1, 0.0)].into_iter().collect(),
        sigma_c: [(1, 4.0)].into_iter().collect(),
        min_combined: 0.0,
    };
    let w2 = ScoreWeights { w_e: 0.5, w_c: [(1, 0.5)].into_iter().collect() };
    let cs2 = ClipScore {
        video_id: "v".to_string(),
        frame_index: 2,
        s_e: 5.0,
        s_c: [(1, 8.0)].into_iter().collect(),
    };
    assert_eq!(combined_score(&cs2, &stats2, &w2).unwrap(), 2.0);

    pass(6, "all-at-mean case is exactly 0; two hand-computed cases exact");
}

// ---------------------------------------------------------------------------
// Criteria 7 and 8 share one desk-scale run of the full pipeline: the shipped
// synthetic preset trained in all three modes on the same seed and data.
// ---------------------------------------------------------------------------

struct DeskRun {
    _dir: tempfile::TempDir,
    pkg_auroc: f64,
    kd_auroc: f64,
    ae_auroc: f64,
    pkg_pipeline_secs: f64,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let preset = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth.toml");
        let overrides =
            vec![("data.root".to_string(), root.to_string_lossy().into_owned())];
        let base = load_config(Some(&preset), &overrides).unwrap();
        write_synthetic_dataset(&root, &base.data.synthetic, base.data.synthetic_seed).unwrap();

        let run_stage = |config: &pkgnet::config::RunConfig, run: &std::path::Path| -> f64 {
            pipeline::train(config, run).unwrap();
            pipeline::calibrate(config, run).unwrap();
            pipeline::score(config, run).unwrap();
            pipeline::evaluate_run(config, run).unwrap().auroc_micro
        };

        let started = Instant::now();
        let pkg_auroc = run_stage(&base, &dir.path().join("run_pkg"));
        let pkg_pipeline_secs = started.elapsed().as_secs_f64();

        // Ablations: same data, seed and budget; only the mode changes, with
        // the score weights renormalized over the components each mode has.
        let mut kd = base.clone();
        kd.student.mode = Mode::KdOnly;
        kd.score.w_e = 0.0;
        let total: f64 = kd.score.w_c.values().sum();
        for v in kd.score.w_c.values_mut() {
            *v /= total;
        }
        kd.validate().unwrap();
        let kd_auroc = run_stage(&kd, &dir.path().join("run_kd"));

        let mut ae = base.clone();
        ae.student.mode = Mode::AeOnly;
        ae.score.w_e = 1.0;
        ae.score.w_c.clear();
        ae.validate().unwrap();
        let ae_auroc = run_stage(&ae, &dir.path().join("run_ae"));

        DeskRun { _dir: dir, pkg_auroc, kd_auroc, ae_auroc, pkg_pipeline_secs }
    })
}

#[test]
fn c07_desk_scale_pipeline_beats_ablations() {
    let desk = desk_run();
    assert!(
        desk.pkg_pipeline_secs <= 900.0,
        "criterion 07 FAIL: pipeline took {:.0}s > 900s",
        desk.pkg_pipeline_secs
    );
    assert!(
        desk.pkg_auroc >= 0.85,
        "criterion 07 FAIL: micro AUROC {:.4} < 0.85",
        desk.pkg_auroc
    );
    assert!(
        desk.pkg_auroc >= desk.ae_auroc && desk.pkg_auroc >= desk.kd_auroc,
        "criterion 07 FAIL: joint {:.4} vs prediction-only {:.4}, distillation-only {:.4}",
        desk.pkg_auroc,
        desk.ae_auroc,
        desk.kd_auroc
    );
    pass(
        7,
        &format!(
            "micro AUROC {:.4} (prediction-only {:.4}, distillation-only {:.4}) in {:.0}s",
            desk.pkg_auroc, desk.ae_auroc, desk.kd_auroc, desk.pkg_pipeline_secs
        ),
    );
}

#[test]
fn c08_benchmark_numbers_out_of_desk_reach() {
    // The desk run stays well below the benchmark-scale numbers; reaching
    // those needs the real datasets and pretrained weights. That recipe is
    // documented (README "Benchmark-scale runs" + configs/ped2.toml) but
    // deliberately not executed here.
    let desk = desk_run();
    assert!(
        desk.pkg_auroc < 0.995,
        "criterion 08 FAIL: desk-scale run unexpectedly reached benchmark numbers ({:.4})",
        desk.pkg_auroc
    );

    let crate_root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let readme = std::fs::read_to_string(crate_root.join("README.md")).unwrap();
    assert!(
        readme.contains("98.5"),
        "criterion 08 FAIL: README does not document the benchmark-scale target"
    );
    let ped2 = load_config(Some(&crate_root.join("configs/ped2.toml")), &[]).unwrap();
    assert_eq!(ped2.teacher.backbone, Backbone::Resnet50);
    assert_eq!(ped2.train.epochs, 120);
    assert_eq!(ped2.score.w_c.get(&1), Some(&0.65));

    pass(
        8,
        &format!(
            "desk AUROC {:.4} < 0.995; benchmark recipe documented, not executed",
            desk.pkg_auroc
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: a checkpoint survives a save/load round trip with scoring
// drift <= 1e-6, and repeated eval-mode forwards are bitwise stable.
// ---------------------------------------------------------------------------

#[test]
fn c09_determinism_roundtrip_and_repeated_forward() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let mut config = pkgnet::config::RunConfig::default();
    config.data.root = root.clone();
    config.data.synthetic.n_train_videos = 2;
    config.data.synthetic.n_test_videos = 2;
    config.data.synthetic.frames_per_video = 24;
    config.data.synthetic.image_size = 48;
    config.data.synthetic.objects_per_video = 1;
    config.teacher.backbone = Backbone::Resnet18;
    config.teacher.pretrained_weights = "seeded:5".to_string();
    config.student.base_width = 4;
    config.student.bottleneck_depth = 1;
    config.train.batch_size = 16;
    config.train.epochs = 2;
    config.score.smooth_window = 3;
    config.score.w_e = 0.2;
    config.score.w_c = [(1, 0.4), (2, 0.4)].into_iter().collect();
    write_synthetic_dataset(&root, &config.data.synthetic, 7).unwrap();

    let run = dir.path().join("run");
    pipeline::train(&config, &run).unwrap();
    pipeline::calibrate(&config, &run).unwrap();
    let first = pipeline::score(&config, &run).unwrap();

    // Round-trip the final checkpoint through save/load, then score again.
    let ckpt_path = run.join("student_final.ckpt");
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    save_checkpoint(
        &ckpt_path,
        &ckpt.student,
        &ckpt.teacher_spec,
        ckpt.optimizer.as_ref(),
        ckpt.epoch,
        &ckpt.config_toml,
    )
    .unwrap();
    let second = pipeline::score(&config, &run).unwrap();

    let mut drift = 0.0f64;
    for (a, b) in first.videos.iter().zip(second.videos.iter()) {
        assert_eq!(a.video_id, b.video_id);
        for (x, y) in a.smoothed.iter().zip(b.smoothed.iter()) {
            drift = drift.max((x - y).abs());
        }
    }
    assert!(drift <= 1e-6, "criterion 09 FAIL: round-trip scoring drift {drift:.3e} > 1e-6");

    // Repeated eval-mode forwards on the same input are bitwise identical.
    let spec = config.teacher.clone();
    let student = load_checkpoint(&ckpt_path).unwrap().student;
    let teacher = build_teacher(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let cube = Array4::from_shape_fn((5, 3, 32, 32), |_| rng.random::<f32>());
    let clip = STClip { video_id: "v".to_string(), frame_index: 4, cube };
    let out1 = forward(&student, Some(&teacher), &clip).unwrap();
    let out2 = forward(&student, Some(&teacher), &clip).unwrap();
    let bitwise = out1
        .prediction
        .iter()
        .zip(out2.prediction.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && out1.student_taps.iter().all(|(k, v)| {
            v.iter().zip(out2.student_taps[k].iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    assert!(bitwise, "criterion 09 FAIL: repeated forward passes differ");

    pass(9, &format!("round-trip drift {drift:.1e}; repeated forwards bitwise identical"));
}
