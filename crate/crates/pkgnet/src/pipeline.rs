//! Run orchestration: training with the step-decayed Adam schedule, then
//! calibration, scoring, evaluation and plotting — each stage reading and
//! writing only documented artifacts inside one run directory, so any stage
//! can be re-run (or run on another machine) from the artifacts alone.
//!
//! Artifact layout under the run directory:
//!
//! ```text
//! manifest.json          resolved config, seed, artifact paths, loss history
//! ckpt_epoch_NNNN.ckpt   periodic checkpoints (optimizer state included)
//! student_final.ckpt     the checkpoint every later stage loads
//! stats.json             calibration statistics (written by `calibrate`)
//! scores.json            per-video score series (written by `score`)
//! report.json            evaluation report (written by `eval`)
//! curves/                plots + curve table (written by `plot`)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    assemble_stclips, load_boxes, read_label_file, FrameStore, LabelTrack, STClip,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_curves, EvalReport};
use crate::loss::{
    feature_inconsistency_block_grad, gradient_loss_grad, prediction_loss_grad, total_loss,
    LossBreakdown, LossWeights, Reduction,
};
use crate::model::{
    build_student, build_teacher, load_checkpoint, save_checkpoint, Mode, Student, TapSpec,
    Teacher,
};
use crate::nn::Adam;
use crate::scoring::{calibrate as calibrate_scores, clip_scores, score_video, ClipScore,
    ScoreFile, ScoreStats,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "student_final.ckpt";
pub const STATS_FILE: &str = "stats.json";
pub const SCORES_FILE: &str = "scores.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_DIR: &str = "curves";

/// Everything needed to reproduce scoring from the run directory alone:
/// the resolved config, the seed, where the checkpoints and stats live, and
/// the per-epoch loss trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    /// Checkpoint file names within the run directory, in write order.
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    /// Mean loss components per epoch, in epoch order.
    pub loss_history: Vec<LossBreakdown>,
    /// Set by `calibrate`.
    pub stats_file: Option<String>,
    /// Set by `score`.
    pub scores_file: Option<String>,
}

impl RunManifest {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Archive(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Archive(format!("malformed manifest {}: {e}", path.display())))
    }
}

/// One clip prepared for the training loop: stacked past frames, the frame to
/// predict, and the frozen teacher's features of that frame (computed once —
/// the teacher never changes, so neither do its taps).
struct TrainSample {
    x: Array3<f32>,
    target: Array3<f32>,
    teacher_taps: BTreeMap<usize, Array3<f32>>,
}

fn open_split(config: &RunConfig, split: &str) -> Result<(FrameStore, Vec<STClip>)> {
    let root = &config.data.root;
    let store = FrameStore::open(&root.join(split), config.data.channel_mode)?;
    let (boxes, report) =
        load_boxes(&root.join(format!("{split}_boxes.csv")), &store, config.data.confidence_threshold)?;
    let clips: Vec<STClip> = assemble_stclips(&store, &boxes, config.data.temporal_window)?
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(Error::Dataset(format!(
            "{split} split yields no clips ({} boxes read, {} kept)",
            report.rows_read, report.kept
        )));
    }
    Ok((store, clips))
}

/// Runs the teacher over every clip's target frame in batches.
fn precompute_teacher_taps(
    teacher: &Teacher,
    clips: &[STClip],
) -> Result<Vec<BTreeMap<usize, Array3<f32>>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(CHUNK) {
        let first = chunk[0].target_frame();
        let (c, h, w) = first.dim();
        let mut batch = Array4::<f32>::zeros((chunk.len(), c, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(&first);
        for (i, clip) in chunk.iter().enumerate().skip(1) {
            batch.index_axis_mut(Axis(0), i).assign(&clip.target_frame());
        }
        let taps = teacher.tap_batch(&batch.view())?;
        for i in 0..chunk.len() {
            out.push(
                taps.iter()
                    .map(|(k, v)| (*k, v.index_axis(Axis(0), i).to_owned()))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Learning rate at `epoch` under the step schedule: the base rate multiplied
/// by `lr_decay_factor` once per completed `lr_decay_every` epochs.
fn lr_at(epoch: usize, config: &RunConfig) -> f64 {
    let t = &config.train;
    t.learning_rate * t.lr_decay_factor.powi((epoch / t.lr_decay_every) as i32)
}

/// Per-batch loss evaluation: fills the prediction/tap cotangents (already
/// scaled for the batch mean) and returns the summed per-clip breakdowns.
#[allow(clippy::too_many_arguments)]
fn batch_losses(
    pred: &Array4<f32>,
    taps: &BTreeMap<usize, Array4<f32>>,
    samples: &[TrainSample],
    batch: &[usize],
    weights: &LossWeights,
    gpred: &mut Array4<f32>,
    gtaps: &mut BTreeMap<usize, Array4<f32>>,
    epoch: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let k_blocks = taps.len();
    let mut sums = LossBreakdown::default();
    for (bi, &ci) in batch.iter().enumerate() {
        let sample = &samples[ci];
        let pred_i = pred.index_axis(Axis(0), bi);
        let (l_e, g_e) =
            prediction_loss_grad(&pred_i, &sample.target.view(), Reduction::Mean)?;
        let (l_g, g_g) =
            gradient_loss_grad(&pred_i, &sample.target.view(), weights.alpha, Reduction::Mean)?;
        let mut l_c = 0.0;
        for (k, tap_batch) in taps {
            let t_tap = sample.teacher_taps.get(k).ok_or_else(|| {
                Error::Model(format!("teacher taps missing block {k} during training"))
            })?;
            let (c_k, g_ck) = feature_inconsistency_block_grad(
                &tap_batch.index_axis(Axis(0), bi),
                &t_tap.view(),
            )?;
            l_c += c_k / k_blocks as f64;
            let scale = (weights.lambda_c * inv_n / k_blocks as f64) as f32;
            gtaps
                .get_mut(k)
                .expect("gtaps mirrors taps")
                .index_axis_mut(Axis(0), bi)
                .scaled_add(scale, &g_ck);
        }
        let breakdown = total_loss(l_e, l_g, l_c, weights);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        let mut gp = gpred.index_axis_mut(Axis(0), bi);
        gp.scaled_add((weights.lambda_e * inv_n) as f32, &g_e);
        gp.scaled_add((weights.lambda_g * inv_n) as f32, &g_g);
        sums.l_e += breakdown.l_e;
        sums.l_g += breakdown.l_g;
        sums.l_c += breakdown.l_c;
        sums.total += breakdown.total;
    }
    Ok(sums)
}

/// Trains the student against the frozen teacher and writes checkpoints, the
/// loss history, and the manifest into `run_dir`. Existing artifacts there
/// are overwritten; a fixed seed fixes the whole trajectory.
pub fn train(config: &RunConfig, run_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_toml = config.to_toml();
    let mode = config.student.mode;
    let weights = config.loss.for_mode(mode);

    let (_store, clips) = open_split(config, "train")?;
    let teacher = match mode {
        Mode::AeOnly => None,
        Mode::Pkg | Mode::KdOnly => Some(build_teacher(&config.teacher)?),
    };
    let teacher_taps = match &teacher {
        Some(t) => precompute_teacher_taps(t, &clips)?,
        None => vec![BTreeMap::new(); clips.len()],
    };
    let samples: Vec<TrainSample> = clips
        .iter()
        .zip(teacher_taps)
        .map(|(clip, taps)| TrainSample {
            x: clip.past_frames_channel_stacked(),
            target: clip.target_frame(),
            teacher_taps: taps,
        })
        .collect();
    drop(clips);

    let tap_spec = TapSpec::build(&config.teacher, &config.student)?;
    let mut student = build_student(&config.student, tap_spec, config.train.seed)?;
    let mut adam = Adam::new(config.train.adam_betas.0, config.train.adam_betas.1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (c_in, side) = (student.input_channels(), crate::model::INPUT_SIDE);

    let mut manifest = RunManifest {
        config: config.clone(),
        seed: config.train.seed,
        checkpoints: Vec::new(),
        final_checkpoint: FINAL_CHECKPOINT.to_string(),
        loss_history: Vec::new(),
        stats_file: None,
        scores_file: None,
    };
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut best_total = f64::INFINITY;
    let mut stale_epochs = 0usize;

    for epoch in 0..config.train.epochs {
        let lr = lr_at(epoch, config);
        indices.shuffle(&mut rng);
        let mut epoch_sums = LossBreakdown::default();

        for (step, batch) in indices.chunks(config.train.batch_size).enumerate() {
            let mut xb = Array4::<f32>::zeros((batch.len(), c_in, side, side));
            for (bi, &ci) in batch.iter().enumerate() {
                xb.index_axis_mut(Axis(0), bi).assign(&samples[ci].x);
            }
            let (pred, taps, cache) = student.forward_train(&xb.view())?;
            let mut gpred = Array4::<f32>::zeros(pred.raw_dim());
            let mut gtaps: BTreeMap<usize, Array4<f32>> =
                taps.iter().map(|(k, v)| (*k, Array4::zeros(v.raw_dim()))).collect();
            let sums = batch_losses(
                &pred, &taps, &samples, batch, &weights, &mut gpred, &mut gtaps, epoch, step,
            )?;
            epoch_sums.l_e += sums.l_e;
            epoch_sums.l_g += sums.l_g;
            epoch_sums.l_c += sums.l_c;
            epoch_sums.total += sums.total;

            let grads = student.backward(&cache, &gpred, &gtaps);
            adam.step(&mut student.param_slices_mut(), &grads, lr);
        }

        let n = samples.len() as f64;
        let epoch_mean = LossBreakdown {
            l_e: epoch_sums.l_e / n,
            l_g: epoch_sums.l_g / n,
            l_c: epoch_sums.l_c / n,
            total: epoch_sums.total / n,
        };
        eprintln!(
            "epoch {epoch}: total {:.6} (l_e {:.6}, l_g {:.6}, l_c {:.6}) lr {lr:.2e}",
            epoch_mean.total, epoch_mean.l_e, epoch_mean.l_g, epoch_mean.l_c
        );
        manifest.loss_history.push(epoch_mean);

        if (epoch + 1) % config.train.checkpoint_every == 0 && epoch + 1 < config.train.epochs {
            let name = format!("ckpt_epoch_{:04}.ckpt", epoch + 1);
            save_checkpoint(
                &run_dir.join(&name),
                &student,
                &config.teacher,
                Some(&adam),
                epoch + 1,
                &config_toml,
            )?;
            manifest.checkpoints.push(name);
        }

        if let Some(patience) = config.train.patience {
            if epoch_mean.total < best_total {
                best_total = epoch_mean.total;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    eprintln!(
                        "stopping after epoch {epoch}: no improvement for {patience} epochs"
                    );
                    break;
                }
            }
        }
    }

    save_checkpoint(
        &run_dir.join(FINAL_CHECKPOINT),
        &student,
        &config.teacher,
        Some(&adam),
        manifest.loss_history.len(),
        &config_toml,
    )?;
    manifest.checkpoints.push(FINAL_CHECKPOINT.to_string());
    manifest.save(run_dir)?;
    Ok(manifest)
}

/// Loads the trained pair every post-training stage needs.
fn load_model(run_dir: &Path) -> Result<(Student, Option<Teacher>)> {
    let checkpoint = load_checkpoint(&run_dir.join(FINAL_CHECKPOINT))?;
    let teacher = match checkpoint.student.config().mode {
        Mode::AeOnly => None,
        Mode::Pkg | Mode::KdOnly => Some(build_teacher(&checkpoint.teacher_spec)?),
    };
    Ok((checkpoint.student, teacher))
}

/// Scores every clip of a split with the trained pair, in clip-stream order.
fn split_clip_scores(
    config: &RunConfig,
    split: &str,
    student: &Student,
    teacher: Option<&Teacher>,
) -> Result<(FrameStore, Vec<ClipScore>)> {
    let (store, clips) = open_split(config, split)?;
    let mut scores = Vec::with_capacity(clips.len());
    for clip in &clips {
        let output = crate::model::forward(student, teacher, clip)?;
        scores.push(clip_scores(clip, &output)?);
    }
    Ok((store, scores))
}

/// Computes score statistics over the training split with the trained model
/// and writes them to `stats.json`. Degenerate-component warnings are
/// returned (and printed by the CLI), not swallowed.
pub fn calibrate(config: &RunConfig, run_dir: &Path) -> Result<(ScoreStats, Vec<String>)> {
    config.validate()?;
    let mut manifest = RunManifest::load(run_dir)?;
    let (student, teacher) = load_model(run_dir)?;
    let (_store, scores) = split_clip_scores(config, "train", &student, teacher.as_ref())?;
    let (stats, warnings) =
        calibrate_scores(&scores, &config.score.weights(), config.score.std_denominator)?;

    let path = run_dir.join(STATS_FILE);
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Eval(format!("stats serialization failed: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    manifest.stats_file = Some(STATS_FILE.to_string());
    manifest.save(run_dir)?;
    Ok((stats, warnings))
}

fn load_stats(run_dir: &Path) -> Result<ScoreStats> {
    let path = run_dir.join(STATS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Eval(format!("malformed stats {}: {e}", path.display())))
}

/// Scores the test split video by video and writes `scores.json`. Every video
/// in the split appears in the file, including ones without a single object.
pub fn score(config: &RunConfig, run_dir: &Path) -> Result<ScoreFile> {
    config.validate()?;
    let mut manifest = RunManifest::load(run_dir)?;
    let (student, teacher) = load_model(run_dir)?;
    let stats = load_stats(run_dir)?;
    let weights = config.score.weights();
    let (store, scores) = split_clip_scores(config, "test", &student, teacher.as_ref())?;

    let mut by_video: BTreeMap<&str, Vec<ClipScore>> =
        store.videos().map(|m| (m.id.as_str(), Vec::new())).collect();
    for cs in scores {
        match by_video.get_mut(cs.video_id.as_str()) {
            Some(bucket) => bucket.push(cs),
            None => {
                return Err(Error::Dataset(format!(
                    "clip for unknown video '{}'",
                    cs.video_id
                )))
            }
        }
    }
    let mut videos = Vec::new();
    for meta in store.videos() {
        videos.push(score_video(
            &meta.id,
            meta.frame_count,
            &by_video[meta.id.as_str()],
            &stats,
            &weights,
            config.score.aggregate,
            config.score.smooth_window,
        )?);
    }
    let file = ScoreFile {
        stats,
        weights,
        policy: config.score.aggregate,
        smooth_window: config.score.smooth_window,
        videos,
    };
    file.save(&run_dir.join(SCORES_FILE))?;
    manifest.scores_file = Some(SCORES_FILE.to_string());
    manifest.save(run_dir)?;
    Ok(file)
}

fn load_test_labels(config: &RunConfig) -> Result<Vec<LabelTrack>> {
    read_label_file(&config.data.root.join("test_labels.json"))
}

/// Ranks the exported scores against the test labels and writes
/// `report.json`. Needs only `scores.json` and the label file.
pub fn evaluate_run(config: &RunConfig, run_dir: &Path) -> Result<EvalReport> {
    config.validate()?;
    let scores = ScoreFile::load(&run_dir.join(SCORES_FILE))?;
    let labels = load_test_labels(config)?;
    let report = evaluate(&scores, &labels, config.eval.score_selection)?;
    report.save(&run_dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Renders score curves for every scored video into `curves/`.
pub fn plot(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let scores = ScoreFile::load(&run_dir.join(SCORES_FILE))?;
    let labels = load_test_labels(config)?;
    export_curves(&scores, &labels, &run_dir.join(CURVES_DIR))
}
