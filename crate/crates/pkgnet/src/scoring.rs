//! Anomaly scoring: per-clip score components, calibration of their moments
//! on training data, the z-normalized weighted combination, object-to-frame
//! aggregation, and median smoothing of per-video score series.
//!
//! The flow is deliberately split into pure stages so each is testable on its
//! own: the pipeline runs the model to produce [`ClipScore`]s, [`calibrate`]
//! turns the training-set scores into [`ScoreStats`], and [`score_video`]
//! assembles one test video's [`ScoreSeries`] from its clip scores.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::STClip;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::ForwardOutput;

/// Score components of one object clip: the prediction error and one
/// inconsistency value per tapped block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipScore {
    pub video_id: String,
    pub frame_index: usize,
    pub s_e: f64,
    pub s_c: BTreeMap<usize, f64>,
}

/// Component moments measured on the training set, plus the no-object
/// fallback score (the minimum combined score seen during calibration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mu_e: f64,
    pub sigma_e: f64,
    pub mu_c: BTreeMap<usize, f64>,
    pub sigma_c: BTreeMap<usize, f64>,
    pub min_combined: f64,
}

/// Combination weights for the z-normalized components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_e: f64,
    pub w_c: BTreeMap<usize, f64>,
}

impl ScoreWeights {
    /// Weights must be nonnegative, cover exactly `blocks`, and not all zero.
    pub fn validate(&self, blocks: &[usize]) -> Result<()> {
        let mut violations = Vec::new();
        let keys: Vec<usize> = self.w_c.keys().copied().collect();
        if keys != blocks {
            violations.push(format!(
                "score weights cover blocks {keys:?}, but the model taps blocks {blocks:?}"
            ));
        }
        if self.w_e < 0.0 || self.w_c.values().any(|w| *w < 0.0) {
            violations.push("score weights must be nonnegative".to_string());
        }
        if self.w_e == 0.0 && self.w_c.values().all(|w| *w == 0.0) {
            violations.push("at least one score weight must be positive".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }
}

/// How per-object scores on one frame collapse to a frame score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatePolicy {
    Max,
    TopKMean(usize),
}

impl AggregatePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatePolicy::TopKMean(0) => {
                Err(Error::Config(vec!["top-k aggregation needs k >= 1".to_string()]))
            }
            _ => Ok(()),
        }
    }
}

/// One test video's frame-level scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    /// Combined score per frame, before smoothing.
    pub raw: Vec<f64>,
    /// Median-smoothed combined score per frame; this is what eval consumes.
    pub smoothed: Vec<f64>,
    /// Aggregated prediction-error component per frame (diagnostic).
    pub s_e: Vec<f64>,
    /// Aggregated per-block inconsistency component per frame (diagnostic).
    pub s_c: BTreeMap<usize, Vec<f64>>,
}

/// Everything a standalone eval run needs: stats and weights used, the
/// aggregation/smoothing settings, and every video's series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFile {
    pub stats: ScoreStats,
    pub weights: ScoreWeights,
    pub policy: AggregatePolicy,
    pub smooth_window: usize,
    pub videos: Vec<ScoreSeries>,
}

impl ScoreFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Eval(format!("score file serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Eval(format!("{} is not a valid score file: {e}", path.display()))
        })
    }
}

/// Computes one clip's score components from a model forward pass: the mean
/// squared prediction error against the clip's final frame, and the spatial
/// mean of each tapped block's inconsistency map.
pub fn clip_scores(clip: &STClip, output: &ForwardOutput) -> Result<ClipScore> {
    let target = clip.target_frame();
    let s_e = loss::prediction_loss(&output.prediction.view(), &target.view())?;
    let mut s_c = BTreeMap::new();
    for (block, st) in &output.student_taps {
        let tt = output.teacher_taps.get(block).ok_or_else(|| {
            Error::Model(format!("clip scoring: student tap {block} has no teacher tap"))
        })?;
        s_c.insert(*block, loss::feature_inconsistency_block(&st.view(), &tt.view())?);
    }
    Ok(ClipScore { video_id: clip.video_id.clone(), frame_index: clip.frame_index, s_e, s_c })
}

/// Spread estimates below this are floored (and warned about): a component
/// with no spread on the training set carries no ranking signal, and a
/// zero σ would turn the z-normalization into a division by zero.
const SIGMA_FLOOR: f64 = 1e-8;

/// Which denominator the standard deviation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdDenominator {
    /// Sample (Bessel-corrected) standard deviation.
    #[default]
    NMinus1,
    /// Population standard deviation.
    N,
}

/// Mean and standard deviation. Values are sorted before reduction so the
/// result depends only on the multiset, never on stream order.
fn mean_and_std(values: &[f64], denom: StdDenominator) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let ss = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let var = match denom {
        StdDenominator::NMinus1 => ss / (n - 1.0),
        StdDenominator::N => ss / n,
    };
    (mean, var.sqrt())
}

/// Measures component moments over the training-set clip scores and the
/// minimum combined score (the no-object fallback). Returns the stats plus
/// one warning per component whose spread had to be floored.
pub fn calibrate(
    scores: &[ClipScore],
    weights: &ScoreWeights,
    denom: StdDenominator,
) -> Result<(ScoreStats, Vec<String>)> {
    if scores.len() < 2 {
        return Err(Error::Eval(format!(
            "calibration needs at least 2 clip scores, got {}",
            scores.len()
        )));
    }
    let blocks: Vec<usize> = scores[0].s_c.keys().copied().collect();
    for cs in scores {
        let keys: Vec<usize> = cs.s_c.keys().copied().collect();
        if keys != blocks {
            return Err(Error::Eval(format!(
                "calibration clip {}@{} covers blocks {keys:?}, expected {blocks:?}",
                cs.video_id, cs.frame_index
            )));
        }
    }
    weights.validate(&blocks)?;

    let mut warnings = Vec::new();
    let mut floored = |label: String, sigma: f64| -> f64 {
        if sigma < SIGMA_FLOOR {
            warnings.push(format!(
                "{label} has near-zero spread ({sigma:.3e}); floored to {SIGMA_FLOOR:.0e}"
            ));
            SIGMA_FLOOR
        } else {
            sigma
        }
    };

    let e_values: Vec<f64> = scores.iter().map(|s| s.s_e).collect();
    let (mu_e, sd_e) = mean_and_std(&e_values, denom);
    let sigma_e = floored("prediction-error component".to_string(), sd_e);

    let mut mu_c = BTreeMap::new();
    let mut sigma_c = BTreeMap::new();
    for &b in &blocks {
        let values: Vec<f64> = scores.iter().map(|s| s.s_c[&b]).collect();
        let (mu, sd) = mean_and_std(&values, denom);
        mu_c.insert(b, mu);
        sigma_c.insert(b, floored(format!("block-{b} inconsistency component"), sd));
    }

    let mut stats =
        ScoreStats { mu_e, sigma_e, mu_c, sigma_c, min_combined: f64::INFINITY };
    for cs in scores {
        let s = combined_score(cs, &stats, weights)?;
        stats.min_combined = stats.min_combined.min(s);
    }
    Ok((stats, warnings))
}

/// Weighted sum of z-normalized components:
/// `w_e·(S_e−μ_e)/σ_e + Σ_k w_c^k·(S_c^k−μ_c^k)/σ_c^k`.
pub fn combined_score(cs: &ClipScore, stats: &ScoreStats, weights: &ScoreWeights) -> Result<f64> {
    if cs.s_c.keys().ne(weights.w_c.keys()) || cs.s_c.keys().ne(stats.mu_c.keys()) {
        return Err(Error::Eval(format!(
            "combined score: clip blocks {:?} do not match weights {:?} / stats {:?}",
            cs.s_c.keys().collect::<Vec<_>>(),
            weights.w_c.keys().collect::<Vec<_>>(),
            stats.mu_c.keys().collect::<Vec<_>>(),
        )));
    }
    let mut s = weights.w_e * (cs.s_e - stats.mu_e) / stats.sigma_e;
    for (b, v) in &cs.s_c {
        s += weights.w_c[b] * (v - stats.mu_c[b]) / stats.sigma_c[b];
    }
    Ok(s)
}

/// Collapses the per-object scores of one frame; `None` when the frame has
/// no objects (the caller substitutes the no-object fallback).
pub fn aggregate_frame(object_scores: &[f64], policy: AggregatePolicy) -> Option<f64> {
    if object_scores.is_empty() {
        return None;
    }
    match policy {
        AggregatePolicy::Max => {
            Some(object_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        AggregatePolicy::TopKMean(k) => {
            let mut sorted = object_scores.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let take = k.min(sorted.len());
            Some(sorted[..take].iter().sum::<f64>() / take as f64)
        }
    }
}

/// Sliding median with edge replication (indices clamp to the series ends);
/// window 1 is the identity.
pub fn smooth_series(raw: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(vec![format!(
            "smoothing window must be odd and >= 1, got {window}"
        )]));
    }
    if raw.is_empty() || window == 1 {
        return Ok(raw.to_vec());
    }
    let r = window / 2;
    let n = raw.len();
    let mut out = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(window);
    for i in 0..n {
        buf.clear();
        for o in 0..window {
            let idx = (i + o).saturating_sub(r).min(n - 1);
            buf.push(raw[idx]);
        }
        buf.sort_by(f64::total_cmp);
        out.push(buf[r]);
    }
    Ok(out)
}

/// Assembles one video's frame-level series from its clip scores: combine →
/// aggregate per frame → smooth. Frames without objects take
/// `stats.min_combined`; their diagnostic component entries take the
/// component's calibration mean (a neutral value, since only the combined
/// series feeds evaluation).
pub fn score_video(
    video_id: &str,
    frame_count: usize,
    scores: &[ClipScore],
    stats: &ScoreStats,
    weights: &ScoreWeights,
    policy: AggregatePolicy,
    window: usize,
) -> Result<ScoreSeries> {
    policy.validate()?;
    let mut per_frame: Vec<Vec<&ClipScore>> = vec![Vec::new(); frame_count];
    for cs in scores {
        if cs.video_id != video_id {
            return Err(Error::Eval(format!(
                "score_video({video_id}): got a clip from video {}",
                cs.video_id
            )));
        }
        if cs.frame_index >= frame_count {
            return Err(Error::Eval(format!(
                "score_video({video_id}): clip at frame {} but the video has {frame_count} frames",
                cs.frame_index
            )));
        }
        per_frame[cs.frame_index].push(cs);
    }

    let blocks: Vec<usize> = stats.mu_c.keys().copied().collect();
    let mut raw = Vec::with_capacity(frame_count);
    let mut s_e = Vec::with_capacity(frame_count);
    let mut s_c: BTreeMap<usize, Vec<f64>> =
        blocks.iter().map(|b| (*b, Vec::with_capacity(frame_count))).collect();
    for frame in &per_frame {
        let combined: Vec<f64> = frame
            .iter()
            .map(|cs| combined_score(cs, stats, weights))
            .collect::<Result<_>>()?;
        raw.push(aggregate_frame(&combined, policy).unwrap_or(stats.min_combined));

        let e_vals: Vec<f64> = frame.iter().map(|cs| cs.s_e).collect();
        s_e.push(aggregate_frame(&e_vals, policy).unwrap_or(stats.mu_e));
        for &b in &blocks {
            let c_vals: Vec<f64> = frame.iter().map(|cs| cs.s_c[&b]).collect();
            s_c.get_mut(&b).unwrap().push(aggregate_frame(&c_vals, policy).unwrap_or(stats.mu_c[&b]));
        }
    }

    let smoothed = smooth_series(&raw, window)?;
    Ok(ScoreSeries { video_id: video_id.to_string(), raw, smoothed, s_e, s_c })
}
