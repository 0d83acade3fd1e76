//! Frame-level evaluation of anomaly scores against ground-truth labels.
//!
//! The headline metric is micro AUROC: every frame's combined score is ranked
//! against every other frame's, across all test videos at once. Per-video
//! AUROCs are reported alongside as diagnostics, but only for videos that
//! contain both normal and anomalous frames (AUROC is undefined otherwise).
//!
//! This module is pure post-processing: it consumes a [`ScoreFile`] written by
//! the scoring stage plus label tracks, and never touches the model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabelTrack;
use crate::error::{Error, Result};
use crate::scoring::{ScoreFile, ScoreSeries};

/// Which per-frame score column feeds the AUROC computation.
///
/// `Smoothed` is the default and what headline numbers use; `Raw` exists so
/// the effect of median smoothing can be ablated without re-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSelection {
    #[default]
    Smoothed,
    Raw,
}

impl ScoreSelection {
    fn column<'a>(&self, series: &'a ScoreSeries) -> &'a [f64] {
        match self {
            Self::Smoothed => &series.smoothed,
            Self::Raw => &series.raw,
        }
    }
}

/// Result of one evaluation run. Serializable so downstream tooling can
/// consume it without re-ranking anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AUROC over the concatenation of all videos' frames.
    pub auroc_micro: f64,
    /// AUROC per video, present only for videos with both classes.
    pub per_video_auroc: BTreeMap<String, f64>,
    /// Total frames ranked.
    pub n_frames: usize,
    /// Frames labelled anomalous among them.
    pub n_anomalous: usize,
    /// Which score column was ranked.
    pub score_selection: ScoreSelection,
    /// Hash of the calibration and combination settings the scores were
    /// produced under, so a report can be matched to its scoring run.
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Eval(format!("report serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Eval(format!("malformed report {}: {e}", path.display())))
    }
}

/// Area under the ROC curve via the rank statistic: sort once, average ranks
/// over tie groups, and normalize the positive rank sum. Tied score pairs
/// contribute 1/2, exactly as in the O(n^2) pairwise count.
///
/// `labels` must be 0/1 with both classes present, aligned with `scores`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Eval(format!("auroc: non-finite score {bad}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Eval(format!("auroc: label {bad} is not 0/1")));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(format!(
            "auroc needs both classes; got {n_pos} anomalous / {n_neg} normal frames"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order; every member of a group gets
    // the group's average 1-based rank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let min_pos_rank_sum = (n_pos * (n_pos + 1) / 2) as f64;
    Ok((rank_sum_pos - min_pos_rank_sum) / (n_pos as f64 * n_neg as f64))
}

/// Hex SHA-256 over the score file's calibration header (stats, weights,
/// aggregation policy, smoothing window). Two score files produced under the
/// same settings fingerprint identically regardless of which videos they hold.
pub fn config_fingerprint(scores: &ScoreFile) -> String {
    #[derive(Serialize)]
    struct Header<'a> {
        stats: &'a crate::scoring::ScoreStats,
        weights: &'a crate::scoring::ScoreWeights,
        policy: &'a crate::scoring::AggregatePolicy,
        smooth_window: usize,
    }
    let header = Header {
        stats: &scores.stats,
        weights: &scores.weights,
        policy: &scores.policy,
        smooth_window: scores.smooth_window,
    };
    // BTreeMap keys serialize in sorted order, so the JSON is canonical.
    let bytes = serde_json::to_vec(&header).expect("score header is always serializable");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").unwrap();
    }
    hex
}

/// Looks up each scored video's label track, checks frame counts match, and
/// returns `(series, track)` pairs sorted by video id.
///
/// Label tracks covering videos that were not scored are ignored, so a
/// whole-dataset label file can be reused for partial runs.
fn pair_with_labels<'a>(
    scores: &'a ScoreFile,
    labels: &'a [LabelTrack],
) -> Result<Vec<(&'a ScoreSeries, &'a LabelTrack)>> {
    let mut by_id: BTreeMap<&str, &LabelTrack> = BTreeMap::new();
    for track in labels {
        if by_id.insert(&track.video_id, track).is_some() {
            return Err(Error::Eval(format!(
                "duplicate label track for video {}",
                track.video_id
            )));
        }
    }
    let mut pairs = Vec::with_capacity(scores.videos.len());
    for series in &scores.videos {
        let track = by_id.get(series.video_id.as_str()).ok_or_else(|| {
            Error::Eval(format!("no label track for scored video {}", series.video_id))
        })?;
        if series.smoothed.len() != track.labels.len() {
            return Err(Error::Eval(format!(
                "video {}: {} frames scored but {} labelled",
                series.video_id,
                series.smoothed.len(),
                track.labels.len()
            )));
        }
        pairs.push((series, *track));
    }
    pairs.sort_by(|a, b| a.0.video_id.cmp(&b.0.video_id));
    Ok(pairs)
}

/// Ranks the selected score column of every video against the frame labels
/// and reports micro AUROC plus per-video diagnostics.
///
/// Errors if any scored video lacks a label track, a track's length differs
/// from the score series, or the test set as a whole is single-class. The
/// report is invariant to the order of videos in either input.
pub fn evaluate(
    scores: &ScoreFile,
    labels: &[LabelTrack],
    selection: ScoreSelection,
) -> Result<EvalReport> {
    let pairs = pair_with_labels(scores, labels)?;
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video_auroc = BTreeMap::new();
    for (series, track) in &pairs {
        let column = selection.column(series);
        all_scores.extend_from_slice(column);
        all_labels.extend_from_slice(&track.labels);
        let n_pos = track.labels.iter().filter(|&&l| l == 1).count();
        if n_pos > 0 && n_pos < track.labels.len() {
            per_video_auroc.insert(series.video_id.clone(), auroc(column, &track.labels)?);
        }
    }
    let auroc_micro = auroc(&all_scores, &all_labels)?;
    let n_anomalous = all_labels.iter().filter(|&&l| l == 1).count();
    Ok(EvalReport {
        auroc_micro,
        per_video_auroc,
        n_frames: all_labels.len(),
        n_anomalous,
        score_selection: selection,
        config_fingerprint: config_fingerprint(scores),
    })
}

/// Runs of consecutive frames labelled 1, as inclusive `(start, end)` pairs.
fn anomaly_runs(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, start) {
            (1, None) => start = Some(i),
            (0, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, labels.len() - 1));
    }
    runs
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 240.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 12.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 26.0;

/// One score-curve plot: raw combined score in grey, smoothed in blue, with
/// labelled anomalous stretches shaded. All coordinates are written with
/// fixed precision so reruns are byte-identical.
fn render_curve_svg(series: &ScoreSeries, labels: &[u8]) -> String {
    let n = series.raw.len();
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in series.raw.iter().chain(&series.smoothed) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() || hi <= lo {
        // Flat (or empty) series: pick any band so the geometry stays valid.
        lo = if lo.is_finite() { lo - 0.5 } else { 0.0 };
        hi = lo + 1.0;
    }
    let x = |i: usize| {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        MARGIN_L + t * plot_w
    };
    let y = |v: f64| MARGIN_T + (1.0 - (v - lo) / (hi - lo)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>");
    for (a, b) in anomaly_runs(labels) {
        let x0 = x(a);
        let w = (x(b) - x0).max(1.0);
        let _ = writeln!(
            svg,
            "<rect class=\"anomaly\" x=\"{x0:.2}\" y=\"{MARGIN_T:.2}\" width=\"{w:.2}\" \
             height=\"{plot_h:.2}\" fill=\"#fddcdc\"/>"
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN_L:.2}\" y=\"{MARGIN_T:.2}\" width=\"{plot_w:.2}\" \
         height=\"{plot_h:.2}\" fill=\"none\" stroke=\"#999\"/>"
    );
    for (column, stroke) in [(&series.raw, "#bbbbbb"), (&series.smoothed, "#1565c0")] {
        if column.is_empty() {
            continue;
        }
        let mut points = String::new();
        for (i, v) in column.iter().enumerate() {
            let _ = write!(points, "{:.2},{:.2} ", x(i), y(*v));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.2\"/>",
            points.trim_end()
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN_L}\" y=\"14\" font-family=\"monospace\" font-size=\"11\">{} \
         (n={n})</text>",
        series.video_id
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"10\">{hi:.3}</text>",
        MARGIN_T + 4.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"10\">{lo:.3}</text>",
        MARGIN_T + plot_h
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes one SVG plot per video plus a single `curves.csv` holding every
/// per-frame column (label, raw, smoothed, and each component) for offline
/// analysis. Returns the paths written, sorted. Output is deterministic:
/// running twice over the same inputs produces byte-identical files.
pub fn export_curves(
    scores: &ScoreFile,
    labels: &[LabelTrack],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let pairs = pair_with_labels(scores, labels)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let blocks: Vec<usize> = scores.stats.mu_c.keys().copied().collect();

    let csv_path = out_dir.join("curves.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| {
        Error::Eval(format!("cannot write {}: {e}", csv_path.display()))
    })?;
    let mut header = vec![
        "video_id".to_string(),
        "frame".to_string(),
        "label".to_string(),
        "raw".to_string(),
        "smoothed".to_string(),
        "s_e".to_string(),
    ];
    header.extend(blocks.iter().map(|k| format!("s_c_{k}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::Eval(format!("csv write failed: {e}")))?;

    let mut paths = vec![csv_path.clone()];
    for (series, track) in &pairs {
        for i in 0..series.raw.len() {
            let mut record = vec![
                series.video_id.clone(),
                i.to_string(),
                track.labels[i].to_string(),
                series.raw[i].to_string(),
                series.smoothed[i].to_string(),
                series.s_e[i].to_string(),
            ];
            for k in &blocks {
                let column = series.s_c.get(k).ok_or_else(|| {
                    Error::Eval(format!(
                        "video {} has no component column for block {k}",
                        series.video_id
                    ))
                })?;
                record.push(column[i].to_string());
            }
            writer
                .write_record(&record)
                .map_err(|e| Error::Eval(format!("csv write failed: {e}")))?;
        }
        let svg_path = out_dir.join(format!("curve_{}.svg", series.video_id));
        std::fs::write(&svg_path, render_curve_svg(series, &track.labels))
            .map_err(|e| Error::io(&svg_path, e))?;
        paths.push(svg_path);
    }
    writer
        .flush()
        .map_err(|e| Error::Eval(format!("csv write failed: {e}")))?;
    paths.sort();
    Ok(paths)
}
