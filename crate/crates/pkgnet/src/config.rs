//! Run configuration: one TOML file with a section per stage, defaults baked
//! in, and dot-path overrides applied on top (`train.learning_rate=5e-5`).
//!
//! The resolved [`RunConfig`] is what every pipeline stage consumes, what gets
//! snapshotted into checkpoints and the run manifest, and what round-trips
//! losslessly through TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ChannelMode, SyntheticConfig, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::ScoreSelection;
use crate::loss::LossWeights;
use crate::model::{Mode, StudentConfig, TeacherSpec};
use crate::scoring::{AggregatePolicy, ScoreWeights, StdDenominator};

fn default_root() -> PathBuf {
    PathBuf::from("data/synth")
}
fn default_temporal_window() -> usize {
    4
}
fn default_channel_mode() -> ChannelMode {
    ChannelMode::Rgb
}
fn default_confidence() -> f32 {
    DEFAULT_CONFIDENCE_THRESHOLD
}
fn default_synth_seed() -> u64 {
    7
}

/// Where the dataset lives and how clips are cut from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `train/`, `test/`, per-split box CSVs and label
    /// JSONs. `synth-data` writes this layout; the loaders read it.
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default = "default_channel_mode")]
    pub channel_mode: ChannelMode,
    /// Past frames per clip; the cube holds this many plus the target frame.
    #[serde(default = "default_temporal_window")]
    pub temporal_window: usize,
    /// Boxes below this confidence are dropped at ingest.
    #[serde(default = "default_confidence")]
    pub confidence_threshold: f32,
    /// Generator settings used by the `synth-data` subcommand only.
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Seed for the synthetic generator (independent of `train.seed` so the
    /// dataset stays fixed while training seeds vary).
    #[serde(default = "default_synth_seed")]
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: default_root(),
            channel_mode: default_channel_mode(),
            temporal_window: default_temporal_window(),
            confidence_threshold: default_confidence(),
            synthetic: SyntheticConfig::default(),
            synthetic_seed: default_synth_seed(),
        }
    }
}

fn default_learning_rate() -> f64 {
    1e-4
}
fn default_lr_decay_factor() -> f64 {
    0.8
}
fn default_lr_decay_every() -> usize {
    60
}
fn default_adam_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    120
}
fn default_seed() -> u64 {
    17
}
fn default_checkpoint_every() -> usize {
    20
}

/// Optimizer schedule and run bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// The learning rate is multiplied by this factor every
    /// `lr_decay_every` epochs.
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_adam_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Seeds student init and the per-epoch shuffle; fixed seed, fixed
    /// trajectory.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Stop early if the epoch-mean total loss has not improved for this many
    /// epochs. Off by default: the schedule trains for a fixed epoch count.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            lr_decay_factor: default_lr_decay_factor(),
            lr_decay_every: default_lr_decay_every(),
            adam_betas: default_adam_betas(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: default_seed(),
            checkpoint_every: default_checkpoint_every(),
            patience: None,
        }
    }
}

fn default_w_e() -> f64 {
    0.01
}
fn default_w_c() -> BTreeMap<usize, f64> {
    [(1, 0.65), (2, 0.35)].into_iter().collect()
}
fn default_aggregate() -> AggregatePolicy {
    AggregatePolicy::TopKMean(3)
}
fn default_smooth_window() -> usize {
    15
}

/// Score combination, aggregation and smoothing settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Weight of the z-normalized prediction-error component.
    #[serde(default = "default_w_e")]
    pub w_e: f64,
    /// Weight per tapped block of the z-normalized inconsistency components.
    #[serde(default = "default_w_c")]
    pub w_c: BTreeMap<usize, f64>,
    /// How per-object scores collapse to one score per frame.
    #[serde(default = "default_aggregate")]
    pub aggregate: AggregatePolicy,
    /// Median filter width over each video's frame series; odd, 1 = off.
    #[serde(default = "default_smooth_window")]
    pub smooth_window: usize,
    #[serde(default)]
    pub std_denominator: StdDenominator,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            w_e: default_w_e(),
            w_c: default_w_c(),
            aggregate: default_aggregate(),
            smooth_window: default_smooth_window(),
            std_denominator: StdDenominator::default(),
        }
    }
}

impl ScoreConfig {
    pub fn weights(&self) -> ScoreWeights {
        ScoreWeights { w_e: self.w_e, w_c: self.w_c.clone() }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rank smoothed scores (default) or raw ones (smoothing ablation).
    #[serde(default)]
    pub score_selection: ScoreSelection,
}

/// The whole run: every stage reads its section from here. Defaults encode
/// the reference training protocol (Adam(0.9, 0.999) at 1e-4 decayed by 0.8
/// every 60 epochs, loss balance 0.7/0.1/0.2) with the two-block tap preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherSpec,
    pub student: StudentConfig,
    pub loss: LossWeights,
    pub train: TrainParams,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Checks every section and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        fn collect(violations: &mut Vec<String>, r: Result<()>) {
            match r {
                Ok(()) => {}
                Err(Error::Config(v)) => violations.extend(v),
                Err(other) => violations.push(other.to_string()),
            }
        }
        let mut violations = Vec::new();
        collect(&mut violations, self.student.validate());
        collect(&mut violations, self.loss.validate());
        collect(&mut violations, self.data.synthetic.validate());
        if self.student.mode != Mode::AeOnly {
            collect(&mut violations, self.teacher.validate());
        }

        if self.data.temporal_window < 1 {
            violations.push("data.temporal_window must be >= 1".to_string());
        }
        if self.data.temporal_window != self.student.input_frames {
            violations.push(format!(
                "data.temporal_window ({}) must equal student.input_frames ({})",
                self.data.temporal_window, self.student.input_frames
            ));
        }
        if self.data.channel_mode.channels() != self.student.channels_per_frame {
            violations.push(format!(
                "data.channel_mode provides {} channels but student.channels_per_frame is {}",
                self.data.channel_mode.channels(),
                self.student.channels_per_frame
            ));
        }
        if !(self.data.confidence_threshold.is_finite()
            && (0.0..=1.0).contains(&self.data.confidence_threshold))
        {
            violations.push(format!(
                "data.confidence_threshold must be in [0,1], got {}",
                self.data.confidence_threshold
            ));
        }

        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            violations.push(format!("train.learning_rate must be > 0, got {}", t.learning_rate));
        }
        if !(t.lr_decay_factor > 0.0 && t.lr_decay_factor <= 1.0) {
            violations.push(format!(
                "train.lr_decay_factor must be in (0,1], got {}",
                t.lr_decay_factor
            ));
        }
        if t.lr_decay_every == 0 {
            violations.push("train.lr_decay_every must be >= 1".to_string());
        }
        for (i, beta) in [t.adam_betas.0, t.adam_betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&beta) {
                violations.push(format!("train.adam_betas.{i} must be in [0,1), got {beta}"));
            }
        }
        if t.batch_size == 0 {
            violations.push("train.batch_size must be >= 1".to_string());
        }
        if t.epochs == 0 {
            violations.push("train.epochs must be >= 1".to_string());
        }
        if t.checkpoint_every == 0 {
            violations.push("train.checkpoint_every must be >= 1".to_string());
        }
        if t.patience == Some(0) {
            violations.push("train.patience must be >= 1 when set".to_string());
        }

        // Score weights must line up with the blocks the model actually taps.
        let tapped: Vec<usize> = if self.student.mode == Mode::AeOnly {
            Vec::new()
        } else {
            self.teacher.tap_blocks.clone()
        };
        collect(&mut violations, self.score.weights().validate(&tapped));
        if self.score.smooth_window == 0 || self.score.smooth_window.is_multiple_of(2) {
            violations.push(format!(
                "score.smooth_window must be odd and >= 1, got {}",
                self.score.smooth_window
            ));
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        // `message()` rather than `to_string()`: the latter renders a
        // multi-line span diagram, and CLI errors must stay single-line.
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }
}

/// Parses an override value as a TOML literal (`1e-4`, `true`, `[1, 2]`),
/// falling back to a plain string for bare words like `pkg`.
fn parse_override_value(raw: &str) -> toml::Value {
    let fragment = format!("v = {raw}");
    if let Ok(table) = fragment.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Sets `table[a][b][c] = value` for the dot path `a.b.c`, creating
/// intermediate tables. Fails if the path walks through a non-table value.
fn set_dot_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(vec![format!("bad override path '{path}'")]));
    }
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        current = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "override '{path}': '{segment}' is not a config section"
                )])
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Loads a config file (or starts from defaults when `path` is `None`),
/// applies `key=value` dot-path overrides, and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse().map_err(|e: toml::de::Error| {
                Error::Config(vec![format!("{}: {}", p.display(), e.message())])
            })?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        set_dot_path(&mut table, key, parse_override_value(raw))?;
    }
    // Deserialize from TOML text, not from the Value tree: only the text
    // deserializer converts integer-like keys (`w_c`'s block indices).
    let merged = toml::to_string(&table)
        .map_err(|e| Error::Config(vec![format!("cannot merge overrides: {e}")]))?;
    let config = RunConfig::from_toml(&merged)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backbone;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_schedule_matches_reference_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.lr_decay_factor, 0.8);
        assert_eq!(c.train.lr_decay_every, 60);
        assert_eq!(c.train.adam_betas, (0.9, 0.999));
        assert_eq!(
            (c.loss.lambda_e, c.loss.lambda_g, c.loss.lambda_c),
            (0.7, 0.1, 0.2)
        );
        assert_eq!(c.score.w_c[&1], 0.65);
        assert_eq!(c.score.w_c[&2], 0.35);
        assert_eq!(c.score.w_e, 0.01);
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let overrides = vec![
            ("train.learning_rate".to_string(), "5e-5".to_string()),
            ("loss.lambda_c".to_string(), "0".to_string()),
            ("student.mode".to_string(), "kd_only".to_string()),
            ("teacher.tap_blocks".to_string(), "[2]".to_string()),
            ("score.w_c".to_string(), "{ 2 = 1.0 }".to_string()),
            ("score.aggregate".to_string(), "max".to_string()),
            ("data.root".to_string(), "elsewhere".to_string()),
        ];
        let config = load_config(None, &overrides).unwrap();
        assert_eq!(config.train.learning_rate, 5e-5);
        assert_eq!(config.loss.lambda_c, 0.0);
        assert_eq!(config.student.mode, Mode::KdOnly);
        assert_eq!(config.teacher.tap_blocks, vec![2]);
        assert_eq!(config.score.w_c, [(2, 1.0)].into_iter().collect());
        assert_eq!(config.score.aggregate, AggregatePolicy::Max);
        assert_eq!(config.data.root, PathBuf::from("elsewhere"));
    }

    #[test]
    fn load_applies_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[train]\nepochs = 9\nbatch_size = 4\n[teacher]\nbackbone = \"resnet18\"\n\
             pretrained_weights = \"seeded:3\"\ntap_blocks = [1, 2]\n",
        )
        .unwrap();
        let config = load_config(
            Some(&path),
            &[("train.epochs".to_string(), "3".to_string())],
        )
        .unwrap();
        assert_eq!(config.train.epochs, 3); // override wins
        assert_eq!(config.train.batch_size, 4); // file wins over default
        assert_eq!(config.teacher.backbone, Backbone::Resnet18);
        assert_eq!(config.train.seed, 17); // untouched default
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut config = RunConfig::default();
        config.train.learning_rate = -1.0;
        config.train.batch_size = 0;
        config.score.smooth_window = 4;
        config.score.w_c.remove(&2);
        let Err(Error::Config(violations)) = config.validate() else {
            panic!("expected config error")
        };
        assert!(violations.len() >= 4, "got {violations:?}");
        assert!(violations.iter().any(|v| v.contains("learning_rate")));
        assert!(violations.iter().any(|v| v.contains("batch_size")));
        assert!(violations.iter().any(|v| v.contains("smooth_window")));
        assert!(violations.iter().any(|v| v.contains("taps")));
    }

    #[test]
    fn ae_only_needs_no_teacher_or_component_weights() {
        let mut config = RunConfig::default();
        config.student.mode = Mode::AeOnly;
        config.teacher.tap_blocks = vec![]; // invalid for a tapped run
        config.score.w_c.clear();
        config.score.w_e = 1.0;
        config.validate().unwrap();
    }

    #[test]
    fn window_and_channel_mismatches_are_caught() {
        let mut config = RunConfig::default();
        config.data.temporal_window = 3; // student.input_frames stays 4
        let Err(Error::Config(violations)) = config.validate() else {
            panic!("expected config error")
        };
        assert!(violations.iter().any(|v| v.contains("temporal_window")));
    }

    #[test]
    fn bad_override_paths_are_rejected() {
        let err = load_config(None, &[("train..lr".to_string(), "1".to_string())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // Walking through a scalar is an error, not a silent overwrite.
        let overrides = vec![
            ("train.epochs".to_string(), "3".to_string()),
            ("train.epochs.nested".to_string(), "1".to_string()),
        ];
        assert!(load_config(None, &overrides).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 1.0\n").is_err());
    }

    #[test]
    fn bare_words_parse_as_strings() {
        assert_eq!(
            parse_override_value("pkg"),
            toml::Value::String("pkg".to_string())
        );
        assert_eq!(parse_override_value("1e-4"), toml::Value::Float(1e-4));
        assert_eq!(parse_override_value("true"), toml::Value::Boolean(true));
    }
}
