//! Frozen teacher backbone with block-level feature taps.
//!
//! The teacher is a standard residual classifier trunk (ResNet-18/50 and the
//! ResNeXt / wide variants) run forward-only. Batch-norm layers are folded
//! into the preceding convolution at load time, which is exact in inference
//! mode and roughly halves the per-block work.
//!
//! Weights come from either
//! * `"seeded:<u64>"` — deterministic He-initialized filters (identity batch
//!   norm), useful as a fixed random feature prior and for tests, or
//! * a `.tw` tensor archive holding a torchvision-compatible `state_dict`
//!   (see `tools/export_teacher_weights.py`), resolved as a literal path or
//!   via the `PKGNET_TEACHER_CACHE` directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array3, Array4, ArrayD, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tensorfile;
use crate::nn::{init, layers, Conv2d};

/// Channel statistics of the teacher's pretraining recipe (ImageNet).
/// Inputs to [`Teacher::tap_batch`] are `[0,1]` pixels; normalization happens
/// inside the teacher so the student side of the pipeline never sees it.
const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

const BN_EPS: f32 = 1e-5;

pub const ENV_TEACHER_CACHE: &str = "PKGNET_TEACHER_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet18,
    Resnet50,
    Resnext50,
    WideResnet50,
}

impl Backbone {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "resnet18" => Ok(Self::Resnet18),
            "resnet50" => Ok(Self::Resnet50),
            "resnext50" | "resnext50_32x4d" => Ok(Self::Resnext50),
            "wide_resnet50" | "wide_resnet50_2" => Ok(Self::WideResnet50),
            other => Err(Error::Model(format!(
                "unknown backbone '{other}' (expected resnet18, resnet50, resnext50 or wide_resnet50)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Resnet18 => "resnet18",
            Self::Resnet50 => "resnet50",
            Self::Resnext50 => "resnext50",
            Self::WideResnet50 => "wide_resnet50",
        }
    }

    /// Output channels of blocks 1..=4.
    pub fn block_channels(&self) -> [usize; 4] {
        match self {
            Self::Resnet18 => [64, 128, 256, 512],
            _ => [256, 512, 1024, 2048],
        }
    }

    /// Residual blocks per stage.
    fn block_counts(&self) -> [usize; 4] {
        match self {
            Self::Resnet18 => [2, 2, 2, 2],
            _ => [3, 4, 6, 3],
        }
    }

    fn groups(&self) -> usize {
        match self {
            Self::Resnext50 => 32,
            _ => 1,
        }
    }

    fn base_width(&self) -> usize {
        match self {
            Self::Resnext50 => 4,
            Self::WideResnet50 => 128,
            _ => 64,
        }
    }

    fn uses_bottleneck_blocks(&self) -> bool {
        !matches!(self, Self::Resnet18)
    }

    /// Spatial side of block k's feature map for a square input of side
    /// `input`. The stem divides by 4, each later stage by 2.
    pub fn block_spatial(input: usize, block: usize) -> usize {
        (input / 4) >> (block - 1)
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_backbone() -> Backbone {
    Backbone::Resnet50
}
fn default_weights() -> String {
    "resnet50".to_string()
}
fn default_taps() -> Vec<usize> {
    vec![1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    /// `"seeded:<u64>"`, a path to a `.tw` archive, or a bare name resolved
    /// under `PKGNET_TEACHER_CACHE`.
    #[serde(default = "default_weights")]
    pub pretrained_weights: String,
    /// Tapped block indices, non-empty and strictly increasing, each in 1..=4.
    #[serde(default = "default_taps")]
    pub tap_blocks: Vec<usize>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            pretrained_weights: default_weights(),
            tap_blocks: default_taps(),
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tap_blocks.is_empty() {
            return Err(Error::Model("tap_blocks must be non-empty".into()));
        }
        if !self.tap_blocks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Model(format!(
                "tap_blocks must be strictly increasing, got {:?}",
                self.tap_blocks
            )));
        }
        if self.tap_blocks.iter().any(|&b| !(1..=4).contains(&b)) {
            return Err(Error::Model(format!(
                "tap_blocks must lie in 1..=4, got {:?}",
                self.tap_blocks
            )));
        }
        Ok(())
    }

    pub fn deepest_tap(&self) -> usize {
        *self.tap_blocks.last().expect("validated non-empty")
    }
}

/// One residual block with batch norm already folded into the convolutions.
#[derive(Debug)]
enum Block {
    Basic { c1: Conv2d, c2: Conv2d, down: Option<Conv2d> },
    Bottleneck { c1: Conv2d, c2: Conv2d, c3: Conv2d, down: Option<Conv2d> },
}

impl Block {
    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        match self {
            Self::Basic { c1, c2, down } => {
                let h = layers::relu(&c1.forward(&x.view()));
                let mut y = c2.forward(&h.view());
                match down {
                    Some(d) => y += &d.forward(&x.view()),
                    None => y += x,
                }
                layers::relu(&y)
            }
            Self::Bottleneck { c1, c2, c3, down } => {
                let h = layers::relu(&c1.forward(&x.view()));
                let h = layers::relu(&c2.forward(&h.view()));
                let mut y = c3.forward(&h.view());
                match down {
                    Some(d) => y += &d.forward(&x.view()),
                    None => y += x,
                }
                layers::relu(&y)
            }
        }
    }
}

#[derive(Debug)]
pub struct Teacher {
    spec: TeacherSpec,
    stem: Conv2d,
    /// Stages 1..=deepest tapped block, each a run of residual blocks.
    stages: Vec<Vec<Block>>,
    taps: BTreeSet<usize>,
}

impl Teacher {
    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// Feature maps of the tapped blocks for a batch of `[0,1]` images,
    /// `(N, C, H, W)` with `C` 3 (or 1, replicated for the teacher).
    pub fn tap_batch(&self, images: &ArrayView4<f32>) -> Result<BTreeMap<usize, Array4<f32>>> {
        let (n, c, h, w) = images.dim();
        let rgb: Array4<f32> = match c {
            3 => images.to_owned(),
            1 => {
                let mut out = Array4::zeros((n, 3, h, w));
                for ch in 0..3 {
                    out.slice_mut(s![.., ch, .., ..]).assign(&images.index_axis(Axis(1), 0));
                }
                out
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "teacher input (want 1 or 3 channels)",
                    left: vec![n, c, h, w],
                    right: vec![n, 3, h, w],
                })
            }
        };
        let mut x = rgb;
        for ch in 0..3 {
            let (m, s) = (NORM_MEAN[ch], NORM_STD[ch]);
            x.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - m) / s);
        }

        x = layers::relu(&self.stem.forward(&x.view()));
        x = layers::max_pool2d(&x.view(), 3, 2, 1);
        let mut out = BTreeMap::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(&x);
            }
            if self.taps.contains(&(i + 1)) {
                out.insert(i + 1, x.clone());
            }
        }
        Ok(out)
    }

    /// Single-image convenience wrapper around [`Self::tap_batch`].
    pub fn tap(&self, image: &Array3<f32>) -> Result<BTreeMap<usize, Array3<f32>>> {
        let (c, h, w) = image.dim();
        let batch = image.view().into_shape_with_order((1, c, h, w)).unwrap().to_owned();
        let maps = self.tap_batch(&batch.view())?;
        Ok(maps
            .into_iter()
            .map(|(k, v)| (k, v.index_axis(Axis(0), 0).to_owned()))
            .collect())
    }

    /// Every parameter value in a fixed order; used to assert bitwise
    /// frozenness across training.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        let mut push = |c: &Conv2d| {
            out.extend(c.w.iter().copied());
            out.extend(c.b.iter().copied());
        };
        push(&self.stem);
        for stage in &self.stages {
            for block in stage {
                match block {
                    Block::Basic { c1, c2, down } => {
                        push(c1);
                        push(c2);
                        if let Some(d) = down {
                            push(d);
                        }
                    }
                    Block::Bottleneck { c1, c2, c3, down } => {
                        push(c1);
                        push(c2);
                        push(c3);
                        if let Some(d) = down {
                            push(d);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Builds the teacher trunk up to the deepest tapped block and freezes it.
pub fn build_teacher(spec: &TeacherSpec) -> Result<Teacher> {
    spec.validate()?;
    let mut source = WeightSource::resolve(&spec.pretrained_weights, spec.backbone)?;
    let bb = spec.backbone;
    let depth = spec.deepest_tap();

    let stem = source.folded_conv("conv1", "bn1", 64, 3, 7, 2, 3, 1)?;

    let counts = bb.block_counts();
    let channels = bb.block_channels();
    let planes = [64usize, 128, 256, 512];
    let mut stages = Vec::new();
    let mut in_ch = 64usize;
    for stage_idx in 0..depth {
        let stride = if stage_idx == 0 { 1 } else { 2 };
        let out_ch = channels[stage_idx];
        let mut blocks = Vec::new();
        for b in 0..counts[stage_idx] {
            let p = format!("layer{}.{}", stage_idx + 1, b);
            let s = if b == 0 { stride } else { 1 };
            let needs_down = b == 0 && (s != 1 || in_ch != out_ch);
            let down = if needs_down {
                Some(source.folded_conv(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    out_ch,
                    in_ch,
                    1,
                    s,
                    0,
                    1,
                )?)
            } else {
                None
            };
            let block = if bb.uses_bottleneck_blocks() {
                let width = planes[stage_idx] * bb.base_width() / 64 * bb.groups();
                Block::Bottleneck {
                    c1: source.folded_conv(&format!("{p}.conv1"), &format!("{p}.bn1"), width, in_ch, 1, 1, 0, 1)?,
                    c2: source.folded_conv(&format!("{p}.conv2"), &format!("{p}.bn2"), width, width, 3, s, 1, bb.groups())?,
                    c3: source.folded_conv(&format!("{p}.conv3"), &format!("{p}.bn3"), out_ch, width, 1, 1, 0, 1)?,
                    down,
                }
            } else {
                Block::Basic {
                    c1: source.folded_conv(&format!("{p}.conv1"), &format!("{p}.bn1"), out_ch, in_ch, 3, s, 1, 1)?,
                    c2: source.folded_conv(&format!("{p}.conv2"), &format!("{p}.bn2"), out_ch, out_ch, 3, 1, 1, 1)?,
                    down,
                }
            };
            blocks.push(block);
            in_ch = out_ch;
        }
        stages.push(blocks);
    }

    Ok(Teacher {
        spec: spec.clone(),
        stem,
        stages,
        taps: spec.tap_blocks.iter().copied().collect(),
    })
}

/// Raw (un-folded) batch-norm parameters for one layer.
struct BnParams {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    mean: Array1<f32>,
    var: Array1<f32>,
}

#[allow(clippy::large_enum_variant)] // construction-time only, one instance
enum WeightSource {
    /// He-initialized filters drawn from one seeded stream in construction
    /// order; batch norms are identity. `record` keeps the raw tensors so
    /// tests (and tooling) can write them back out as an archive.
    Seeded { rng: ChaCha8Rng, record: BTreeMap<String, ArrayD<f32>> },
    File { tensors: BTreeMap<String, ArrayD<f32>>, path: PathBuf },
}

impl WeightSource {
    fn resolve(id: &str, backbone: Backbone) -> Result<Self> {
        if let Some(seed) = id.strip_prefix("seeded:") {
            let seed: u64 = seed.parse().map_err(|_| {
                Error::Model(format!("bad seeded weights id '{id}' (want seeded:<u64>)"))
            })?;
            return Ok(Self::Seeded { rng: ChaCha8Rng::seed_from_u64(seed), record: BTreeMap::new() });
        }
        let direct = PathBuf::from(id);
        let path = if direct.exists() {
            direct
        } else if let Ok(cache) = std::env::var(ENV_TEACHER_CACHE) {
            let cached = Path::new(&cache).join(format!("{id}.tw"));
            if cached.exists() {
                cached
            } else {
                return Err(Error::Model(format!(
                    "teacher weights '{id}' not found (no such file, and {} has no {id}.tw); \
                     use seeded:<n> for synthetic weights",
                    Path::new(&cache).display()
                )));
            }
        } else {
            return Err(Error::Model(format!(
                "teacher weights '{id}' not found (no such file and {ENV_TEACHER_CACHE} unset); \
                 use seeded:<n> for synthetic weights"
            )));
        };
        let archive = tensorfile::read(&path)?;
        if let Some(named) = archive.meta.get("backbone").and_then(|v| v.as_str()) {
            if Backbone::parse(named)? != backbone {
                return Err(Error::Model(format!(
                    "weights archive {} is for backbone '{named}', config says '{}'",
                    path.display(),
                    backbone.name()
                )));
            }
        }
        Ok(Self::File { tensors: archive.tensors, path })
    }

    fn conv_weight(&mut self, name: &str, oc: usize, ic_per_group: usize, k: usize) -> Result<Array4<f32>> {
        match self {
            Self::Seeded { rng, record } => {
                let w = init::he_conv(rng, oc, ic_per_group, k);
                record.insert(format!("{name}.weight"), w.clone().into_dyn());
                Ok(w)
            }
            Self::File { tensors, path } => {
                let key = format!("{name}.weight");
                let t = tensors.get(&key).ok_or_else(|| {
                    Error::Archive(format!("{}: missing tensor '{key}'", path.display()))
                })?;
                let want = [oc, ic_per_group, k, k];
                if t.shape() != want {
                    return Err(Error::ShapeMismatch {
                        context: "teacher conv weight",
                        left: t.shape().to_vec(),
                        right: want.to_vec(),
                    });
                }
                Ok(t.clone().into_dimensionality().unwrap())
            }
        }
    }

    fn bn_params(&mut self, prefix: &str, c: usize) -> Result<BnParams> {
        match self {
            Self::Seeded { record, .. } => {
                let p = BnParams {
                    gamma: Array1::ones(c),
                    beta: Array1::zeros(c),
                    mean: Array1::zeros(c),
                    var: Array1::ones(c),
                };
                record.insert(format!("{prefix}.weight"), p.gamma.clone().into_dyn());
                record.insert(format!("{prefix}.bias"), p.beta.clone().into_dyn());
                record.insert(format!("{prefix}.running_mean"), p.mean.clone().into_dyn());
                record.insert(format!("{prefix}.running_var"), p.var.clone().into_dyn());
                Ok(p)
            }
            Self::File { tensors, path } => {
                let fetch = |suffix: &str| -> Result<Array1<f32>> {
                    let key = format!("{prefix}.{suffix}");
                    let t = tensors.get(&key).ok_or_else(|| {
                        Error::Archive(format!("{}: missing tensor '{key}'", path.display()))
                    })?;
                    if t.shape() != [c] {
                        return Err(Error::ShapeMismatch {
                            context: "teacher bn vector",
                            left: t.shape().to_vec(),
                            right: vec![c],
                        });
                    }
                    Ok(t.clone().into_dimensionality().unwrap())
                };
                Ok(BnParams {
                    gamma: fetch("weight")?,
                    beta: fetch("bias")?,
                    mean: fetch("running_mean")?,
                    var: fetch("running_var")?,
                })
            }
        }
    }

    /// Loads `conv_name` + `bn_name` and folds the batch norm into the
    /// convolution: `w' = w·γ/√(v+ε)`, `b' = β − μ·γ/√(v+ε)`.
    #[allow(clippy::too_many_arguments)]
    fn folded_conv(
        &mut self,
        conv_name: &str,
        bn_name: &str,
        oc: usize,
        ic: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Conv2d> {
        let mut w = self.conv_weight(conv_name, oc, ic / groups, k)?;
        let bn = self.bn_params(bn_name, oc)?;
        let mut b = Array1::<f32>::zeros(oc);
        for o in 0..oc {
            let scale = bn.gamma[o] / (bn.var[o] + BN_EPS).sqrt();
            w.slice_mut(s![o, .., .., ..]).mapv_inplace(|v| v * scale);
            b[o] = bn.beta[o] - bn.mean[o] * scale;
        }
        let mut conv = Conv2d::new(w, b, stride, pad);
        conv.groups = groups;
        Ok(conv)
    }

    fn into_recorded(self) -> BTreeMap<String, ArrayD<f32>> {
        match self {
            Self::Seeded { record, .. } => record,
            Self::File { tensors, .. } => tensors,
        }
    }
}

/// Generates the raw (pre-fold) torchvision-style tensors a seeded teacher is
/// built from. Lets tests and tooling round-trip the archive loader against
/// the seeded path.
pub fn seeded_raw_params(backbone: Backbone, seed: u64, deepest_block: usize) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let spec = TeacherSpec {
        backbone,
        pretrained_weights: format!("seeded:{seed}"),
        tap_blocks: (1..=deepest_block).collect(),
    };
    spec.validate()?;
    // Re-run the builder's fetch sequence against a recording source.
    let mut source = WeightSource::resolve(&spec.pretrained_weights, backbone)?;
    build_with(&mut source, &spec)?;
    Ok(source.into_recorded())
}

/// The builder body, factored so [`seeded_raw_params`] can replay it.
fn build_with(source: &mut WeightSource, spec: &TeacherSpec) -> Result<()> {
    let bb = spec.backbone;
    let depth = spec.deepest_tap();
    source.folded_conv("conv1", "bn1", 64, 3, 7, 2, 3, 1)?;
    let counts = bb.block_counts();
    let channels = bb.block_channels();
    let planes = [64usize, 128, 256, 512];
    let mut in_ch = 64usize;
    for stage_idx in 0..depth {
        let stride = if stage_idx == 0 { 1 } else { 2 };
        let out_ch = channels[stage_idx];
        for b in 0..counts[stage_idx] {
            let p = format!("layer{}.{}", stage_idx + 1, b);
            let s = if b == 0 { stride } else { 1 };
            if b == 0 && (s != 1 || in_ch != out_ch) {
                source.folded_conv(&format!("{p}.downsample.0"), &format!("{p}.downsample.1"), out_ch, in_ch, 1, s, 0, 1)?;
            }
            if bb.uses_bottleneck_blocks() {
                let width = planes[stage_idx] * bb.base_width() / 64 * bb.groups();
                source.folded_conv(&format!("{p}.conv1"), &format!("{p}.bn1"), width, in_ch, 1, 1, 0, 1)?;
                source.folded_conv(&format!("{p}.conv2"), &format!("{p}.bn2"), width, width, 3, s, 1, bb.groups())?;
                source.folded_conv(&format!("{p}.conv3"), &format!("{p}.bn3"), out_ch, width, 1, 1, 0, 1)?;
            } else {
                source.folded_conv(&format!("{p}.conv1"), &format!("{p}.bn1"), out_ch, in_ch, 3, s, 1, 1)?;
                source.folded_conv(&format!("{p}.conv2"), &format!("{p}.bn2"), out_ch, out_ch, 3, 1, 1, 1)?;
            }
            in_ch = out_ch;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(backbone: Backbone, taps: &[usize]) -> TeacherSpec {
        TeacherSpec {
            backbone,
            pretrained_weights: "seeded:7".into(),
            tap_blocks: taps.to_vec(),
        }
    }

    #[test]
    fn resnet50_tap_shapes_at_32px() {
        let t = build_teacher(&spec(Backbone::Resnet50, &[1, 2])).unwrap();
        let img = Array3::<f32>::from_elem((3, 32, 32), 0.5);
        let taps = t.tap(&img).unwrap();
        assert_eq!(taps[&1].dim(), (256, 8, 8));
        assert_eq!(taps[&2].dim(), (512, 4, 4));
    }

    #[test]
    fn resnet18_all_block_shapes_at_32px() {
        let t = build_teacher(&spec(Backbone::Resnet18, &[1, 2, 3, 4])).unwrap();
        let img = Array3::<f32>::from_elem((3, 32, 32), 0.25);
        let taps = t.tap(&img).unwrap();
        assert_eq!(taps[&1].dim(), (64, 8, 8));
        assert_eq!(taps[&2].dim(), (128, 4, 4));
        assert_eq!(taps[&3].dim(), (256, 2, 2));
        assert_eq!(taps[&4].dim(), (512, 1, 1));
    }

    #[test]
    fn variant_backbones_share_wide_channel_plan() {
        for bb in [Backbone::Resnext50, Backbone::WideResnet50] {
            let t = build_teacher(&spec(bb, &[1])).unwrap();
            let img = Array3::<f32>::from_elem((3, 32, 32), 0.1);
            let taps = t.tap(&img).unwrap();
            assert_eq!(taps[&1].dim(), (256, 8, 8), "{bb}");
        }
    }

    #[test]
    fn requested_taps_are_exactly_the_returned_keys() {
        let t = build_teacher(&spec(Backbone::Resnet18, &[2])).unwrap();
        let img = Array3::<f32>::from_elem((3, 32, 32), 0.9);
        let taps = t.tap(&img).unwrap();
        assert_eq!(taps.keys().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(taps[&2].dim(), (128, 4, 4));
    }

    #[test]
    fn seeded_builds_are_deterministic() {
        let a = build_teacher(&spec(Backbone::Resnet18, &[1, 2])).unwrap();
        let b = build_teacher(&spec(Backbone::Resnet18, &[1, 2])).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let mut other = spec(Backbone::Resnet18, &[1, 2]);
        other.pretrained_weights = "seeded:8".into();
        let c = build_teacher(&other).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn grayscale_input_replicates_to_three_channels() {
        let t = build_teacher(&spec(Backbone::Resnet18, &[1])).unwrap();
        let gray = Array3::<f32>::from_elem((1, 32, 32), 0.4);
        let mut rgb = Array3::<f32>::zeros((3, 32, 32));
        rgb.fill(0.4);
        let a = t.tap(&gray).unwrap();
        let b = t.tap(&rgb).unwrap();
        assert_eq!(a[&1], b[&1]);
    }

    #[test]
    fn archive_loader_matches_seeded_build() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resnet18.tw");
        let raw = seeded_raw_params(Backbone::Resnet18, 7, 2).unwrap();
        tensorfile::write(&path, &serde_json::json!({"backbone": "resnet18"}), &raw).unwrap();

        let from_seed = build_teacher(&spec(Backbone::Resnet18, &[1, 2])).unwrap();
        let mut file_spec = spec(Backbone::Resnet18, &[1, 2]);
        file_spec.pretrained_weights = path.to_string_lossy().into_owned();
        let from_file = build_teacher(&file_spec).unwrap();

        let (a, b) = (from_seed.flat_params(), from_file.flat_params());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn archive_with_missing_tensor_names_the_gap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.tw");
        let mut raw = seeded_raw_params(Backbone::Resnet18, 7, 1).unwrap();
        raw.remove("layer1.0.conv2.weight");
        tensorfile::write(&path, &serde_json::Value::Null, &raw).unwrap();
        let mut s = spec(Backbone::Resnet18, &[1]);
        s.pretrained_weights = path.to_string_lossy().into_owned();
        let err = build_teacher(&s).unwrap_err();
        assert!(err.to_string().contains("layer1.0.conv2.weight"), "{err}");
    }

    #[test]
    fn backbone_mismatch_in_archive_meta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tw");
        let raw = seeded_raw_params(Backbone::Resnet18, 7, 1).unwrap();
        tensorfile::write(&path, &serde_json::json!({"backbone": "resnet50"}), &raw).unwrap();
        let mut s = spec(Backbone::Resnet18, &[1]);
        s.pretrained_weights = path.to_string_lossy().into_owned();
        assert!(build_teacher(&s).is_err());
    }

    #[test]
    fn tap_validation_rejects_bad_lists() {
        assert!(build_teacher(&spec(Backbone::Resnet18, &[])).is_err());
        assert!(build_teacher(&spec(Backbone::Resnet18, &[2, 2])).is_err());
        assert!(build_teacher(&spec(Backbone::Resnet18, &[2, 1])).is_err());
        assert!(build_teacher(&spec(Backbone::Resnet18, &[0, 1])).is_err());
        assert!(build_teacher(&spec(Backbone::Resnet18, &[4, 5])).is_err());
    }

    #[test]
    fn unknown_backbone_and_missing_weights_error() {
        assert!(Backbone::parse("vgg16").is_err());
        let s = TeacherSpec {
            backbone: Backbone::Resnet18,
            pretrained_weights: "/nonexistent/weights.tw".into(),
            tap_blocks: vec![1],
        };
        let err = build_teacher(&s).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }

    #[test]
    fn repeated_forwards_are_bitwise_identical() {
        let t = build_teacher(&spec(Backbone::Resnet18, &[1, 2])).unwrap();
        let mut img = Array3::<f32>::zeros((3, 32, 32));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i % 255) as f32 / 255.0;
        }
        let a = t.tap(&img).unwrap();
        let b = t.tap(&img).unwrap();
        for k in [1usize, 2] {
            for (x, y) in a[&k].iter().zip(b[&k].iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
