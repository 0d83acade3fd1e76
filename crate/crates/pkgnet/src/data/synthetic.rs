//! Synthetic desk-scale dataset: colored squares bouncing over a flat
//! background.
//!
//! Train videos contain only normal motion (constant velocity, solid fill).
//! Each test video carries one contiguous anomalous interval during which its
//! first object misbehaves in one of two ways, alternating by video index:
//!
//! * **acceleration** — velocity jumps by a large factor while the appearance
//!   stays normal, so the anomaly is visible to frame prediction but looks
//!   ordinary to a single-frame observer;
//! * **texture** — the solid fill becomes a fine checkerboard while motion
//!   stays normal, so single-frame appearance (the distillation cue) fires
//!   while motion prediction alone would not.
//!
//! Having both kinds is what lets the joint model dominate either single-cue
//! ablation on this data. Boxes are exact (the generator knows object
//! positions) with confidence 1.0. All pixel values are quantized to the
//! 8-bit grid at generation time so in-memory tensors and PNG round-trips
//! agree exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::boxes::ObjectBox;
use crate::data::frames::FrameStore;
use crate::data::labels::{labels_to_json, LabelTrack};
use crate::error::{Error, Result};

fn default_n_train() -> usize {
    8
}
fn default_n_test() -> usize {
    4
}
fn default_frames() -> usize {
    200
}
fn default_image_size() -> usize {
    128
}
fn default_anomaly_rate() -> f64 {
    0.3
}
fn default_objects() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_n_train")]
    pub n_train_videos: usize,
    #[serde(default = "default_n_test")]
    pub n_test_videos: usize,
    #[serde(default = "default_frames")]
    pub frames_per_video: usize,
    /// Square frame side in pixels.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Approximate fraction of each test video's frames that are anomalous,
    /// in [0,1). Zero disables anomalies entirely.
    #[serde(default = "default_anomaly_rate")]
    pub anomaly_rate: f64,
    #[serde(default = "default_objects")]
    pub objects_per_video: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train_videos: default_n_train(),
            n_test_videos: default_n_test(),
            frames_per_video: default_frames(),
            image_size: default_image_size(),
            anomaly_rate: default_anomaly_rate(),
            objects_per_video: default_objects(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_train_videos == 0 || self.n_test_videos == 0 {
            bad.push("synthetic video counts must be >= 1".to_string());
        }
        if self.frames_per_video < 24 {
            bad.push(format!(
                "synthetic.frames_per_video must be >= 24, got {}",
                self.frames_per_video
            ));
        }
        if self.image_size < 48 {
            bad.push(format!("synthetic.image_size must be >= 48, got {}", self.image_size));
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            bad.push(format!(
                "synthetic.anomaly_rate must be in [0,1), got {}",
                self.anomaly_rate
            ));
        }
        if self.objects_per_video == 0 {
            bad.push("synthetic.objects_per_video must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

pub struct SplitData {
    pub store: FrameStore,
    pub boxes: Vec<ObjectBox>,
    pub labels: Vec<LabelTrack>,
}

pub struct SyntheticDataset {
    pub train: SplitData,
    pub test: SplitData,
}

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.80, 0.85],
];

const ACCEL_FACTOR: f32 = 3.5;
/// Frames at the start of each video (and before any anomaly) guaranteed
/// normal, so clips with full temporal history exist on both sides.
const GUARD_FRAMES: usize = 8;

#[derive(Clone, Copy, PartialEq, Eq)]
enum AnomalyKind {
    None,
    Accelerate,
    Texture,
}

struct ObjectState {
    x: f32,
    y: f32,
    vx: f32,
    vy: f32,
    side: usize,
    color: [f32; 3],
}

pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_split(cfg, &mut rng, cfg.n_train_videos, false)?;
    let test = generate_split(cfg, &mut rng, cfg.n_test_videos, true)?;
    Ok(SyntheticDataset { train, test })
}

fn generate_split(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    n_videos: usize,
    with_anomalies: bool,
) -> Result<SplitData> {
    let mut videos = Vec::new();
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for vi in 0..n_videos {
        let id = format!("v{vi:03}");
        let kind = if with_anomalies && cfg.anomaly_rate > 0.0 {
            if vi % 2 == 0 {
                AnomalyKind::Accelerate
            } else {
                AnomalyKind::Texture
            }
        } else {
            AnomalyKind::None
        };
        let (frames, vid_boxes, track) = generate_video(cfg, rng, &id, kind);
        videos.push((id, frames));
        boxes.extend(vid_boxes);
        labels.push(track);
    }
    Ok(SplitData { store: FrameStore::from_memory(videos)?, boxes, labels })
}

fn generate_video(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    id: &str,
    kind: AnomalyKind,
) -> (Vec<Array3<f32>>, Vec<ObjectBox>, LabelTrack) {
    let size = cfg.image_size;
    let n_frames = cfg.frames_per_video;
    let background = 0.42 + 0.16 * rng.random::<f32>();

    let mut objects: Vec<ObjectState> = (0..cfg.objects_per_video)
        .map(|_| {
            let side = rng.random_range(10..=16usize);
            let max_pos = (size - side - 2) as f32;
            let speed = |r: &mut ChaCha8Rng| {
                let mag = 0.75 + 1.25 * r.random::<f32>();
                if r.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            };
            ObjectState {
                x: 1.0 + rng.random::<f32>() * (max_pos - 1.0),
                y: 1.0 + rng.random::<f32>() * (max_pos - 1.0),
                vx: speed(rng),
                vy: speed(rng),
                side,
                color: PALETTE[rng.random_range(0..PALETTE.len())],
            }
        })
        .collect();

    // Anomalous interval: a contiguous run of ~rate·frames, kept away from
    // both video ends so normal clips exist on either side.
    let interval = if kind == AnomalyKind::None {
        None
    } else {
        let want = (cfg.anomaly_rate * n_frames as f64).round() as usize;
        let len = want.clamp(2, n_frames.saturating_sub(2 * GUARD_FRAMES)).max(2);
        let latest_start = n_frames - GUARD_FRAMES - len;
        let start = rng.random_range(GUARD_FRAMES..=latest_start);
        Some((start, start + len))
    };
    let in_interval = |f: usize| interval.is_some_and(|(a, b)| f >= a && f < b);

    let mut frames = Vec::with_capacity(n_frames);
    let mut boxes = Vec::new();
    let mut labels = vec![0u8; n_frames];

    for (f, label) in labels.iter_mut().enumerate() {
        let anomalous = in_interval(f);
        if anomalous {
            *label = 1;
        }
        let mut frame = Array3::<f32>::from_elem((3, size, size), background);
        for (oi, obj) in objects.iter_mut().enumerate() {
            let is_the_anomaly = anomalous && oi == 0;
            let textured = is_the_anomaly && kind == AnomalyKind::Texture;
            draw_square(&mut frame, obj, textured);

            let px = obj.x.round();
            let py = obj.y.round();
            boxes.push(ObjectBox {
                video_id: id.to_string(),
                frame_index: f,
                x1: px,
                y1: py,
                x2: px + obj.side as f32,
                y2: py + obj.side as f32,
                confidence: 1.0,
            });

            let boost =
                if is_the_anomaly && kind == AnomalyKind::Accelerate { ACCEL_FACTOR } else { 1.0 };
            step_with_bounce(obj, boost, size);
        }
        quantize_to_8bit(&mut frame);
        frames.push(frame);
    }
    (frames, boxes, LabelTrack { video_id: id.to_string(), labels })
}

fn draw_square(frame: &mut Array3<f32>, obj: &ObjectState, textured: bool) {
    let size = frame.dim().1;
    let x0 = obj.x.round() as usize;
    let y0 = obj.y.round() as usize;
    let complement = [1.0 - obj.color[0], 1.0 - obj.color[1], 1.0 - obj.color[2]];
    for dy in 0..obj.side {
        let py = y0 + dy;
        if py >= size {
            break;
        }
        for dx in 0..obj.side {
            let px = x0 + dx;
            if px >= size {
                break;
            }
            let color = if textured && (dy / 2 + dx / 2) % 2 == 1 { complement } else { obj.color };
            for c in 0..3 {
                frame[(c, py, px)] = color[c];
            }
        }
    }
}

fn step_with_bounce(obj: &mut ObjectState, boost: f32, size: usize) {
    let max_pos = (size - obj.side - 1) as f32;
    obj.x += obj.vx * boost;
    obj.y += obj.vy * boost;
    if obj.x < 1.0 {
        obj.x = 1.0;
        obj.vx = obj.vx.abs();
    } else if obj.x > max_pos {
        obj.x = max_pos;
        obj.vx = -obj.vx.abs();
    }
    if obj.y < 1.0 {
        obj.y = 1.0;
        obj.vy = obj.vy.abs();
    } else if obj.y > max_pos {
        obj.y = max_pos;
        obj.vy = -obj.vy.abs();
    }
}

fn quantize_to_8bit(frame: &mut Array3<f32>) {
    frame.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Writes the generated dataset in the on-disk layout the loaders read:
/// `<root>/{train,test}/<video_id>/frame_%06d.png`, per-split box CSVs and
/// label JSONs.
pub fn write_synthetic_dataset(root: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<()> {
    let ds = generate_synthetic_dataset(cfg, seed)?;
    for (split, data) in [("train", &ds.train), ("test", &ds.test)] {
        let split_dir = root.join(split);
        for meta in data.store.videos() {
            let vdir = split_dir.join(&meta.id);
            std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            for fi in 0..meta.frame_count {
                let frame = data.store.load_frame(&meta.id, fi)?;
                let (_, h, w) = frame.dim();
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for (x, y, p) in img.enumerate_pixels_mut() {
                    for c in 0..3 {
                        p.0[c] = (frame[(c, y as usize, x as usize)] * 255.0).round() as u8;
                    }
                }
                let path = vdir.join(format!("frame_{fi:06}.png"));
                img.save(&path)
                    .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            }
        }

        let csv_path = root.join(format!("{split}_boxes.csv"));
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
        w.write_record(["video_id", "frame_index", "x1", "y1", "x2", "y2", "confidence"])
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
        for b in &data.boxes {
            w.write_record([
                b.video_id.clone(),
                b.frame_index.to_string(),
                b.x1.to_string(),
                b.y1.to_string(),
                b.x2.to_string(),
                b.y2.to_string(),
                b.confidence.to_string(),
            ])
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;

        let labels_path = root.join(format!("{split}_labels.json"));
        std::fs::write(&labels_path, labels_to_json(&data.labels))
            .map_err(|e| Error::io(&labels_path, e))?;
    }
    Ok(())
}

/// Convenience for tests: label tracks as a map.
pub fn label_map(tracks: &[LabelTrack]) -> BTreeMap<String, Vec<u8>> {
    tracks.iter().map(|t| (t.video_id.clone(), t.labels.clone())).collect()
}
