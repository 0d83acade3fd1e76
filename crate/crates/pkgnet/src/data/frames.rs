//! Frame storage: per-video directories of numbered images, or in-memory
//! tensors (synthetic data, tests).
//!
//! Video order is lexicographic by id. Image dimensions are scanned eagerly
//! (header-only reads) so layout violations surface at open time with the
//! offending file named; pixel decoding stays lazy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Rgb,
    Gray,
}

impl ChannelMode {
    pub fn channels(&self) -> usize {
        match self {
            Self::Rgb => 3,
            Self::Gray => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoMeta {
    pub id: String,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug)]
enum FrameSource {
    Disk(Vec<PathBuf>),
    Memory(Vec<Array3<f32>>),
}

#[derive(Debug)]
struct VideoEntry {
    meta: VideoMeta,
    source: FrameSource,
}

#[derive(Debug)]
pub struct FrameStore {
    videos: Vec<VideoEntry>,
    by_id: BTreeMap<String, usize>,
    channels: usize,
}

impl FrameStore {
    /// Opens `<root>/<video_id>/<numbered frame images>`. Frames are decoded
    /// to `channels × H × W` tensors in `[0,1]` on demand.
    pub fn open(root: &Path, channels: ChannelMode) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Dataset(format!("no videos found under {}", root.display())));
        }

        let mut videos = Vec::new();
        for dir in dirs {
            let id = dir.file_name().unwrap().to_string_lossy().into_owned();
            let entry = Self::scan_video(&dir, id)?;
            videos.push(entry);
        }
        Ok(Self::index(videos, channels.channels()))
    }

    /// Wraps already-decoded frames; used by the synthetic generator and by
    /// tests. Every frame of a video must share one shape.
    pub fn from_memory(videos: Vec<(String, Vec<Array3<f32>>)>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Dataset("no videos given".into()));
        }
        let channels = videos[0].1.first().map(|f| f.dim().0).unwrap_or(0);
        let mut entries = Vec::new();
        let mut sorted = videos;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (id, frames) in sorted {
            if frames.is_empty() {
                return Err(Error::Dataset(format!("video '{id}' has zero frames")));
            }
            let (c, h, w) = frames[0].dim();
            if c != channels {
                return Err(Error::Dataset(format!(
                    "video '{id}' has {c} channels, expected {channels}"
                )));
            }
            for (i, f) in frames.iter().enumerate() {
                if f.dim() != (c, h, w) {
                    return Err(Error::Dataset(format!(
                        "video '{id}' frame {i} is {:?}, expected {:?}",
                        f.dim(),
                        (c, h, w)
                    )));
                }
            }
            entries.push(VideoEntry {
                meta: VideoMeta { id, frame_count: frames.len(), height: h, width: w },
                source: FrameSource::Memory(frames),
            });
        }
        Ok(Self::index(entries, channels))
    }

    fn index(videos: Vec<VideoEntry>, channels: usize) -> Self {
        let by_id = videos.iter().enumerate().map(|(i, v)| (v.meta.id.clone(), i)).collect();
        Self { videos, by_id, channels }
    }

    fn scan_video(dir: &Path, id: String) -> Result<VideoEntry> {
        let mut frames: Vec<(u64, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
            if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            let num: u64 = digits.parse().map_err(|_| {
                Error::Dataset(format!("frame file {} has no frame number", path.display()))
            })?;
            frames.push((num, path));
        }
        if frames.is_empty() {
            return Err(Error::Dataset(format!("video '{id}' has zero frames")));
        }
        frames.sort();
        for w in frames.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::Dataset(format!(
                    "video '{id}' has a gap in frame numbering before {}",
                    w[1].1.display()
                )));
            }
        }

        let (w0, h0) = image::image_dimensions(&frames[0].1).map_err(|e| Error::ImageDecode {
            path: frames[0].1.clone(),
            detail: e.to_string(),
        })?;
        for (_, path) in &frames {
            let (w, h) = image::image_dimensions(path)
                .map_err(|e| Error::ImageDecode { path: path.clone(), detail: e.to_string() })?;
            if (w, h) != (w0, h0) {
                return Err(Error::Dataset(format!(
                    "video '{id}': frame {} is {w}×{h}, expected {w0}×{h0}",
                    path.display()
                )));
            }
        }
        Ok(VideoEntry {
            meta: VideoMeta {
                id,
                frame_count: frames.len(),
                height: h0 as usize,
                width: w0 as usize,
            },
            source: FrameSource::Disk(frames.into_iter().map(|(_, p)| p).collect()),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Video metadata in lexicographic id order.
    pub fn videos(&self) -> impl Iterator<Item = &VideoMeta> {
        self.videos.iter().map(|v| &v.meta)
    }

    pub fn video(&self, id: &str) -> Option<&VideoMeta> {
        self.by_id.get(id).map(|&i| &self.videos[i].meta)
    }

    /// Decodes one frame to `(channels, H, W)` in `[0,1]`.
    pub fn load_frame(&self, video_id: &str, index: usize) -> Result<Array3<f32>> {
        let &vi = self
            .by_id
            .get(video_id)
            .ok_or_else(|| Error::Dataset(format!("unknown video '{video_id}'")))?;
        let entry = &self.videos[vi];
        if index >= entry.meta.frame_count {
            return Err(Error::Dataset(format!(
                "frame {index} out of range for video '{video_id}' ({} frames)",
                entry.meta.frame_count
            )));
        }
        match &entry.source {
            FrameSource::Memory(frames) => Ok(frames[index].clone()),
            FrameSource::Disk(paths) => self.decode(&paths[index]),
        }
    }

    fn decode(&self, path: &Path) -> Result<Array3<f32>> {
        let img = image::open(path)
            .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), detail: e.to_string() })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Array3::<f32>::zeros((self.channels, h, w));
        match self.channels {
            3 => {
                let rgb = img.to_rgb8();
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        out[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            1 => {
                let gray = img.to_luma8();
                for (x, y, p) in gray.enumerate_pixels() {
                    out[(0, y as usize, x as usize)] = p.0[0] as f32 / 255.0;
                }
            }
            other => return Err(Error::Dataset(format!("unsupported channel count {other}"))),
        }
        Ok(out)
    }
}
