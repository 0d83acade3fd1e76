//! Spatio-temporal clip assembly: for each object box, crop the box region
//! (at the final frame's coordinates) out of the final frame and the
//! `temporal_window` frames before it, and resize every crop to 32×32.

use std::collections::BTreeMap;

use ndarray::{s, Array3, Array4, ArrayView3};

use crate::data::boxes::ObjectBox;
use crate::data::frames::FrameStore;
use crate::error::{Error, Result};
use crate::model::INPUT_SIDE;

/// One model input/target unit: `temporal_window + 1` crops of one object.
#[derive(Debug, Clone)]
pub struct STClip {
    pub video_id: String,
    /// Index of the final frame (the prediction target).
    pub frame_index: usize,
    /// `(t, channels, 32, 32)`, values in `[0,1]`; the last frame is the
    /// target, all crops share the final frame's box.
    pub cube: Array4<f32>,
}

impl STClip {
    pub fn frames(&self) -> usize {
        self.cube.dim().0
    }

    /// The first `t−1` frames stacked along the channel axis, the student's
    /// input layout.
    pub fn past_frames_channel_stacked(&self) -> Array3<f32> {
        let (t, c, h, w) = self.cube.dim();
        self.cube
            .slice(s![..t - 1, .., .., ..])
            .to_owned()
            .into_shape_with_order(((t - 1) * c, h, w))
            .unwrap()
    }

    pub fn target_frame(&self) -> Array3<f32> {
        let t = self.cube.dim().0;
        self.cube.index_axis(ndarray::Axis(0), t - 1).to_owned()
    }
}

/// Bilinear resize of the `bx` region of `frame` to `side × side`.
///
/// Output pixel centers map to box coordinates via the half-pixel convention,
/// and samples clamp at the box edges, so an axis-aligned integer box that is
/// already `side × side` passes through unchanged.
pub fn crop_resize(frame: &ArrayView3<f32>, bx: &ObjectBox, side: usize) -> Array3<f32> {
    let (c, h, w) = frame.dim();
    let bw = bx.x2 - bx.x1;
    let bh = bx.y2 - bx.y1;
    let mut out = Array3::<f32>::zeros((c, side, side));
    for oi in 0..side {
        // Continuous source row, clamped to the box's pixel-center range.
        let sy = (bx.y1 + (oi as f32 + 0.5) * bh / side as f32 - 0.5)
            .clamp(bx.y1, (bx.y2 - 1.0).max(bx.y1));
        let y0 = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f32).clamp(0.0, 1.0);
        for oj in 0..side {
            let sx = (bx.x1 + (oj as f32 + 0.5) * bw / side as f32 - 0.5)
                .clamp(bx.x1, (bx.x2 - 1.0).max(bx.x1));
            let x0 = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f32).clamp(0.0, 1.0);
            for ch in 0..c {
                let a = frame[(ch, y0, x0)];
                let b = frame[(ch, y0, x1)];
                let d = frame[(ch, y1, x0)];
                let e = frame[(ch, y1, x1)];
                let top = a + (b - a) * fx;
                let bot = d + (e - d) * fx;
                out[(ch, oi, oj)] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Clip assembly outcome: the clips in nondecreasing `(video_id,
/// frame_index)` order, plus how many boxes were skipped for lacking
/// temporal history.
pub struct ClipStream<'a> {
    store: &'a FrameStore,
    /// Boxes sorted by (video, frame); consumed front to back.
    boxes: Vec<ObjectBox>,
    next: usize,
    window: usize,
    skipped: usize,
    /// Decoded frames of the video currently being walked.
    cache_video: String,
    cache: BTreeMap<usize, Array3<f32>>,
}

/// Streams one [`STClip`] per box with `frame_index ≥ temporal_window`;
/// earlier boxes are skipped and counted (see [`ClipStream::skipped`]).
pub fn assemble_stclips<'a>(
    store: &'a FrameStore,
    boxes: &[ObjectBox],
    temporal_window: usize,
) -> Result<ClipStream<'a>> {
    if temporal_window < 1 {
        return Err(Error::Dataset("temporal_window must be >= 1".into()));
    }
    let mut sorted = boxes.to_vec();
    sorted.sort_by(|a, b| {
        (a.video_id.as_str(), a.frame_index).cmp(&(b.video_id.as_str(), b.frame_index))
    });
    Ok(ClipStream {
        store,
        boxes: sorted,
        next: 0,
        window: temporal_window,
        skipped: 0,
        cache_video: String::new(),
        cache: BTreeMap::new(),
    })
}

impl ClipStream<'_> {
    /// Boxes skipped so far for insufficient history.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn frame(&mut self, video: &str, index: usize) -> Result<&Array3<f32>> {
        if self.cache_video != video {
            self.cache.clear();
            self.cache_video = video.to_string();
        }
        if !self.cache.contains_key(&index) {
            let f = self.store.load_frame(video, index)?;
            self.cache.insert(index, f);
        }
        Ok(&self.cache[&index])
    }

    fn build(&mut self, bx: &ObjectBox) -> Result<STClip> {
        let t = self.window + 1;
        let first = bx.frame_index + 1 - t;
        // Frames older than anything this or any later box can need are done.
        let keep_from = first;
        self.cache.retain(|&k, _| k >= keep_from || self.cache_video != bx.video_id);

        let mut cube = Array4::<f32>::zeros((t, self.store.channels(), INPUT_SIDE, INPUT_SIDE));
        for (slot, fi) in (first..=bx.frame_index).enumerate() {
            let crop = {
                let frame = self.frame(&bx.video_id, fi)?;
                crop_resize(&frame.view(), bx, INPUT_SIDE)
            };
            cube.slice_mut(s![slot, .., .., ..]).assign(&crop);
        }
        Ok(STClip { video_id: bx.video_id.clone(), frame_index: bx.frame_index, cube })
    }
}

impl Iterator for ClipStream<'_> {
    type Item = Result<STClip>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.next < self.boxes.len() {
            let bx = self.boxes[self.next].clone();
            self.next += 1;
            if bx.frame_index < self.window {
                self.skipped += 1;
                continue;
            }
            return Some(self.build(&bx));
        }
        None
    }
}
