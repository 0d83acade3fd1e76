//! Object-box ingestion. Detection is out of scope; boxes arrive as a CSV
//! produced by an external detector, one row per box:
//!
//! ```text
//! video_id,frame_index,x1,y1,x2,y2,confidence
//! ```
//!
//! The header line is required. Coordinates are pixels in the source frame;
//! boxes are clamped to frame bounds and rows below the confidence threshold
//! are dropped (counted, not errors).

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::data::frames::FrameStore;
use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectBox {
    pub video_id: String,
    pub frame_index: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub confidence: f32,
}

impl ObjectBox {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }
}

/// What happened during one `load_boxes` call.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct BoxIngestReport {
    pub rows_read: usize,
    pub kept: usize,
    pub dropped_low_confidence: usize,
    pub dropped_unknown_video: usize,
    pub dropped_out_of_range_frame: usize,
}

impl fmt::Display for BoxIngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "boxes: {} rows, {} kept, {} below confidence threshold, {} unknown video, {} frame out of range",
            self.rows_read,
            self.kept,
            self.dropped_low_confidence,
            self.dropped_unknown_video,
            self.dropped_out_of_range_frame
        )
    }
}

#[derive(Deserialize)]
struct RawRow {
    video_id: String,
    frame_index: usize,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
    confidence: f32,
}

/// Reads, validates, clamps and filters boxes against `store`'s geometry.
/// Returned boxes keep the input row order.
pub fn load_boxes(
    path: &Path,
    store: &FrameStore,
    confidence_threshold: f32,
) -> Result<(Vec<ObjectBox>, BoxIngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;

    {
        let headers = reader
            .headers()
            .map_err(|e| Error::BoxFile { line: 1, detail: e.to_string() })?;
        let expected = ["video_id", "frame_index", "x1", "y1", "x2", "y2", "confidence"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::BoxFile {
                line: 1,
                detail: format!("bad header {got:?}, expected {expected:?}"),
            });
        }
    }

    let mut report = BoxIngestReport::default();
    let mut boxes = Vec::new();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let line = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::BoxFile { line, detail: e.to_string() })?;
        report.rows_read += 1;

        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(Error::BoxFile {
                line,
                detail: format!("confidence {} outside [0,1]", row.confidence),
            });
        }
        if !(row.x1 < row.x2 && row.y1 < row.y2) {
            return Err(Error::BoxFile {
                line,
                detail: format!(
                    "degenerate box ({}, {}, {}, {})",
                    row.x1, row.y1, row.x2, row.y2
                ),
            });
        }
        if row.confidence < confidence_threshold {
            report.dropped_low_confidence += 1;
            continue;
        }
        let Some(meta) = store.video(&row.video_id) else {
            report.dropped_unknown_video += 1;
            continue;
        };
        if row.frame_index >= meta.frame_count {
            report.dropped_out_of_range_frame += 1;
            continue;
        }

        let (w, h) = (meta.width as f32, meta.height as f32);
        let b = ObjectBox {
            video_id: row.video_id,
            frame_index: row.frame_index,
            x1: row.x1.clamp(0.0, w),
            y1: row.y1.clamp(0.0, h),
            x2: row.x2.clamp(0.0, w),
            y2: row.y2.clamp(0.0, h),
            confidence: row.confidence,
        };
        // A box entirely outside the frame collapses under clamping.
        if !(b.x1 < b.x2 && b.y1 < b.y2) {
            return Err(Error::BoxFile {
                line,
                detail: format!(
                    "box ({}, {}, {}, {}) lies outside the {w}×{h} frame",
                    row.x1, row.y1, row.x2, row.y2
                ),
            });
        }
        boxes.push(b);
        report.kept += 1;
    }
    Ok((boxes, report))
}
