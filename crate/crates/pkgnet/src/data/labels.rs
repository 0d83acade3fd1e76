//! Frame-level ground truth: a JSON object mapping video_id to an array of
//! 0/1 flags, one per frame (1 = anomalous).

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::frames::FrameStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrack {
    pub video_id: String,
    pub labels: Vec<u8>,
}

/// Loads label tracks and checks them against the store: every video in the
/// store must have a track of exactly `frame_count` 0/1 entries. Returned in
/// the store's (lexicographic) video order.
pub fn load_labels(path: &Path, store: &FrameStore) -> Result<Vec<LabelTrack>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<u8>> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: bad labels json: {e}", path.display())))?;
    tracks_from_map(raw, store)
}

/// Reads label tracks without a [`FrameStore`] to validate against, for
/// consumers that only have score artifacts (lengths are checked there
/// against the scored series instead). Tracks come back in key order.
pub fn read_label_file(path: &Path) -> Result<Vec<LabelTrack>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<u8>> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: bad labels json: {e}", path.display())))?;
    raw.into_iter()
        .map(|(video_id, labels)| {
            if let Some(v) = labels.iter().find(|&&v| v > 1) {
                return Err(Error::Dataset(format!(
                    "video '{video_id}' has non-binary label {v}"
                )));
            }
            Ok(LabelTrack { video_id, labels })
        })
        .collect()
}

/// The in-memory counterpart of [`load_labels`], same validation.
pub fn tracks_from_map(
    raw: BTreeMap<String, Vec<u8>>,
    store: &FrameStore,
) -> Result<Vec<LabelTrack>> {
    let mut out = Vec::new();
    for meta in store.videos() {
        let labels = raw.get(&meta.id).ok_or_else(|| {
            Error::Dataset(format!("labels missing for video '{}'", meta.id))
        })?;
        if labels.len() != meta.frame_count {
            return Err(Error::Dataset(format!(
                "video '{}' has {} labels for {} frames",
                meta.id,
                labels.len(),
                meta.frame_count
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Dataset(format!(
                "video '{}' has non-binary label {v}",
                meta.id
            )));
        }
        out.push(LabelTrack { video_id: meta.id.clone(), labels: labels.clone() });
    }
    Ok(out)
}

/// Serializes tracks back to the on-disk JSON shape.
pub fn labels_to_json(tracks: &[LabelTrack]) -> String {
    let map: BTreeMap<&str, &Vec<u8>> =
        tracks.iter().map(|t| (t.video_id.as_str(), &t.labels)).collect();
    serde_json::to_string_pretty(&map).expect("labels serialize")
}
