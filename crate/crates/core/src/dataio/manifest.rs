//! Training-set curation rules over an asset manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Views covering less than this fraction of the frame are rejected.
pub const MIN_VIEW_COVERAGE: f64 = 0.1;

/// Normalized tag fragments marking low-quality assets.
pub const LOW_QUALITY_TAGS: &[&str] = &["lowpoly"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub has_texture: bool,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    pub n_components: u32,
    /// Fraction of each rendered view covered by the object.
    #[serde(default)]
    pub coverage: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    /// No texture maps.
    #[serde(rename = "rule-i")]
    NoTexture,
    /// A view with coverage below [`MIN_VIEW_COVERAGE`].
    #[serde(rename = "rule-ii")]
    SmallInView,
    /// Several separate objects.
    #[serde(rename = "rule-iii")]
    MultipleObjects,
    #[serde(rename = "rule-iv")]
    NoCaption,
    /// A low-quality tag.
    #[serde(rename = "rule-v")]
    LowQualityTag,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::NoTexture => "rule-i",
            RejectReason::SmallInView => "rule-ii",
            RejectReason::MultipleObjects => "rule-iii",
            RejectReason::NoCaption => "rule-iv",
            RejectReason::LowQualityTag => "rule-v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub entry: ManifestEntry,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub kept: Vec<ManifestEntry>,
    pub rejected: Vec<Rejected>,
}

/// Lowercase ASCII alphanumerics of `tag`.
pub fn normalize_tag(tag: &str) -> String {
    tag.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

pub fn is_low_quality_tag(tag: &str) -> bool {
    let t = normalize_tag(tag);
    LOW_QUALITY_TAGS.iter().any(|bad| t.contains(bad))
}

/// First rule `entry` violates, checked in order i to v.
pub fn reject_reason(entry: &ManifestEntry) -> Option<RejectReason> {
    if !entry.has_texture {
        return Some(RejectReason::NoTexture);
    }
    if entry.coverage.iter().any(|&c| c < MIN_VIEW_COVERAGE) {
        return Some(RejectReason::SmallInView);
    }
    if entry.n_components > 1 {
        return Some(RejectReason::MultipleObjects);
    }
    if entry.caption.as_deref().is_none_or(|c| c.trim().is_empty()) {
        return Some(RejectReason::NoCaption);
    }
    if entry.tags.iter().any(|t| is_low_quality_tag(t)) {
        return Some(RejectReason::LowQualityTag);
    }
    None
}

pub fn filter_manifest(entries: &[ManifestEntry]) -> FilterResult {
    let mut out = FilterResult::default();
    for e in entries {
        match reject_reason(e) {
            None => out.kept.push(e.clone()),
            Some(reason) => out.rejected.push(Rejected { entry: e.clone(), reason }),
        }
    }
    out
}

/// Reads a JSON array of entries and checks coverage values.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("line {}", e.line()), e.to_string()))?;
    for e in &entries {
        if e.coverage.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::parse(path, format!("entry '{}'", e.id), "coverage outside [0, 1]"));
        }
    }
    Ok(entries)
}
