//! Cohort manifest: one entry per slide, paths relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SlideLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SlideLabel>,
    /// Possibly partial annotations, as a pathologist would supply them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    /// Annotations covering every ROI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_annotation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortManifest {
    pub slides: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.slides.iter().map(|s| s.slide_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate slide_id {:?} in manifest", w[0])));
        }
        if ids.iter().any(|id| id.is_empty()) {
            return Err(Error::Validation("empty slide_id in manifest".into()));
        }
        Ok(())
    }

    /// Resolve an entry path against the manifest's directory.
    pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_round_trip() {
        let text = r#"{"slides":[{"slide_id":"a","path":"slides/a.png"},{"slide_id":"b","path":"b.ppm","label":"nevus"}]}"#;
        let m: CohortManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.slides[1].label, Some(SlideLabel::Nevus));
        assert_eq!(m.slides[0].annotation, None);
        let again: CohortManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = r#"{"slides":[{"slide_id":"a","path":"x"},{"slide_id":"a","path":"y"}]}"#;
        let m: CohortManifest = serde_json::from_str(text).unwrap();
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }
}
