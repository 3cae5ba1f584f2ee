use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ImageFeatures,
    ClipImage,
    ClipText,
    Gap,
}

/// JSON sidecar binding matrix rows to ids, labels and groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub dim: usize,
    pub role: Role,
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_attributes: Option<usize>,
}

impl Manifest {
    /// Checks internal consistency: list lengths and index ranges.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.count {
            return Err(Error::Pairing(format!(
                "manifest lists {} ids but count is {}",
                self.ids.len(),
                self.count
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.count {
                return Err(Error::Pairing(format!(
                    "manifest lists {} labels but count is {}",
                    labels.len(),
                    self.count
                )));
            }
            if let Some(c) = self.num_classes {
                if let Some(bad) = labels.iter().find(|&&y| y >= c) {
                    return Err(Error::Schema(format!("label {bad} outside [0, {c})")));
                }
            }
        }
        if let Some(groups) = &self.groups {
            if groups.len() != self.count {
                return Err(Error::Pairing(format!(
                    "manifest lists {} groups but count is {}",
                    groups.len(),
                    self.count
                )));
            }
            for &(y, a) in groups {
                if self.num_classes.is_some_and(|c| y >= c) || self.num_attributes.is_some_and(|n| a >= n) {
                    return Err(Error::Schema(format!(
                        "group ({y},{a}) outside declared |Y|={:?}, |A|={:?}",
                        self.num_classes, self.num_attributes
                    )));
                }
            }
            if let Some(labels) = &self.labels {
                if let Some(i) = (0..self.count).find(|&i| groups[i].0 != labels[i]) {
                    return Err(Error::Schema(format!(
                        "row {i}: group class {} disagrees with label {}",
                        groups[i].0, labels[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let man: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    man.validate()?;
    Ok(man)
}

pub fn save_manifest(man: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(man).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Errors unless the manifest describes exactly this matrix.
pub fn validate_pairing(m: &EmbeddingMatrix, man: &Manifest) -> Result<()> {
    man.validate()?;
    if man.count != m.count() || man.dim != m.dim() {
        return Err(Error::Pairing(format!(
            "manifest declares {}x{} but matrix is {}x{}",
            man.count,
            man.dim,
            m.count(),
            m.dim()
        )));
    }
    Ok(())
}
