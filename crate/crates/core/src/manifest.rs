//! JSON collection manifests shared by the loader and the synthetic
//! dataset writer. Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A directional light with an ambient term, as used by the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector toward the light, camera frame.
    pub direction: [f64; 3],
    pub intensity: f64,
    pub ambient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub file: String,
    pub azimuth: f64,
    /// Eye corners (two per eye), nose tip, mouth corners.
    pub fiducials: [[f64; 2]; 7],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light: Option<Light>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_normals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<String>,
}

impl PhotoEntry {
    pub fn photo_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.file)
    }
}

/// Ground-truth metadata written for rendered datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Mesh in the reconstruction's world frame (pixel units).
    pub mesh_file: String,
    pub albedo: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub photos: Vec<PhotoEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_normals_file: Option<String>,
    /// Frozen per-cluster fiducial layouts; computed from the photos when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reference_fiducials: BTreeMap<i32, [[f64; 2]; 7]>,
    /// Per-cluster factorization region masks.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub face_masks: BTreeMap<i32, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::ManifestParse(format!("cannot read {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::ManifestParse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Resolve a manifest-relative path.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
