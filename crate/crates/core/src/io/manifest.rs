use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject of a dataset manifest. Relative paths are resolved against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub center: String,
    pub flair_path: PathBuf,
    pub t1_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    fn resolve(mut self, base: &Path) -> Self {
        let join = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        self.flair_path = join(self.flair_path);
        self.t1_path = join(self.t1_path);
        self.mask_path = self.mask_path.map(join);
        self
    }
}

/// Reads a manifest and makes its paths absolute (or at least relative to
/// the current directory).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.subject_id.as_str()) {
            return Err(Error::config(format!("duplicate subject id {:?} in manifest", e.subject_id)));
        }
    }
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries.into_iter().map(|e| e.resolve(base)).collect())
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    super::write_json(entries, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            subject_id: "s0".into(),
            center: "a".into(),
            flair_path: "s0_flair.nii".into(),
            t1_path: "/abs/t1.nii".into(),
            mask_path: None,
        }];
        let path = dir.path().join("manifest.json");
        write_manifest(&entries, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("mask_path"));
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].flair_path, dir.path().join("s0_flair.nii"));
        assert_eq!(back[0].t1_path, PathBuf::from("/abs/t1.nii"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let json = r#"[{"subject_id":"a","center":"c","flair_path":"f","t1_path":"t"},
                       {"subject_id":"a","center":"c","flair_path":"f","t1_path":"t"}]"#;
        std::fs::write(&path, json).unwrap();
        assert!(read_manifest(&path).unwrap_err().is_config());
    }
}
