//! Output directories that appear all at once.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Files are written into a hidden sibling directory which is renamed onto
/// the target on `commit`. An existing target is replaced.
pub struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
}

impl StagedDir {
    pub fn create(target: &Path) -> Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no final component", target.display()))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.staging.join(name);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results into {}", self.target.display()))?;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        // Only reached with the staging directory still present on failure.
        let _ = fs::remove_dir_all(&self.staging);
    }
}
