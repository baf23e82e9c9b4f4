use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

/// Output directory built under a hidden sibling and renamed into place on
/// success, so a crashed run never leaves a half-written `--out`.
pub struct OutDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl OutDir {
    pub fn create(target: &Path, force: bool) -> Result<Self, Failure> {
        if target.exists() {
            if !target.is_dir() {
                return Err(Failure::Usage(format!("--out {} exists and is not a directory", target.display())));
            }
            let non_empty = fs::read_dir(target).map_err(Failure::io(target))?.next().is_some();
            if non_empty && !force {
                return Err(Failure::Usage(format!(
                    "--out {} is not empty; pass --force to replace it",
                    target.display()
                )));
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| Failure::Usage(format!("--out {} has no directory name", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(Failure::io(&parent))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(Failure::io(&staging))?;
        }
        fs::create_dir(&staging).map_err(Failure::io(&staging))?;
        Ok(OutDir {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.staging.join(rel)
    }

    pub fn commit(mut self) -> Result<PathBuf, Failure> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(Failure::io(&self.target))?;
        }
        fs::rename(&self.staging, &self.target).map_err(Failure::io(&self.target))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
