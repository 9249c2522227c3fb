use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Output written to a sibling temp file and renamed into place on commit.
/// Dropping without commit removes the temp file.
pub struct Staged {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        let name = target.file_name().with_context(|| format!("{} is not a file path", target.display()))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".tmp{}", std::process::id()));
        Ok(Self { tmp: target.with_file_name(tmp_name), target: target.to_path_buf(), committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<()> {
        fs::rename(&self.tmp, &self.target).with_context(|| format!("writing {}", self.target.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}
