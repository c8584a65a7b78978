//! Output files are rendered in memory first and then written through a
//! temporary file and a rename, so a failed run leaves no partial report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    pub fn new(name: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        OutputFile {
            name: name.into(),
            contents: contents.into(),
        }
    }

    pub fn json<T: serde::Serialize>(name: impl Into<String>, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Self::new(name, bytes))
    }
}

fn write_atomic(dir: &Path, file: &OutputFile) -> Result<PathBuf> {
    let target = dir.join(&file.name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(&file.contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target)
        .with_context(|| format!("moving output into place at {}", target.display()))?;
    Ok(target)
}

/// Writes every file into `dir`, creating it if needed.
pub fn write_all(dir: &Path, files: &[OutputFile]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    files.iter().map(|f| write_atomic(dir, f)).collect()
}

/// File-name-safe form of a method name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
