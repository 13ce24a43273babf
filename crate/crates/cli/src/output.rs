//! Output files that disappear again when a command fails, config echoes
//! and plain-text tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Tracks files and directories a command creates; unless committed they
/// are removed on drop.
#[derive(Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Creates `dir` (and parents) if missing, removing it on failure only
    /// when this call created it.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            // topmost missing ancestor, so removal takes every level created here
            let top = dir
                .ancestors()
                .take_while(|a| !a.as_os_str().is_empty() && !a.exists())
                .last()
                .unwrap_or(dir)
                .to_path_buf();
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            self.dirs.push(top);
        }
        Ok(())
    }

    /// Registers a file about to be written.
    pub fn file(&mut self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        self.files.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn write_json<S: Serialize>(&mut self, path: &Path, value: &S) -> Result<()> {
        let path = self.file(path)?;
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// `models.json` -> `models.config.json`.
pub fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.config.json"))
}

#[derive(Serialize)]
pub struct ConfigEcho<'a, A: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub args: &'a A,
}

/// Left-aligned first column, right-aligned remaining columns.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                s.push_str(&format!("{c:<w$}", w = width[0]));
            } else {
                s.push_str(&format!("  {c:>w$}", w = width[i]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}
