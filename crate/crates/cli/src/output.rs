use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{to_json, Flat};
use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

pub fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", path.display())))
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a file", path.display())))
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Output paths of one run. Everything registered is deleted on drop
/// unless [`Outputs::commit`] was called.
#[derive(Debug)]
pub struct Outputs {
    force: bool,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new(force: bool) -> Self {
        Self {
            force,
            created: Vec::new(),
            committed: false,
        }
    }

    fn claim(&mut self, path: &Path) -> Result<(), CliError> {
        if path.exists() {
            if !self.force {
                return Err(CliError::Usage(format!("{} exists; pass --force to replace it", path.display())));
            }
            if path.is_dir() {
                fs::remove_dir_all(path).map_err(io(path))?;
            } else {
                fs::remove_file(path).map_err(io(path))?;
            }
        }
        self.created.push(path.to_path_buf());
        Ok(())
    }

    /// Claim and create an output directory.
    pub fn dir(&mut self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            require_dir(parent)?;
        }
        self.claim(path)?;
        fs::create_dir(path).map_err(io(path))
    }

    /// Claim an output file and its `<file>.config.json` sidecar.
    pub fn file(&mut self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            require_dir(parent)?;
        }
        self.claim(path)?;
        self.claim(&sidecar(path))
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
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io(path))
}

pub fn write_config(path: &Path, flat: &Flat) -> Result<(), CliError> {
    write(path, &to_json(flat))
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write(path, &s)
}

/// Append-only JSON-lines writer.
pub struct JsonLines {
    path: PathBuf,
    file: fs::File,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = fs::File::create(path).map_err(io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn push<S: serde::Serialize>(&mut self, record: &S) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
