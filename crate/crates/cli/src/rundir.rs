//! Output directory guard: an exclusive lock file for the duration of a run
//! and the resolved-config echo.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::CliError;

pub const LOCK_FILE: &str = ".vcaptcha.lock";
pub const CONFIG_ECHO: &str = "config.json";

/// Holds the lock on an output directory; released on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    config: &'a PipelineConfig,
}

impl RunDir {
    /// Creates `path` if needed, takes the lock and writes the config echo.
    pub fn acquire(path: &Path, command: &str, cfg: &PipelineConfig) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(path.to_path_buf()))
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        };
        writeln!(f, "{} {}", std::process::id(), command).map_err(|e| CliError::io(&lock, e))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        dir.write_json(CONFIG_ECHO, &Echo { command, config: cfg })?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: impl AsRef<Path>, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
