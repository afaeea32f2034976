use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// What a command was asked to do, written before any work starts and
/// completed with an end time and status when it finishes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Full argument vector with the seed resolved; `replay` parses it again.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Content hash in the style of a git object id: sha256 over
/// `"blob <len>\0"` followed by the bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{:02x}", b)).collect())
}

impl RunManifest {
    pub fn new(
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: &[&Path],
    ) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: content_hash(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            config,
            seed,
            inputs,
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s).with_context(|| format!("cannot write manifest {}", path.display()))
    }

    pub fn finish(&mut self, path: &Path, ok: bool) -> Result<()> {
        self.finished_unix = Some(now());
        self.status = if ok { "ok" } else { "failed" }.into();
        self.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        Ok(serde_json::from_str(&s)
            .with_context(|| format!("{} is not a run manifest", path.display()))?)
    }
}

/// Exclusive ownership of an output location, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} exists: another command owns this output (delete the file if that process is gone)",
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot create lock {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
