//! Per-run provenance: resolved config plus content hashes of everything
//! the command read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mlt_core::{Error, Result};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub created_unix: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: None,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn set_config(&mut self, cfg: &mlt_core::config::TrainConfig) -> Result<()> {
        self.config = Some(serde_json::to_value(cfg)?);
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(display(path), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(display(path), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

fn display(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// `<out>/<command>-<unix seconds>/`, suffixed `-2`, `-3`, ... on collision.
pub fn make_run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{command}-{secs}");
    let mut n = 1u32;
    loop {
        let candidate = if n == 1 {
            out.join(&base)
        } else {
            out.join(format!("{base}-{n}"))
        };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn resolve_out(flag: &Path) -> PathBuf {
    match std::env::var_os("MLT_OUT") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => flag.to_path_buf(),
    }
}
