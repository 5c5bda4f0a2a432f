use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Sidecar written next to each output as `<output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub checkpoint: Option<&'a Path>,
    pub checkpoint_sha256: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: &'static str,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl<C: Serialize> RunManifest<'_, C> {
    pub fn write_for_outputs(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        for out in &self.outputs {
            let path = sidecar_path(out);
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}
