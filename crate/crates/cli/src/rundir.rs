use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::config_error;
use crate::OutArgs;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Everything needed to audit (and repeat) a run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    /// Resolved configuration with every default filled in.
    pub config: serde_json::Value,
    /// Input path (as given) → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the run directory → sha256.
    pub artifacts: BTreeMap<String, String>,
}

/// An output directory being filled by one command.
pub struct RunDir {
    root: PathBuf,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates `out`, refusing a non-empty directory unless `force` is set,
    /// in which case its contents are removed first.
    pub fn create(args: &OutArgs) -> Result<Self> {
        let root = args.out.clone();
        if root.exists() {
            if !root.is_dir() {
                return Err(config_error(format!("{} exists and is not a directory", root.display())));
            }
            let non_empty = fs::read_dir(&root)?.next().is_some();
            if non_empty {
                if !args.force {
                    return Err(config_error(format!(
                        "output directory {} is not empty (use --force to replace it)",
                        root.display()
                    )));
                }
                for entry in fs::read_dir(&root)? {
                    let p = entry?.path();
                    if p.is_dir() {
                        fs::remove_dir_all(&p)?;
                    } else {
                        fs::remove_file(&p)?;
                    }
                }
            }
        }
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes.as_ref()).with_context(|| format!("writing {}", p.display()))?;
        self.artifacts.insert(rel.to_string(), sha256_bytes(bytes.as_ref()));
        Ok(())
    }

    /// Records a file some other writer produced under the run directory.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let h = sha256_file(&self.path(rel))?;
        self.artifacts.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn ensure_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Writes `config.toml` and `manifest.json`; returns the manifest.
    pub fn finish<C: Serialize>(mut self, command: &str, seed: Option<u64>, config: &C) -> Result<Manifest> {
        let toml_text = toml::to_string(config).context("serializing the resolved config")?;
        self.write("config.toml", toml_text)?;
        let manifest = Manifest {
            tool: "hulm",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(manifest)
    }
}
