use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use exprsaug::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// The output directory plus a record of what was written to it.
pub struct OutDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_owned(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.record(name)?;
        Ok(p)
    }

    /// Registers a file that some other writer has produced under this directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let sum = sha256_file(&self.path(name))?;
        self.files.insert(name.to_owned(), sum);
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Writes `run_manifest.json`: the effective flag values, the seed and
/// checksums of every input and output file.
pub fn write_manifest(
    out: &OutDir,
    command: &[String],
    seed: u64,
    config: &BTreeMap<String, String>,
    inputs: &[PathBuf],
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<Result<_>>()?;
    let m = Manifest {
        tool: "exprsaug",
        version: env!("CARGO_PKG_VERSION"),
        command: command.join(" "),
        seed,
        config,
        inputs,
        outputs: &out.files,
    };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    let p = out.path("run_manifest.json");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}
