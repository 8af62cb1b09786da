//! Persisted draws: one JSON record per retained sweep in `draws.ndjson`,
//! run metadata in `meta.json`, and a resumable checkpoint.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PriorConfig;
use crate::error::{Error, Result};
use crate::state::ChainState;

pub const DRAWS_FILE: &str = "draws.ndjson";
pub const META_FILE: &str = "meta.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub variant: String,
    pub config: PriorConfig,
    pub t: usize,
    pub p: usize,
    pub q: usize,
}

impl RunMeta {
    pub fn expected_draws(&self) -> usize {
        ((self.iterations - self.burn_in) / self.thin) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    /// 1-based sweep index the snapshot was taken after.
    pub sweep: u64,
    pub state: ChainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawStore {
    pub meta: RunMeta,
    pub draws: Vec<DrawRecord>,
}

impl DrawStore {
    pub fn new(meta: RunMeta) -> Self {
        Self { meta, draws: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &ChainState> {
        self.draws.iter().map(|d| &d.state)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(DRAWS_FILE))?);
        for d in &self.draws {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        write_meta(dir, &self.meta)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        let draws = read_draws(&dir.join(DRAWS_FILE), None)?;
        Ok(Self { meta, draws })
    }
}

pub fn write_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn read_draws(path: &Path, limit: Option<usize>) -> Result<Vec<DrawRecord>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        if limit.is_some_and(|n| out.len() >= n) {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}: record {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of completed sweeps.
    pub sweep: u64,
    pub state: ChainState,
    /// Draw records written up to this point.
    pub draws: usize,
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string(self)?)?;
        fs::rename(tmp, dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(CHECKPOINT_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }
}

/// Appends draw records to `draws.ndjson` as the sampler produces them.
pub struct DrawWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl DrawWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(DRAWS_FILE);
        let out = BufWriter::new(File::create(&path)?);
        Ok(Self { path, out, count: 0 })
    }

    /// Reopens an existing draws file keeping only its first `keep` records,
    /// discarding anything written after the last checkpoint.
    pub fn resume(dir: &Path, keep: usize) -> Result<(Self, Vec<DrawRecord>)> {
        let path = dir.join(DRAWS_FILE);
        let kept = read_draws(&path, Some(keep))?;
        if kept.len() != keep {
            return Err(Error::Parse(format!(
                "{} holds {} records but the checkpoint expects {keep}",
                path.display(),
                kept.len()
            )));
        }
        let mut w = Self::create(dir)?;
        for d in &kept {
            w.push(d)?;
        }
        w.flush()?;
        Ok((w, kept))
    }

    pub fn push(&mut self, d: &DrawRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, d)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
