//! File formats owned by the command line: seed lists and labelled datasets.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rem_core::SeedVector;

/// One node id per line; blank lines and `#` comments are skipped.
pub fn read_seeds(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: u32 = line
            .parse()
            .with_context(|| format!("{}:{}: `{line}` is not a node id", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_seeds(path: &Path, nodes: &[u32]) -> Result<()> {
    let mut text = String::new();
    for v in nodes {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub seeds: Vec<u32>,
    pub label: f64,
}

/// Seed sets with Monte Carlo labels, as written by `rem dataset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub num_nodes: usize,
    pub budget: usize,
    pub replications: usize,
    pub rng_seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let d: Dataset = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if d.samples.is_empty() {
            bail!("{} holds no samples", path.display());
        }
        Ok(d)
    }

    pub fn seed_vectors(&self) -> Result<Vec<SeedVector>> {
        self.samples
            .iter()
            .map(|s| Ok(SeedVector::from_nodes(self.num_nodes, &s.seeds)?))
            .collect()
    }

    pub fn labelled(&self) -> Result<Vec<(SeedVector, f64)>> {
        Ok(self.seed_vectors()?.into_iter().zip(self.samples.iter().map(|s| s.label)).collect())
    }
}

/// JSON to `out`, or pretty-printed to stdout.
pub fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
