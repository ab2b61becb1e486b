//! Per-stage manifests: content hashes of inputs and outputs, metrics, the resolved
//! configuration and wall time.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = crate::binio::read_file(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub wall_time_s: f64,
    /// `(path relative to the output directory, sha256)`
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub metrics: Vec<(String, String)>,
    pub config: String,
}

impl Manifest {
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        Self { stage: stage.into(), seed, wall_time_s: 0.0, inputs: Vec::new(), outputs: Vec::new(), metrics: Vec::new(), config: String::new() }
    }

    pub fn metric(&self, key: &str) -> Option<&str> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn output_hash(&self, rel: &str) -> Option<&str> {
        self.outputs.iter().find(|(p, _)| p == rel).map(|(_, h)| h.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("stage\t{}\nseed\t{}\nwall_time_s\t{:.3}\n", self.stage, self.seed, self.wall_time_s);
        for (p, h) in &self.inputs {
            s.push_str(&format!("input\t{p}\t{h}\n"));
        }
        for (p, h) in &self.outputs {
            s.push_str(&format!("output\t{p}\t{h}\n"));
        }
        for (k, v) in &self.metrics {
            s.push_str(&format!("metric\t{k}\t{v}\n"));
        }
        for line in self.config.lines() {
            s.push_str(&format!("config\t{line}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new("", 0);
        let bad = |n: usize, line: &str| Error::InvalidArgument(format!("manifest line {}: cannot parse {line:?}", n + 1));
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.splitn(3, '\t').collect();
            match (f[0], f.len()) {
                ("stage", 2) => m.stage = f[1].to_string(),
                ("seed", 2) => m.seed = f[1].parse().map_err(|_| bad(n, line))?,
                ("wall_time_s", 2) => m.wall_time_s = f[1].parse().map_err(|_| bad(n, line))?,
                ("input", 3) => m.inputs.push((f[1].to_string(), f[2].to_string())),
                ("output", 3) => m.outputs.push((f[1].to_string(), f[2].to_string())),
                ("metric", 3) => m.metrics.push((f[1].to_string(), f[2].to_string())),
                ("config", _) => {
                    m.config.push_str(line.strip_prefix("config\t").unwrap_or(""));
                    m.config.push('\n');
                }
                _ => return Err(bad(n, line)),
            }
        }
        if m.stage.is_empty() {
            return Err(Error::InvalidArgument("manifest has no stage line".into()));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = crate::binio::read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, self.to_text().as_bytes())
    }
}

/// Hash files relative to `root`.
pub fn hash_all(root: &Path, rels: &[PathBuf]) -> Result<Vec<(String, String)>> {
    rels.iter()
        .map(|r| {
            let rel = r.strip_prefix(root).unwrap_or(r);
            Ok((rel.display().to_string(), sha256_file(&root.join(rel))?))
        })
        .collect()
}

/// Check that every file a manifest lists still has its recorded hash. Returns one message per
/// mismatch or missing file.
pub fn verify(root: &Path, m: &Manifest) -> Vec<String> {
    let mut problems = Vec::new();
    for (kind, list) in [("input", &m.inputs), ("output", &m.outputs)] {
        for (rel, want) in list {
            match sha256_file(&root.join(rel)) {
                Ok(h) if &h == want => {}
                Ok(h) => problems.push(format!("{}: {kind} {rel} has hash {h}, manifest records {want}", m.stage)),
                Err(_) => problems.push(format!("{}: {kind} {rel} is missing", m.stage)),
            }
        }
    }
    problems
}
