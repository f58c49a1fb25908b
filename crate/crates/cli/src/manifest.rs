//! Run manifests: what was run, and fingerprints of what it produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hshap::SaliencyMap;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    pub cwd: String,
    pub seed: Option<u64>,
    pub rows: Vec<ReportRow>,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn new(args: &[String], seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: args.first().cloned().unwrap_or_default(),
            args: args.to_vec(),
            cwd: std::env::current_dir().map(|p| p.display().to_string()).unwrap_or_default(),
            seed,
            rows: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a written file, relative to `root`. Files carrying timings
    /// are listed without a hash.
    pub fn record(&mut self, root: &Path, path: &Path, hashed: bool) -> Result<()> {
        let relative = path.strip_prefix(root).unwrap_or(path).display().to_string();
        let sha256 = if hashed { Some(file_sha256(path)?) } else { None };
        self.outputs.push(OutputRecord { path: relative, sha256 });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Per-image evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub evals: u64,
    pub visited: u64,
    pub wall_ms: f64,
    /// Hash of the map, its leaves and the counters.
    pub digest: String,
}

impl ReportRow {
    pub const CSV_HEADER: &'static str = "image,f1,precision,recall,evals,visited,wall_ms\n";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}\n",
            self.image,
            opt(self.f1),
            opt(self.precision),
            opt(self.recall),
            self.evals,
            self.visited,
            self.wall_ms
        )
    }

    /// Equal up to wall-clock time.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { wall_ms: 0.0, ..self.clone() } == Self { wall_ms: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: Option<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub fn map_digest(map: &SaliencyMap) -> String {
    let mut h = Sha256::new();
    for v in &map.phi {
        h.update(v.to_bits().to_le_bytes());
    }
    for leaf in &map.leaves {
        for x in leaf.to_array() {
            h.update((x as u64).to_le_bytes());
        }
    }
    h.update(map.evaluations_used.to_le_bytes());
    h.update(map.visited_nodes.to_le_bytes());
    hex(&h.finalize())
}

/// Commands writing a directory keep their manifest inside it.
pub fn writes_directory(command: &str) -> bool {
    matches!(command, "generate" | "explain")
}

/// Where a run with output `out` keeps its manifest.
pub fn manifest_path(command: &str, out: &Path) -> PathBuf {
    if writes_directory(command) {
        out.join(RUN_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

/// Value of `--out` in an argument list.
pub fn find_out(args: &[String]) -> Option<String> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--out" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--out=").map(String::from)
        }
    })
}

/// `args` with the value of `--out` replaced.
pub fn replace_out(args: &[String], new: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            out.push(a.clone());
            out.push(new.to_string());
            iter.next();
        } else if a.starts_with("--out=") {
            out.push(format!("--out={new}"));
        } else {
            out.push(a.clone());
        }
    }
    out
}

/// Differences between an original run and its replay.
pub fn compare(original: &RunManifest, replay: &RunManifest) -> Result<usize> {
    if original.rows.len() != replay.rows.len() {
        bail!("replay produced {} rows, the original {}", replay.rows.len(), original.rows.len());
    }
    for (a, b) in original.rows.iter().zip(&replay.rows) {
        if !a.same_result(b) {
            bail!("results for {} differ on replay", a.image);
        }
    }
    let mut checked = 0;
    for record in original.outputs.iter().filter(|r| r.sha256.is_some()) {
        let again = replay
            .outputs
            .iter()
            .find(|r| r.path == record.path)
            .with_context(|| format!("replay did not produce {}", record.path))?;
        if again.sha256 != record.sha256 {
            bail!("{} differs on replay", record.path);
        }
        checked += 1;
    }
    Ok(checked)
}
