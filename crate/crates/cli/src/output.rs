//! Run artifacts: `<subcommand>_<tag>.csv`, `<subcommand>_<tag>_summary.json`
//! and the manifest `<subcommand>_<tag>_run.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use iioss_core::io::round12;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// JSON number with 12 significant digits; non-finite values become the
/// strings `inf`, `-inf`, `nan`.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        serde_json::Number::from_f64(round12(v)).map_or(Value::Null, Value::Number)
    } else {
        Value::String(iioss_core::io::fmt12(v))
    }
}

pub fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().copied().map(num).collect())
}

/// Serializes `v` and rounds every float in it to 12 significant digits.
pub fn rounded(v: &impl Serialize) -> Value {
    fn walk(v: Value) -> Value {
        match v {
            Value::Number(n) if n.is_f64() => num(n.as_f64().expect("f64 number")),
            Value::Array(a) => Value::Array(a.into_iter().map(walk).collect()),
            Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, walk(v))).collect()),
            other => other,
        }
    }
    walk(serde_json::to_value(v).expect("serializable value"))
}

pub struct Run {
    pub subcommand: String,
    pub tag: String,
    pub dir: PathBuf,
    pub outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(subcommand: &str, tag: &str, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            tag: tag.to_string(),
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn stem(&self) -> String {
        format!("{}_{}", self.subcommand, self.tag)
    }

    /// `<subcommand>_<tag><suffix>` inside the output directory, recorded as
    /// an output.
    pub fn file(&mut self, suffix: &str) -> PathBuf {
        let p = self.dir.join(format!("{}{suffix}", self.stem()));
        self.outputs.push(p.clone());
        p
    }

    pub fn csv(&mut self) -> PathBuf {
        self.file(".csv")
    }

    pub fn record(&mut self, paths: Vec<PathBuf>) {
        self.outputs.extend(paths);
    }

    pub fn write_summary(&mut self, summary: &Value) -> Result<()> {
        let p = self.file("_summary.json");
        fs::write(p, serde_json::to_string_pretty(summary)? + "\n")?;
        Ok(())
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<PathBuf> {
        let p = self.dir.join(format!("{}_run.json", self.stem()));
        let outputs: Vec<String> = self.outputs.iter().map(|o| o.display().to_string()).collect();
        let doc = serde_json::json!({
            "subcommand": self.subcommand,
            "tag": self.tag,
            "config_sha256": m.config_sha256,
            "seed": m.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": m.threads,
            "wall_time_s": num(m.wall_time_s),
            "timestamp_unix_s": SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            "exit_code": m.exit_code,
            "outputs": outputs,
        });
        fs::write(&p, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(p)
    }
}

pub struct Manifest {
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub exit_code: u8,
}

pub fn config_hash(effective: &toml::Table) -> String {
    let text = toml::to_string(effective).unwrap_or_default();
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
