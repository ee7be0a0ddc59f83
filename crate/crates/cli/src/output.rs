//! Provenance records and all-or-nothing output writing.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use ddspec_core::io::write_annotated_traces;
use ddspec_core::model::CoherenceTrace;

/// Prefix of the CSV comment line holding the configuration.
pub const CONFIG_COMMENT: &str = "config: ";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// What produced a file: tool version, command, seed and the exact
/// configuration, so the file can be regenerated from itself.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputDigest>,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &'static str, config: Value, inputs: Vec<InputDigest>) -> Self {
        let canonical = serde_json::to_string(&config).expect("JSON values serialize");
        Self {
            tool: "ddspec",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.get("seed").and_then(Value::as_u64),
            config_sha256: sha256_hex(canonical.as_bytes()),
            inputs,
            config,
        }
    }

    /// Comment lines for CSV outputs. The configuration is the last line.
    pub fn comment_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("{} {} {}", self.tool, self.version, self.command)];
        if let Some(seed) = self.seed {
            lines.push(format!("seed: {seed}"));
        }
        lines.push(format!("config_sha256: {}", self.config_sha256));
        for i in &self.inputs {
            lines.push(format!("input: {} sha256 {}", i.path, i.sha256));
        }
        lines.push(format!(
            "{CONFIG_COMMENT}{}",
            serde_json::to_string(&self.config).expect("JSON values serialize")
        ));
        lines
    }
}

/// Output files collected in memory and written only once every stage
/// has succeeded.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// JSON document `{ "provenance": ..., <body fields> }`.
    pub fn add_json<T: Serialize>(
        &mut self,
        name: &str,
        prov: &Provenance,
        body: &T,
    ) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("provenance".into(), serde_json::to_value(prov)?);
        match serde_json::to_value(body)? {
            Value::Object(fields) => doc.extend(fields),
            other => {
                doc.insert("result".into(), other);
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_traces(
        &mut self,
        name: &str,
        prov: &Provenance,
        traces: &[CoherenceTrace],
    ) -> Result<()> {
        let mut bytes = Vec::new();
        write_annotated_traces(&mut bytes, &prov.comment_lines(), traces)?;
        self.add(name, bytes);
        Ok(())
    }

    /// Arbitrary CSV table with the provenance comment block on top.
    pub fn add_table(
        &mut self,
        name: &str,
        prov: &Provenance,
        header: &[&str],
        rows: &[Vec<String>],
    ) {
        let mut bytes = Vec::new();
        for line in prov.comment_lines() {
            let _ = writeln!(bytes, "# {line}");
        }
        let _ = writeln!(bytes, "{}", header.join(","));
        for row in rows {
            let _ = writeln!(bytes, "{}", row.join(","));
        }
        self.add(name, bytes);
    }

    /// Writes every file through a temporary sibling and a rename, so a
    /// reader never sees a half-written file.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
                .with_context(|| format!("creating a temporary file in {}", self.dir.display()))?;
            tmp.write_all(bytes)?;
            tmp.flush()?;
            staged.push((tmp, self.dir.join(name)));
        }
        let mut written = Vec::new();
        for (tmp, path) in staged {
            tmp.persist(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}
