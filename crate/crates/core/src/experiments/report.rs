use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON encoding of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

/// `v<crate version>`, extended with `QDLAB_GIT_DESCRIBE` when that is set at
/// build time.
pub fn version_string() -> String {
    match option_env!("QDLAB_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

/// Written next to a report's tables and charts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: String,
    pub config_hash: String,
    pub version: String,
    pub files: Vec<OutputFile>,
}

/// Collects the files of one report in a directory and records their hashes.
pub struct ReportWriter {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl ReportWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.name != name);
        self.files.push(OutputFile {
            name: name.to_string(),
            sha256: sha256_hex(data),
        });
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        self.bytes(name, text.as_bytes())
    }

    /// Writes `rows` as CSV and returns the text.
    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<String> {
        let text = to_csv(rows)?;
        self.text(name, &text)?;
        Ok(text)
    }

    pub fn finish(self, experiment: &str, config_hash: &str) -> Result<Provenance> {
        let prov = Provenance {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            version: version_string(),
            files: self.files,
        };
        let path = self.dir.join("provenance.json");
        let text = serde_json::to_string_pretty(&prov)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(prov)
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv encoding: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// File-name-safe form of a method or arm label.
pub fn slug(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Mean and sample standard deviation; the deviation is zero for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("QDT(ME-LS)"), "qdt-me-ls");
        assert_eq!(slug("density:0.5"), "density-0.5");
        assert_eq!(slug("upper-part:1:0"), "upper-part-1-0");
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn writer_records_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ReportWriter::new(&dir.path().join("out")).unwrap();
        w.text("a.txt", "hello").unwrap();
        w.text("a.txt", "hello again").unwrap();
        let prov = w.finish("demo", "abc").unwrap();
        assert_eq!(prov.files.len(), 1);
        assert_eq!(prov.files[0].sha256, sha256_hex(b"hello again"));
        let back: Provenance =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/provenance.json")).unwrap()).unwrap();
        assert_eq!(back, prov);
    }
}
