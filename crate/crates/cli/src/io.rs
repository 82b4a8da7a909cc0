//! Atomic writes, the output-directory lock, checksums and stage manifests.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_SCHEMA: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Write to a sibling temp file, flush to disk, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Io(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".tlc.lock";

    pub fn acquire(out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is in use by another process (remove {} if it is stale)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Provenance record left by every stage. Paths are relative to the run
/// directory; no timestamps, so reruns reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!(
                "missing manifest {} ({e}); run the producing stage first",
                path.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Artifact writer rooted at a run directory.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    pub fn new(root: &Path, manifest: Manifest) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Write an output atomically and record its checksum.
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(rel, text.as_bytes())
    }

    /// Read an input produced by `stage`, refusing it when its checksum no
    /// longer matches that stage's manifest.
    pub fn take(&mut self, rel: &str, producer: &Manifest) -> CliResult<Vec<u8>> {
        let expected = producer
            .outputs
            .get(rel)
            .ok_or_else(|| CliError::Config(format!("{rel} is not an output of the `{}` stage", producer.stage)))?;
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let got = sha256_hex(&bytes);
        if &got != expected {
            return Err(CliError::Config(format!(
                "{rel} does not match the checksum recorded by `{}`; rerun that stage",
                producer.stage
            )));
        }
        self.manifest.inputs.insert(rel.to_string(), got);
        Ok(bytes)
    }

    /// Write the manifest last, so its presence marks a finished stage.
    pub fn finish(self, rel: &str) -> CliResult<Manifest> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.path(rel), text.as_bytes())?;
        Ok(self.manifest)
    }
}

/// Write `rows` as CSV with `header`. Values use the shortest round-trip form.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Config(_))));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn tampered_inputs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunDir::new(dir.path(), Manifest::new("producer", "h", 0));
        w.put("data/x.bin", b"payload").unwrap();
        let producer = w.finish("data/manifest_producer.json").unwrap();
        let mut r = RunDir::new(dir.path(), Manifest::new("consumer", "h", 0));
        assert_eq!(r.take("data/x.bin", &producer).unwrap(), b"payload");
        fs::write(dir.path().join("data/x.bin"), b"changed").unwrap();
        assert!(matches!(r.take("data/x.bin", &producer), Err(CliError::Config(_))));
        assert!(matches!(r.take("data/y.bin", &producer), Err(CliError::Config(_))));
    }

    #[test]
    fn csv_layout() {
        let b = csv(&["a", "b"], vec![vec!["1".into(), "2".into()]]);
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n1,2\n");
    }
}
