use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of a completed stage: what went in and what came out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub input_digest: String,
    /// Output path (relative to the workdir when inside it) to sha256.
    pub outputs: BTreeMap<String, String>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Files under `path` (or `path` itself), in a stable order. Missing paths yield nothing.
pub fn files_under(path: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if path.is_dir() {
        walk(path, &mut out)?;
    } else if path.exists() {
        out.push(path.to_path_buf());
    }
    Ok(out)
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(crate::io::sha256_hex(&fs::read(path)?))
}

/// Digest over a stage name, its configuration and the content of its inputs.
/// Input paths are named relative to `base` so moving a workdir keeps digests.
pub fn input_digest(stage: &str, config: &serde_json::Value, inputs: &[PathBuf], base: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for input in inputs {
        for f in files_under(input)? {
            let name = f.strip_prefix(base).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            h.update([0]);
            h.update(name.as_bytes());
            h.update([0]);
            h.update(file_sha256(&f)?.as_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn output_hashes(outputs: &[PathBuf], base: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for o in outputs {
        for f in files_under(o)? {
            let name = f.strip_prefix(base).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            map.insert(name, file_sha256(&f)?);
        }
    }
    Ok(map)
}

impl Stamp {
    /// True when every recorded output still exists with the recorded content.
    pub fn outputs_intact(&self, base: &Path) -> bool {
        self.outputs.iter().all(|(name, sha)| {
            let p = if Path::new(name).is_absolute() { PathBuf::from(name) } else { base.join(name) };
            file_sha256(&p).map(|s| &s == sha).unwrap_or(false)
        })
    }
}

/// Exclusive claim on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> io::Result<Option<Self>> {
        fs::create_dir_all(workdir)?;
        let path = workdir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Some(Self { path }))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_content_not_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::create_dir_all(d.join("x")).unwrap();
            fs::write(d.join("x/1.txt"), "one").unwrap();
        }
        let cfg = serde_json::json!({"k": 1});
        let da = input_digest("s", &cfg, &[a.path().join("x")], a.path()).unwrap();
        let db = input_digest("s", &cfg, &[b.path().join("x")], b.path()).unwrap();
        assert_eq!(da, db);
        fs::write(b.path().join("x/1.txt"), "two").unwrap();
        assert_ne!(da, input_digest("s", &cfg, &[b.path().join("x")], b.path()).unwrap());
        assert_ne!(da, input_digest("s", &serde_json::json!({"k": 2}), &[a.path().join("x")], a.path()).unwrap());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let l = WorkdirLock::acquire(d.path()).unwrap().unwrap();
        assert!(WorkdirLock::acquire(d.path()).unwrap().is_none());
        drop(l);
        assert!(WorkdirLock::acquire(d.path()).unwrap().is_some());
    }
}
