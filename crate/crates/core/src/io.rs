//! Atomic file writes and versioned binary envelopes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = tmp
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

/// Serializes `value` tagged with a kind string and format version.
pub fn save_versioned<T: Serialize>(path: impl AsRef<Path>, kind: &str, version: u32, value: &T) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        version,
        payload: value,
    };
    let bytes = bincode::serialize(&env).map_err(|e| Error::Serialization(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a value written by [`save_versioned`], checking kind and version.
pub fn load_versioned<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str, version: u32) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = bincode::deserialize(&bytes)
        .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
    if env.kind != kind || env.version != version {
        return Err(Error::Serialization(format!(
            "{}: expected {kind} v{version}, found {} v{}",
            path.display(),
            env.kind,
            env.version
        )));
    }
    Ok(env.payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versioned_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.bin");
        save_versioned(&path, "thing", 2, &vec![1u32, 2, 3]).unwrap();
        let back: Vec<u32> = load_versioned(&path, "thing", 2).unwrap();
        assert_eq!(back, vec![1, 2, 3]);
        assert!(load_versioned::<Vec<u32>>(&path, "thing", 3).is_err());
        assert!(load_versioned::<Vec<u32>>(&path, "other", 2).is_err());
        assert!(!dir.path().join("sub/x.bin.tmp").exists());
    }
}
