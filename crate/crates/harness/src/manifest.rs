//! On-disk cell cache and run manifest.
//!
//! Every unit of work (a "cell") stores its result as JSON under
//! `<out>/cells/` and is listed in `<out>/manifest.json`. A rerun with the
//! same config reads finished cells instead of recomputing them; a changed
//! config hash starts the run afresh.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub completed: BTreeSet<String>,
}

pub fn component_versions() -> BTreeMap<String, String> {
    [
        ("upcycle-core", upcycle_core::VERSION),
        ("upcycle-train", upcycle_train::VERSION),
        ("upcycle-harness", env!("CARGO_PKG_VERSION")),
        ("format", "UPCK-v1"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub struct CellStore {
    dir: PathBuf,
    manifest: Mutex<Manifest>,
    /// When set, missing cells are an error instead of being computed.
    read_only: bool,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl CellStore {
    /// Opens (or creates) the store under `dir`. A manifest written for a
    /// different config hash is discarded together with its cells.
    pub fn open(dir: &Path, config_hash: &str, read_only: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("cells"))?;
        let path = dir.join("manifest.json");
        let mut manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
            Err(e) => return Err(e.into()),
        };
        if manifest.config_hash != config_hash {
            if !manifest.completed.is_empty() {
                log::warn!(
                    "config hash changed ({} -> {config_hash}); discarding {} cached cells",
                    manifest.config_hash,
                    manifest.completed.len()
                );
            }
            fs::remove_dir_all(dir.join("cells"))?;
            fs::create_dir_all(dir.join("cells"))?;
            manifest = Manifest {
                config_hash: config_hash.into(),
                versions: component_versions(),
                completed: BTreeSet::new(),
            };
        }
        manifest.versions = component_versions();
        let store = CellStore {
            dir: dir.to_path_buf(),
            manifest: Mutex::new(manifest),
            read_only,
        };
        if !read_only {
            store.flush()?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn cell_path(&self, key: &str) -> PathBuf {
        self.dir.join("cells").join(format!("{}.json", key.replace('/', "__")))
    }

    fn flush(&self) -> Result<()> {
        let m = self.manifest.lock().expect("manifest lock");
        let bytes = serde_json::to_vec_pretty(&*m)?;
        write_atomic(&self.dir.join("manifest.json"), &bytes)
    }

    pub fn is_done(&self, key: &str) -> bool {
        self.manifest.lock().expect("manifest lock").completed.contains(key) && self.cell_path(key).exists()
    }

    pub fn completed(&self) -> BTreeSet<String> {
        self.manifest.lock().expect("manifest lock").completed.clone()
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        if !self.is_done(key) {
            return Ok(None);
        }
        let bytes = fs::read(self.cell_path(key))?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        if self.read_only {
            return Err(HarnessError::Config(format!("store is read-only; cannot write {key}")));
        }
        write_atomic(&self.cell_path(key), &serde_json::to_vec(value)?)?;
        self.manifest
            .lock()
            .expect("manifest lock")
            .completed
            .insert(key.to_string());
        self.flush()
    }

    /// Cached value for `key`, or `compute()` stored under `key`.
    pub fn cell<T, F>(&self, key: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.get(key)? {
            log::debug!("cached {key}");
            return Ok(v);
        }
        if self.read_only {
            return Err(HarnessError::Config(format!(
                "cell {key} has not been computed; run the corresponding sweep first"
            )));
        }
        log::info!("computing {key}");
        let v = compute()?;
        self.put(key, &v)?;
        Ok(v)
    }

    pub fn read_only(&self) -> bool {
        self.read_only
    }
}
