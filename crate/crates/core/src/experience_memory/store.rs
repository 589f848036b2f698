use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use super::{merge, validate_store_document, ExperienceRecord, MergeError, SchemaErrors};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error at {path}: {message}")]
    Storage { path: PathBuf, message: String },
    #[error("schema error in {path}: {errors}")]
    Schema { path: PathBuf, errors: SchemaErrors },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

fn storage(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Storage { path: path.to_path_buf(), message: e.to_string() }
}

/// Per-user experience records, optionally backed by a directory holding one
/// `<user>.json` document per user.
///
/// Reads take a shared lock. Writes for the same user are serialized by a
/// per-user lock, so writers for different users do not wait on each other's
/// file I/O.
#[derive(Debug, Default)]
pub struct ExperienceStore {
    dir: Option<PathBuf>,
    records: RwLock<BTreeMap<String, ExperienceRecord>>,
    user_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// File stem for a user id: ASCII alphanumerics, `-` and `_` pass through,
/// every other byte becomes `%XX`.
pub fn user_file_stem(user_id: &str) -> String {
    let mut out = String::with_capacity(user_id.len());
    for b in user_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl ExperienceStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (creating if needed) a store directory and load every record in it.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
        let mut store = Self::load(dir)?;
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    /// Load a store directory without attaching it. A missing directory or
    /// empty files load as nothing.
    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let mut records = BTreeMap::new();
        if dir.exists() {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| storage(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for path in paths {
                if let Some(record) = load_record_file(&path)? {
                    records.insert(record.user_id.clone(), record);
                }
            }
        }
        Ok(Self { dir: None, records: RwLock::new(records), user_locks: Mutex::default() })
    }

    /// Write every record into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
        for record in self.records.read().expect("store lock").values() {
            write_record(dir, record)?;
        }
        Ok(())
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, user_id: &str) -> Option<ExperienceRecord> {
        self.records.read().expect("store lock").get(user_id).cloned()
    }

    pub fn users(&self) -> Vec<String> {
        self.records.read().expect("store lock").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn user_lock(&self, user_id: &str) -> Arc<Mutex<()>> {
        self.user_locks.lock().expect("lock table").entry(user_id.to_string()).or_default().clone()
    }

    /// Replace the user's record, writing through to disk when attached.
    pub fn put(&self, record: ExperienceRecord) -> Result<(), StoreError> {
        let lock = self.user_lock(&record.user_id);
        let _guard = lock.lock().expect("user lock");
        if let Some(dir) = &self.dir {
            write_record(dir, &record)?;
        }
        self.records.write().expect("store lock").insert(record.user_id.clone(), record);
        Ok(())
    }

    /// Merge `fresh` into the user's existing record and store the result.
    pub fn merge_into(&self, fresh: &ExperienceRecord) -> Result<ExperienceRecord, StoreError> {
        let lock = self.user_lock(&fresh.user_id);
        let _guard = lock.lock().expect("user lock");
        let merged = match self.get(&fresh.user_id) {
            Some(existing) => merge(&existing, fresh)?,
            None => fresh.clone(),
        };
        if let Some(dir) = &self.dir {
            write_record(dir, &merged)?;
        }
        self.records.write().expect("store lock").insert(merged.user_id.clone(), merged.clone());
        Ok(merged)
    }

    /// Remove one user's record. Returns whether anything was removed.
    pub fn clear(&self, user_id: &str) -> Result<bool, StoreError> {
        let lock = self.user_lock(user_id);
        let _guard = lock.lock().expect("user lock");
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", user_file_stem(user_id)));
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(storage(&path, e)),
            }
        }
        Ok(self.records.write().expect("store lock").remove(user_id).is_some())
    }

    /// Remove every record.
    pub fn clear_all(&self) -> Result<usize, StoreError> {
        let users = self.users();
        for u in &users {
            self.clear(u)?;
        }
        Ok(users.len())
    }
}

fn load_record_file(path: &Path) -> Result<Option<ExperienceRecord>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| storage(path, e))?;
    validate_store_document(&doc).map(Some).map_err(|errors| StoreError::Schema { path: path.to_path_buf(), errors })
}

fn write_record(dir: &Path, record: &ExperienceRecord) -> Result<(), StoreError> {
    let path = dir.join(format!("{}.json", user_file_stem(&record.user_id)));
    let tmp = dir.join(format!(".{}.json.tmp", user_file_stem(&record.user_id)));
    let mut f = fs::File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    f.write_all(record.to_json().as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.sync_all())
        .map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| storage(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience_memory::{MemoryComponents, ProcedureSop, SchemaError};
    use chrono::{TimeZone, Utc};

    fn record(user: &str) -> ExperienceRecord {
        ExperienceRecord {
            user_id: user.into(),
            updated_at: Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap(),
            components: MemoryComponents {
                user_profiles: vec!["medical student".into()],
                semantic_memory: vec!["Normal CSF opening pressure is 80 to 180 mmH2O".into()],
                procedural_memory: vec![ProcedureSop {
                    scenario: "reference ranges".into(),
                    procedure: "search web".into(),
                    rationale: "encyclopedias omit values".into(),
                }],
            },
        }
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperienceStore::in_memory();
        store.put(record("u1")).unwrap();
        store.put(record("odd/user id")).unwrap();
        store.persist(dir.path()).unwrap();
        let loaded = ExperienceStore::load(dir.path()).unwrap();
        assert_eq!(loaded.users(), store.users());
        assert_eq!(loaded.get("odd/user id"), Some(record("odd/user id")));
        assert!(dir.path().join("odd%2Fuser%20id.json").exists());
    }

    #[test]
    fn write_through_and_clear() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperienceStore::open(dir.path()).unwrap();
        store.put(record("u1")).unwrap();
        assert_eq!(ExperienceStore::load(dir.path()).unwrap().len(), 1);
        assert!(store.clear("u1").unwrap());
        assert!(!store.clear("u1").unwrap());
        assert!(ExperienceStore::load(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn extra_key_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut doc = serde_json::to_value(record("u1")).unwrap();
        doc["mood"] = "happy".into();
        fs::write(dir.path().join("u1.json"), doc.to_string()).unwrap();
        match ExperienceStore::load(dir.path()) {
            Err(StoreError::Schema { errors, .. }) => {
                assert!(errors.contains(&SchemaError::ExtraKey("mood".into())))
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_and_missing_dir_load_empty() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("u1.json"), "").unwrap();
        assert!(ExperienceStore::load(dir.path()).unwrap().is_empty());
        assert!(ExperienceStore::load(&dir.path().join("nope")).unwrap().is_empty());
    }

    #[test]
    fn merge_into_unions() {
        let store = ExperienceStore::in_memory();
        store.put(record("u1")).unwrap();
        let mut fresh = record("u1");
        fresh.components.semantic_memory.push("new fact".into());
        let merged = store.merge_into(&fresh).unwrap();
        assert_eq!(merged.components.semantic_memory.len(), 2);
        assert_eq!(store.get("u1").unwrap(), merged);
    }

    #[test]
    fn concurrent_writers_for_distinct_users() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ExperienceStore::open(dir.path()).unwrap());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let s = store.clone();
                std::thread::spawn(move || {
                    for _ in 0..5 {
                        s.put(record(&format!("user{i}"))).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(ExperienceStore::load(dir.path()).unwrap().len(), 8);
    }
}
