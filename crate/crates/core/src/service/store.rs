//! Append-only journal store for enrollment records.
//!
//! Each mutation is one JSON line: an `enroll` carrying the record, or a
//! `revoke` tombstone. Opening replays the journal and rewrites it compacted
//! (live records only) via a temp file + atomic rename, so a crash mid-write
//! never loses acknowledged enrollments.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::protect::ProtectedTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRecord {
    pub user_id: String,
    pub key_id: String,
    pub template: ProtectedTemplate,
    /// Unix seconds.
    pub enrolled_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalLine {
    Enroll { record: EnrollmentRecord },
    Revoke { user_id: String, key_id: String },
}

pub struct TemplateStore {
    journal_path: PathBuf,
    journal: File,
    records: BTreeMap<(String, String), EnrollmentRecord>,
}

impl TemplateStore {
    /// Open (or create) a journal, replay it, and compact.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let mut records = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<JournalLine>(&line) {
                    Ok(JournalLine::Enroll { record }) => {
                        records.insert(
                            (record.user_id.clone(), record.key_id.clone()),
                            record,
                        );
                    }
                    Ok(JournalLine::Revoke { user_id, key_id }) => {
                        records.remove(&(user_id, key_id));
                    }
                    Err(e) => {
                        return Err(ServiceError::CorruptJournal(format!(
                            "{}: {e}",
                            path.display()
                        )))
                    }
                }
            }
        }

        // Compact: rewrite live records then swap in.
        let tmp = path.with_extension("journal.tmp");
        {
            let mut out = File::create(&tmp)?;
            for record in records.values() {
                let line = serde_json::to_string(&JournalLine::Enroll {
                    record: record.clone(),
                })?;
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
            }
            out.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;

        let journal = OpenOptions::new().append(true).open(path)?;
        Ok(Self { journal_path: path.to_path_buf(), journal, records })
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal_path
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn append(&mut self, line: &JournalLine) -> Result<(), ServiceError> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        self.journal.write_all(text.as_bytes())?;
        self.journal.sync_data()?;
        Ok(())
    }

    pub fn enroll(&mut self, record: EnrollmentRecord) -> Result<(), ServiceError> {
        let key = (record.user_id.clone(), record.key_id.clone());
        if self.records.contains_key(&key) {
            return Err(ServiceError::Duplicate {
                user_id: record.user_id,
                key_id: record.key_id,
            });
        }
        self.append(&JournalLine::Enroll { record: record.clone() })?;
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, user_id: &str, key_id: &str) -> Option<&EnrollmentRecord> {
        self.records.get(&(user_id.to_string(), key_id.to_string()))
    }

    pub fn revoke(&mut self, user_id: &str, key_id: &str) -> Result<(), ServiceError> {
        let key = (user_id.to_string(), key_id.to_string());
        if !self.records.contains_key(&key) {
            return Err(ServiceError::NotEnrolled {
                user_id: user_id.to_string(),
                key_id: key_id.to_string(),
            });
        }
        self.append(&JournalLine::Revoke {
            user_id: user_id.to_string(),
            key_id: key_id.to_string(),
        })?;
        self.records.remove(&key);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protect::TEMPLATE_VERSION;

    fn template(key_id: &str) -> ProtectedTemplate {
        ProtectedTemplate {
            version: TEMPLATE_VERSION,
            k: 10,
            t: 50,
            d: 4,
            key_id: key_id.to_string(),
            z_t: vec![0.1, -0.2, 0.3, 0.4],
        }
    }

    fn record(user: &str, key_id: &str) -> EnrollmentRecord {
        EnrollmentRecord {
            user_id: user.to_string(),
            key_id: key_id.to_string(),
            template: template(key_id),
            enrolled_at: 1_700_000_000,
        }
    }

    #[test]
    fn enroll_get_revoke() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        let mut store = TemplateStore::open(&path).unwrap();
        store.enroll(record("alice", "aa")).unwrap();
        assert_eq!(store.len(), 1);
        assert!(store.get("alice", "aa").is_some());

        let dup = store.enroll(record("alice", "aa"));
        assert!(matches!(dup, Err(ServiceError::Duplicate { .. })));

        store.revoke("alice", "aa").unwrap();
        assert!(store.get("alice", "aa").is_none());
        assert!(matches!(
            store.revoke("alice", "aa"),
            Err(ServiceError::NotEnrolled { .. })
        ));
    }

    #[test]
    fn restart_preserves_state_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        {
            let mut store = TemplateStore::open(&path).unwrap();
            store.enroll(record("alice", "aa")).unwrap();
            store.enroll(record("bob", "bb")).unwrap();
            store.enroll(record("alice", "cc")).unwrap();
            store.revoke("alice", "aa").unwrap();
        }
        // 4 journal lines exist before compaction.
        assert_eq!(
            std::fs::read_to_string(&path).unwrap().lines().count(),
            4
        );
        let store = TemplateStore::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert!(store.get("alice", "aa").is_none());
        assert!(store.get("bob", "bb").is_some());
        assert!(store.get("alice", "cc").is_some());
        // Compaction rewrote only live records.
        assert_eq!(
            std::fs::read_to_string(&path).unwrap().lines().count(),
            2
        );
    }

    #[test]
    fn corrupt_journal_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            TemplateStore::open(&path),
            Err(ServiceError::CorruptJournal(_))
        ));
    }
}
