//! On-disk layout of the journaled in-process broker.
//!
//! ```text
//! <root>/.lock                       exclusive lock serializing every process
//! <root>/<topic>/<partition>.log     length-prefixed records
//! <root>/groups/<group>.offsets      {"<topic>":{"<partition>":next_offset}}
//! <root>/groups/<group>.members      group membership and generation
//! ```
//!
//! Each log record is a 4-byte big-endian payload length followed by the
//! payload: 8-byte big-endian append time (ms), 4-byte big-endian key
//! length (`0xFFFFFFFF` when there is no key), the key bytes, then the
//! value bytes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BrokerError, TopicPartition};

pub(super) const GROUPS_DIR: &str = "groups";
const NO_KEY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct StoredRecord {
    pub key: Option<Vec<u8>>,
    pub value: Vec<u8>,
    pub append_time_ms: i64,
}

pub(super) fn frame(record: &StoredRecord) -> Vec<u8> {
    let key_len = record.key.as_ref().map_or(0, Vec::len);
    let payload_len = 8 + 4 + key_len + record.value.len();
    let mut out = Vec::with_capacity(4 + payload_len);
    out.extend_from_slice(&(payload_len as u32).to_be_bytes());
    out.extend_from_slice(&record.append_time_ms.to_be_bytes());
    match &record.key {
        Some(key) => {
            out.extend_from_slice(&(key.len() as u32).to_be_bytes());
            out.extend_from_slice(key);
        }
        None => out.extend_from_slice(&NO_KEY.to_be_bytes()),
    }
    out.extend_from_slice(&record.value);
    out
}

/// Parses complete frames from `bytes`, returning them and the number of
/// bytes consumed. A trailing partial frame is left unconsumed.
pub(super) fn unframe(bytes: &[u8]) -> Result<(Vec<StoredRecord>, usize), BrokerError> {
    let mut records = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if bytes.len() - pos - 4 < len {
            break;
        }
        let payload = &bytes[pos + 4..pos + 4 + len];
        if payload.len() < 12 {
            return Err(BrokerError::Storage(format!("corrupt record at byte {pos}")));
        }
        let append_time_ms = i64::from_be_bytes(payload[0..8].try_into().unwrap());
        let key_len = u32::from_be_bytes(payload[8..12].try_into().unwrap());
        let (key, value_start) = if key_len == NO_KEY {
            (None, 12)
        } else {
            let end = 12 + key_len as usize;
            if end > payload.len() {
                return Err(BrokerError::Storage(format!("corrupt key at byte {pos}")));
            }
            (Some(payload[12..end].to_vec()), end)
        };
        records.push(StoredRecord {
            key,
            value: payload[value_start..].to_vec(),
            append_time_ms,
        });
        pos += 4 + len;
    }
    Ok((records, pos))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(super) struct MemberEntry {
    pub topics: Vec<String>,
    pub last_seen_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(super) struct MembersFile {
    pub generation: u64,
    pub members: BTreeMap<String, MemberEntry>,
}

pub(super) struct Disk {
    root: PathBuf,
    lock: File,
}

impl Disk {
    pub fn open(root: &Path) -> Result<Self, BrokerError> {
        fs::create_dir_all(root.join(GROUPS_DIR))?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join(".lock"))?;
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn lock(&self) -> Result<(), BrokerError> {
        self.lock.lock()?;
        Ok(())
    }

    pub fn unlock(&self) {
        let _ = self.lock.unlock();
    }

    fn log_path(&self, topic: &str, partition: u32) -> PathBuf {
        self.root.join(topic).join(format!("{partition}.log"))
    }

    /// Partition count of a topic on disk, if it exists.
    pub fn topic_partitions(&self, topic: &str) -> Result<Option<u32>, BrokerError> {
        let dir = self.root.join(topic);
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut count = 0;
        while dir.join(format!("{count}.log")).is_file() {
            count += 1;
        }
        Ok((count > 0).then_some(count))
    }

    pub fn create_topic(&self, topic: &str, partitions: u32) -> Result<(), BrokerError> {
        fs::create_dir_all(self.root.join(topic))?;
        for p in 0..partitions {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.log_path(topic, p))?;
        }
        Ok(())
    }

    /// Reads records appended after byte `from`, truncating a torn tail.
    pub fn read_from(
        &self,
        topic: &str,
        partition: u32,
        from: u64,
    ) -> Result<(Vec<StoredRecord>, u64), BrokerError> {
        let path = self.log_path(topic, partition);
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        let len = file.metadata()?.len();
        if len <= from {
            return Ok((Vec::new(), from));
        }
        file.seek(SeekFrom::Start(from))?;
        let mut buf = Vec::with_capacity((len - from) as usize);
        file.read_to_end(&mut buf)?;
        let (records, used) = unframe(&buf)?;
        let end = from + used as u64;
        if end < len {
            // only a crash mid-append leaves a partial frame; we hold the lock
            file.set_len(end)?;
        }
        Ok((records, end))
    }

    pub fn append(
        &self,
        topic: &str,
        partition: u32,
        record: &StoredRecord,
    ) -> Result<u64, BrokerError> {
        let mut file = OpenOptions::new()
            .append(true)
            .open(self.log_path(topic, partition))?;
        file.write_all(&frame(record))?;
        file.flush()?;
        Ok(file.metadata()?.len())
    }

    fn group_path(&self, group: &str, ext: &str) -> PathBuf {
        self.root.join(GROUPS_DIR).join(format!("{group}.{ext}"))
    }

    pub fn read_offsets(&self, group: &str) -> Result<BTreeMap<TopicPartition, u64>, BrokerError> {
        let path = self.group_path(group, "offsets");
        let mut out = BTreeMap::new();
        let Some(raw) = read_optional(&path)? else {
            return Ok(out);
        };
        let nested: BTreeMap<String, BTreeMap<String, u64>> = serde_json::from_slice(&raw)
            .map_err(|e| BrokerError::Storage(format!("{}: {e}", path.display())))?;
        for (topic, parts) in nested {
            for (partition, next) in parts {
                let partition = partition
                    .parse()
                    .map_err(|_| BrokerError::Storage(format!("bad partition in {}", path.display())))?;
                out.insert(TopicPartition::new(&topic, partition), next);
            }
        }
        Ok(out)
    }

    pub fn write_offsets(
        &self,
        group: &str,
        offsets: &BTreeMap<TopicPartition, u64>,
    ) -> Result<(), BrokerError> {
        let mut nested: BTreeMap<&str, BTreeMap<String, u64>> = BTreeMap::new();
        for (tp, next) in offsets {
            nested
                .entry(&tp.topic)
                .or_default()
                .insert(tp.partition.to_string(), *next);
        }
        let raw = serde_json::to_vec(&nested).expect("offsets serialize");
        write_atomic(&self.group_path(group, "offsets"), &raw)
    }

    pub fn read_members(&self, group: &str) -> Result<MembersFile, BrokerError> {
        let path = self.group_path(group, "members");
        match read_optional(&path)? {
            Some(raw) => serde_json::from_slice(&raw)
                .map_err(|e| BrokerError::Storage(format!("{}: {e}", path.display()))),
            None => Ok(MembersFile::default()),
        }
    }

    pub fn write_members(&self, group: &str, members: &MembersFile) -> Result<(), BrokerError> {
        let raw = serde_json::to_vec(members).expect("members serialize");
        write_atomic(&self.group_path(group, "members"), &raw)
    }
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, BrokerError> {
    match fs::read(path) {
        Ok(raw) => Ok(Some(raw)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BrokerError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
