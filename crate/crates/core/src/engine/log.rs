//! Append-only event log.
//!
//! Record: `len u32 BE | JSON payload (len bytes) | first 4 bytes of SHA-256(payload)`.
//! A torn or corrupt tail is dropped on open and overwritten by the next append.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::EngineEvent;

const CHECK_LEN: usize = 4;
/// Upper bound on one record; guards against reading garbage lengths.
const MAX_RECORD: usize = 1 << 20;

fn check(payload: &[u8]) -> [u8; CHECK_LEN] {
    let d = Sha256::digest(payload);
    [d[0], d[1], d[2], d[3]]
}

pub fn encode_record(event: &EngineEvent) -> Vec<u8> {
    let payload = serde_json::to_vec(event).expect("events serialize");
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&check(&payload));
    out
}

/// Parses records until the first incomplete or corrupt one. Returns the
/// events and the byte length of the valid prefix.
pub fn decode_records(bytes: &[u8]) -> (Vec<EngineEvent>, usize) {
    let mut events = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if len > MAX_RECORD || bytes.len() - pos - 4 < len + CHECK_LEN {
            break;
        }
        let payload = &bytes[pos + 4..pos + 4 + len];
        if bytes[pos + 4 + len..pos + 4 + len + CHECK_LEN] != check(payload) {
            break;
        }
        match serde_json::from_slice(payload) {
            Ok(ev) => events.push(ev),
            Err(_) => break,
        }
        pos += 4 + len + CHECK_LEN;
    }
    (events, pos)
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    events: Vec<EngineEvent>,
    /// Bytes dropped from a torn tail when the log was opened.
    dropped_tail: usize,
}

impl EventLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (events, valid) = decode_records(&bytes);
        let dropped_tail = bytes.len() - valid;
        if dropped_tail > 0 {
            file.set_len(valid as u64)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self { path, file, events, dropped_tail })
    }

    pub fn read(path: impl AsRef<Path>) -> io::Result<Vec<EngineEvent>> {
        Ok(decode_records(&std::fs::read(path)?).0)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn events(&self) -> &[EngineEvent] {
        &self.events
    }

    pub fn dropped_tail(&self) -> usize {
        self.dropped_tail
    }

    pub fn next_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq + 1)
    }

    /// Durable before it returns.
    pub fn append(&mut self, event: EngineEvent) -> io::Result<()> {
        self.file.write_all(&encode_record(&event))?;
        self.file.sync_data()?;
        self.events.push(event);
        Ok(())
    }
}
