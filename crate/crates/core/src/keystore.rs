//! Persistent XMSS key state with reserve-then-sign index discipline.
//!
//! The next-index counter is written durably before an index is handed out.
//! A crash between reservation and signing wastes that index; it is never
//! handed out again because reservations only live in memory.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use fs2::FileExt;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::xmss::{self, XmssError, XmssParams, XmssPublicKey, XmssSecret, XmssSignature};

pub const KEYSTATE_MAGIC: [u8; 4] = *b"XKS1";
pub const KEYSTATE_VERSION: u16 = 1;
pub const KEYSTATE_EXTENSION: &str = "xks";

const FLAG_WRAPPED: u8 = 0x01;
const HEADER_LEN: usize = 4 + 2 + 4 + 1 + 1 + 4 + 4;
const TAG_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum KeyStoreError {
    #[error("key exhausted: all {leaves} one-time keys have been reserved")]
    Exhausted { leaves: u64 },
    #[error("index {index} was never reserved (next index is {next})")]
    NeverReserved { index: u32, next: u32 },
    #[error("index {index} is not an open reservation; refusing to sign twice")]
    AlreadyConsumed { index: u32 },
    #[error("key state storage failed: {0}")]
    Storage(#[from] io::Error),
    #[error("key state {0} is locked by another process")]
    Locked(PathBuf),
    #[error("key state integrity tag mismatch")]
    Integrity,
    #[error("malformed key state: {0}")]
    Format(&'static str),
    #[error("key state already exists")]
    NotFresh,
    #[error("no key state found")]
    Missing,
    #[error("secret unwrap failed: {0}")]
    Unwrap(String),
    #[error(transparent)]
    Xmss(#[from] XmssError),
}

/// At-rest protection for the secret section of the state file.
pub trait SecretWrap: Send {
    fn seal(&self, plain: &[u8]) -> Vec<u8>;
    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, KeyStoreError>;
    /// `false` for the pass-through wrapper.
    fn is_active(&self) -> bool {
        true
    }
}

/// Stores the secret in the clear.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoWrap;

impl SecretWrap for NoWrap {
    fn seal(&self, plain: &[u8]) -> Vec<u8> {
        plain.to_vec()
    }

    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, KeyStoreError> {
        Ok(sealed.to_vec())
    }

    fn is_active(&self) -> bool {
        false
    }
}

/// Observer for every index handed to the XMSS signer.
pub trait SignAudit: Send + Sync {
    fn record(&self, index: u32);
}

/// In-memory audit trail, shareable across store lifetimes.
#[derive(Debug, Default, Clone)]
pub struct AuditTrail(Arc<Mutex<Vec<u32>>>);

impl AuditTrail {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.0.lock().unwrap().clone()
    }

    /// Indices that were signed more than once, ascending.
    pub fn duplicates(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        let mut dup = BTreeSet::new();
        for i in self.indices() {
            if !seen.insert(i) {
                dup.insert(i);
            }
        }
        dup.into_iter().collect()
    }
}

impl SignAudit for AuditTrail {
    fn record(&self, index: u32) {
        self.0.lock().unwrap().push(index);
    }
}

/// Where the encoded state lives. `persist` must be durable on return.
pub trait StateMedium: Send {
    fn load(&mut self) -> io::Result<Option<Vec<u8>>>;
    fn persist(&mut self, bytes: &[u8]) -> io::Result<()>;
}

/// A `.xks` file replaced by write-to-temp, fsync, rename, fsync(dir).
/// Holds an exclusive advisory lock on a sidecar `.lock` file.
#[derive(Debug)]
pub struct FileMedium {
    path: PathBuf,
    _lock: File,
}

impl FileMedium {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, KeyStoreError> {
        let path = path.as_ref().to_path_buf();
        let lock_path = lock_path(&path);
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path)?;
        lock.try_lock_exclusive().map_err(|_| KeyStoreError::Locked(path.clone()))?;
        Ok(Self { path, _lock: lock })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` atomically and durably.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // directory fsync is not supported everywhere; the rename is still atomic
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

impl StateMedium for FileMedium {
    fn load(&mut self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(&self.path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn persist(&mut self, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.path, bytes)
    }
}

#[derive(Debug, Default)]
struct MemoryCell {
    bytes: Option<Vec<u8>>,
    fail_writes: bool,
    writes: u64,
}

/// Shared in-memory medium with write-failure injection.
#[derive(Debug, Default, Clone)]
pub struct MemoryMedium(Arc<Mutex<MemoryCell>>);

impl MemoryMedium {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fail_writes(&self, fail: bool) {
        self.0.lock().unwrap().fail_writes = fail;
    }

    pub fn snapshot(&self) -> Option<Vec<u8>> {
        self.0.lock().unwrap().bytes.clone()
    }

    pub fn restore(&self, bytes: Option<Vec<u8>>) {
        self.0.lock().unwrap().bytes = bytes;
    }

    pub fn writes(&self) -> u64 {
        self.0.lock().unwrap().writes
    }
}

impl StateMedium for MemoryMedium {
    fn load(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.0.lock().unwrap().bytes.clone())
    }

    fn persist(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut cell = self.0.lock().unwrap();
        if cell.fail_writes {
            return Err(io::Error::other("injected write failure"));
        }
        cell.bytes = Some(bytes.to_vec());
        cell.writes += 1;
        Ok(())
    }
}

/// Decoded contents of a key state file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyStateFile {
    pub next_index: u32,
    pub secret: XmssSecret,
}

impl KeyStateFile {
    pub fn params(&self) -> XmssParams {
        self.secret.params()
    }

    /// magic ‖ version ‖ oid ‖ height ‖ flags ‖ next_index ‖ secret_len ‖
    /// secret ‖ SHA-256 tag over everything before it. Integers big-endian.
    pub fn encode(&self, wrap: &dyn SecretWrap) -> Vec<u8> {
        let params = self.params();
        let secret = wrap.seal(&self.secret.to_bytes());
        let mut out = Vec::with_capacity(HEADER_LEN + secret.len() + TAG_LEN);
        out.extend_from_slice(&KEYSTATE_MAGIC);
        out.extend_from_slice(&KEYSTATE_VERSION.to_be_bytes());
        out.extend_from_slice(&params.oid().to_be_bytes());
        out.push(params.height() as u8);
        out.push(if wrap.is_active() { FLAG_WRAPPED } else { 0 });
        out.extend_from_slice(&self.next_index.to_be_bytes());
        out.extend_from_slice(&(secret.len() as u32).to_be_bytes());
        out.extend_from_slice(&secret);
        let tag = Sha256::digest(&out);
        out.extend_from_slice(&tag);
        out
    }

    pub fn decode(bytes: &[u8], wrap: &dyn SecretWrap) -> Result<Self, KeyStoreError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(KeyStoreError::Format("truncated"));
        }
        let (body, tag) = bytes.split_at(bytes.len() - TAG_LEN);
        let digest: [u8; TAG_LEN] = Sha256::digest(body).into();
        if digest[..] != *tag {
            return Err(KeyStoreError::Integrity);
        }
        if body[..4] != KEYSTATE_MAGIC {
            return Err(KeyStoreError::Format("bad magic"));
        }
        if u16::from_be_bytes([body[4], body[5]]) != KEYSTATE_VERSION {
            return Err(KeyStoreError::Format("unsupported version"));
        }
        let oid = u32::from_be_bytes(body[6..10].try_into().unwrap());
        let params = XmssParams::from_oid(oid)?;
        if u32::from(body[10]) != params.height() {
            return Err(KeyStoreError::Format("height does not match parameter id"));
        }
        let flags = body[11];
        let next_index = u32::from_be_bytes(body[12..16].try_into().unwrap());
        let secret_len = u32::from_be_bytes(body[16..20].try_into().unwrap()) as usize;
        if body.len() != HEADER_LEN + secret_len {
            return Err(KeyStoreError::Format("secret length"));
        }
        if u64::from(next_index) > params.leaf_count() {
            return Err(KeyStoreError::Format("next index beyond key size"));
        }
        let sealed = &body[HEADER_LEN..];
        let secret_bytes = match (flags & FLAG_WRAPPED != 0, wrap.is_active()) {
            (true, true) | (false, false) => wrap.open(sealed)?,
            (true, false) => return Err(KeyStoreError::Unwrap("state is wrapped but no key was supplied".into())),
            (false, true) => return Err(KeyStoreError::Unwrap("state is not wrapped".into())),
        };
        let secret = XmssSecret::from_bytes(params, &secret_bytes)?;
        Ok(Self { next_index, secret })
    }
}

/// Owner of the single mutable secret. One handle per medium.
pub struct KeyStore {
    medium: Box<dyn StateMedium>,
    wrap: Box<dyn SecretWrap>,
    state: KeyStateFile,
    public: XmssPublicKey,
    outstanding: BTreeSet<u32>,
    audit: Option<Arc<dyn SignAudit>>,
}

impl std::fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyStore")
            .field("params", &self.state.params())
            .field("next_index", &self.state.next_index)
            .field("outstanding", &self.outstanding)
            .finish_non_exhaustive()
    }
}

impl KeyStore {
    /// Generates a key and writes the initial state. Refuses if the medium
    /// already holds a state.
    pub fn create(
        mut medium: Box<dyn StateMedium>,
        wrap: Box<dyn SecretWrap>,
        params: XmssParams,
        entropy: &[u8],
    ) -> Result<Self, KeyStoreError> {
        if medium.load()?.is_some() {
            return Err(KeyStoreError::NotFresh);
        }
        let (public, secret) = xmss::keygen(params, entropy)?;
        let state = KeyStateFile { next_index: 0, secret };
        medium.persist(&state.encode(wrap.as_ref()))?;
        Ok(Self { medium, wrap, state, public, outstanding: BTreeSet::new(), audit: None })
    }

    pub fn open(mut medium: Box<dyn StateMedium>, wrap: Box<dyn SecretWrap>) -> Result<Self, KeyStoreError> {
        let bytes = medium.load()?.ok_or(KeyStoreError::Missing)?;
        let state = KeyStateFile::decode(&bytes, wrap.as_ref())?;
        let public = state.secret.public_key();
        Ok(Self { medium, wrap, state, public, outstanding: BTreeSet::new(), audit: None })
    }

    pub fn create_file(path: impl AsRef<Path>, params: XmssParams, entropy: &[u8]) -> Result<Self, KeyStoreError> {
        Self::create(Box::new(FileMedium::open(path)?), Box::new(NoWrap), params, entropy)
    }

    pub fn open_file(path: impl AsRef<Path>) -> Result<Self, KeyStoreError> {
        Self::open(Box::new(FileMedium::open(path)?), Box::new(NoWrap))
    }

    pub fn set_audit(&mut self, audit: Arc<dyn SignAudit>) {
        self.audit = Some(audit);
    }

    pub fn params(&self) -> XmssParams {
        self.state.params()
    }

    pub fn public_key(&self) -> &XmssPublicKey {
        &self.public
    }

    pub fn next_index(&self) -> u32 {
        self.state.next_index
    }

    pub fn is_fresh(&self) -> bool {
        self.state.next_index == 0
    }

    pub fn is_exhausted(&self) -> bool {
        u64::from(self.state.next_index) >= self.params().leaf_count()
    }

    /// 2^h - next_index
    pub fn remaining_signatures(&self) -> u32 {
        (self.params().leaf_count() - u64::from(self.state.next_index)) as u32
    }

    /// Returns the current next index after durably advancing the counter.
    pub fn reserve_index(&mut self) -> Result<u32, KeyStoreError> {
        if self.is_exhausted() {
            return Err(KeyStoreError::Exhausted { leaves: self.params().leaf_count() });
        }
        let index = self.state.next_index;
        let mut next = self.state.clone();
        next.next_index = index + 1;
        self.medium.persist(&next.encode(self.wrap.as_ref()))?;
        self.state = next;
        self.outstanding.insert(index);
        Ok(index)
    }

    /// Signs with an index obtained from [`Self::reserve_index`] in this
    /// handle's lifetime. Each reservation signs at most once.
    pub fn sign_with_reserved(&mut self, index: u32, message: &[u8]) -> Result<XmssSignature, KeyStoreError> {
        if index >= self.state.next_index {
            return Err(KeyStoreError::NeverReserved { index, next: self.state.next_index });
        }
        if !self.outstanding.remove(&index) {
            return Err(KeyStoreError::AlreadyConsumed { index });
        }
        if let Some(audit) = &self.audit {
            audit.record(index);
        }
        Ok(xmss::sign(&self.state.secret, index, message)?)
    }

    /// Reservations not yet signed in this lifetime.
    pub fn outstanding(&self) -> impl Iterator<Item = u32> + '_ {
        self.outstanding.iter().copied()
    }
}
