//! Leaf-authenticated handshake over TCP loopback.
//!
//! The initiator sends a nonce; the responder answers with its current leaf
//! certificate and a classical signature over the transcript. The initiator
//! checks the leaf against its trust store and then the signature.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use anyhow::{anyhow, bail, Context};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use schedca::certkit::suite::{ClassicalSecret, ClassicalSuite, EcdsaP256};
use schedca::engine::{
    schedule_history, AdminDecision, Engine, EngineConfig, ManualTime, Phase, TickOutcome, TimeAuthority, CA_CERT_FILE,
    LEAF_CERT_FILE, LEAF_KEY_FILE, SCHEDULE_FILE,
};
use schedca::schedule::IssuancePolicy;
use schedca::verifier::{IngestError, Reject, TrustStore};
use schedca::xmss::{XmssParams, ENTROPY_BYTES};

pub const TRANSCRIPT_LABEL: &[u8] = b"schedca-handshake-v1";
pub const NONCE_BYTES: usize = 32;
/// Upper bound on one frame; a leaf certificate is well under this.
const MAX_FRAME: usize = 64 * 1024;

pub fn transcript(nonce: &[u8], leaf_der: &[u8]) -> Vec<u8> {
    [TRANSCRIPT_LABEL, nonce, leaf_der].concat()
}

fn write_frame(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::other("frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)
}

fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[derive(Clone)]
pub struct Credentials {
    pub leaf_der: Vec<u8>,
    pub secret: ClassicalSecret,
}

impl Credentials {
    pub fn from_engine(engine: &Engine) -> Option<Self> {
        engine.current_leaf().map(|(cert, secret)| Self { leaf_der: cert.to_der(), secret })
    }
}

/// Serves one handshake per connection with whatever credentials are
/// current at the time.
pub struct Responder {
    addr: SocketAddr,
    creds: Arc<Mutex<Option<Credentials>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Responder {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let creds: Arc<Mutex<Option<Credentials>>> = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let creds = creds.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(mut conn) = conn else { continue };
                    let current = creds.lock().expect("credentials lock").clone();
                    if let Err(e) = serve(&mut conn, current) {
                        log::debug!("handshake connection failed: {e}");
                    }
                }
            })
        };
        Ok(Self { addr, creds, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_credentials(&self, creds: Credentials) {
        *self.creds.lock().expect("credentials lock") = Some(creds);
    }
}

impl Drop for Responder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(conn: &mut TcpStream, creds: Option<Credentials>) -> io::Result<()> {
    let nonce = read_frame(conn)?;
    let creds = creds.ok_or_else(|| io::Error::other("no credentials loaded"))?;
    let sig = EcdsaP256
        .sign(&creds.secret, &transcript(&nonce, &creds.leaf_der))
        .ok_or_else(|| io::Error::other("leaf secret rejected"))?;
    write_frame(conn, &creds.leaf_der)?;
    write_frame(conn, &sig)?;
    conn.shutdown(Shutdown::Write)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accepted {
    pub index: u32,
    pub leaf_bytes: usize,
    pub signature_bytes: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum HandshakeFailure {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("rejected: {0}")]
    Rejected(Reject),
}

impl HandshakeFailure {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io(_) => "io",
            Self::Rejected(r) => r.code(),
        }
    }
}

/// One handshake as the initiator, checked at `now` (POSIX seconds).
pub fn initiate(
    addr: SocketAddr,
    peer: &TrustStore,
    now: u64,
    rng: &mut dyn RngCore,
) -> Result<Accepted, HandshakeFailure> {
    let mut nonce = [0u8; NONCE_BYTES];
    rng.fill_bytes(&mut nonce);
    let mut conn = TcpStream::connect(addr)?;
    write_frame(&mut conn, &nonce)?;
    let leaf = read_frame(&mut conn)?;
    let sig = read_frame(&mut conn)?;
    let cert = peer
        .verify_peer_auth(&EcdsaP256, &leaf, &transcript(&nonce, &leaf), &sig, now)
        .map_err(HandshakeFailure::Rejected)?;
    Ok(Accepted { index: cert.xmss_index(), leaf_bytes: leaf.len(), signature_bytes: sig.len() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopbackReport {
    pub rounds: u32,
    pub accepted: u32,
    pub failures: Vec<String>,
    /// Distinct leaf indices seen by the initiator.
    pub leaves: BTreeSet<u32>,
    /// Mean bytes per accepted authentication.
    pub leaf_bytes: usize,
    pub classical_signature_bytes: usize,
    /// XMSS signature carried inside each leaf.
    pub xmss_signature_bytes: usize,
}

impl LoopbackReport {
    fn new(rounds: u32, xmss_signature_bytes: usize) -> Self {
        Self {
            rounds,
            accepted: 0,
            failures: Vec::new(),
            leaves: BTreeSet::new(),
            leaf_bytes: 0,
            classical_signature_bytes: 0,
            xmss_signature_bytes,
        }
    }

    fn record(&mut self, round: u32, r: Result<Accepted, HandshakeFailure>) {
        match r {
            Ok(a) => {
                self.accepted += 1;
                self.leaves.insert(a.index);
                self.leaf_bytes += a.leaf_bytes;
                self.classical_signature_bytes += a.signature_bytes;
            }
            Err(e) => self.failures.push(format!("round {round}: {e}")),
        }
    }

    fn finish(mut self) -> Self {
        if self.accepted > 0 {
            self.leaf_bytes /= self.accepted as usize;
            self.classical_signature_bytes /= self.accepted as usize;
        }
        self
    }

    pub fn auth_bytes(&self) -> usize {
        self.leaf_bytes + self.classical_signature_bytes
    }

    pub fn summary(&self) -> String {
        format!(
            "{}/{} accepted over {} leaves\n\
             per authentication: {} B = leaf {} B (carrying one {} B XMSS signature) + classical signature {} B\n\
             the leaf is signed once per validity period; signing each handshake with XMSS would spend one index and {} B per handshake",
            self.accepted,
            self.rounds,
            self.leaves.len(),
            self.auth_bytes(),
            self.leaf_bytes,
            self.xmss_signature_bytes,
            self.classical_signature_bytes,
            self.xmss_signature_bytes
        )
    }
}

/// A CA in a directory driven by manual time, plus the peer's trust store.
pub struct LoopbackCa {
    pub engine: Engine,
    pub time: ManualTime,
    pub peer: TrustStore,
}

impl LoopbackCa {
    pub fn setup(dir: &Path, params: XmssParams, seed: u64, start: u64) -> anyhow::Result<Self> {
        let config = EngineConfig { allow_toy_params: true, leaf_key_seed: Some(seed), ..EngineConfig::default() };
        let mut entropy = [0u8; ENTROPY_BYTES];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut entropy);
        let mut time = ManualTime::at_secs(start);
        let engine = Engine::setup(dir, config.clone(), params, &entropy, &mut time, None)?;
        let mut peer = TrustStore::new(engine.ca().clone(), config.policy())?;
        peer.ingest_schedule(&engine.schedule().encode())?;
        Ok(Self { engine, time, peer })
    }

    pub fn slot_ms(&self) -> u64 {
        let policy = self.engine.config().policy();
        self.engine.schedule().interval_secs(&policy).expect("valid schedule") * 1000
    }

    /// Lets `ms` pass, waking the engine at every point it asks for.
    pub fn advance(&mut self, ms: u64) -> anyhow::Result<()> {
        let end = self.time.mono_ms() + ms;
        loop {
            let mono = self.time.mono_ms();
            let wait = match self.engine.next_wakeup(mono) {
                None => u64::MAX,
                Some(schedca::engine::Wakeup::Now) => 0,
                Some(schedca::engine::Wakeup::AtMonotonic(m)) => m.saturating_sub(mono),
                Some(schedca::engine::Wakeup::AtWall(w)) => w.saturating_sub(self.time.wall_ms()),
            };
            if wait > end - mono {
                self.time.advance(end - mono);
                return Ok(());
            }
            self.time.advance(wait);
            match self.engine.tick(&mut self.time)? {
                TickOutcome::Idle if wait == 0 => self.time.advance(1.min(end - self.time.mono_ms())),
                TickOutcome::Halted(reasons) => bail!("CA halted: {}", reasons.join("; ")),
                _ => {}
            }
            if self.time.mono_ms() >= end {
                return Ok(());
            }
        }
    }

    pub fn now_secs(&self) -> u64 {
        self.time.wall_ms() / 1000
    }

    /// Hands every schedule the CA has signed to the peer.
    pub fn deliver_schedules(&mut self) -> anyhow::Result<()> {
        for bytes in schedule_history(self.engine.dir())? {
            match self.peer.ingest_schedule(&bytes) {
                Ok(_) | Err(IngestError::Replay { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// `rounds` handshakes spread over `rounds / 4` issuance slots, so the
/// responder rotates through several leaves.
pub fn run_loopback(params: XmssParams, rounds: u32, seed: u64, start: u64) -> anyhow::Result<LoopbackReport> {
    let dir = tempfile::tempdir()?;
    let mut ca = LoopbackCa::setup(dir.path(), params, seed, start)?;
    let responder = Responder::bind("127.0.0.1:0")?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6873);
    let step = ca.slot_ms() / 4;
    let mut report = LoopbackReport::new(rounds, params.signature_bytes());
    for round in 0..rounds {
        if round > 0 {
            ca.advance(step)?;
        }
        responder.set_credentials(Credentials::from_engine(&ca.engine).context("CA has no leaf")?);
        report.record(round, initiate(responder.addr(), &ca.peer, ca.now_secs(), &mut rng));
    }
    Ok(report.finish())
}

/// Trust store from a directory holding `ca.der` and schedule files, either
/// a `schedules/` history or a single `schedule.sched`.
pub fn load_trust(dir: &Path, policy: IssuancePolicy) -> anyhow::Result<TrustStore> {
    let ca = std::fs::read(dir.join(CA_CERT_FILE))
        .with_context(|| format!("reading {}", dir.join(CA_CERT_FILE).display()))?;
    let mut store = TrustStore::from_der(&ca, policy)?;
    let history = schedule_history(dir).unwrap_or_default();
    let schedules = if history.is_empty() { vec![std::fs::read(dir.join(SCHEDULE_FILE))?] } else { history };
    for bytes in schedules {
        match store.ingest_schedule(&bytes) {
            Ok(_) | Err(IngestError::Replay { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(store)
}

/// Handshakes between a party holding the current leaf and key (`leaf_dir`)
/// and one holding the CA certificate and schedules (`trust_dir`), at `now`.
pub fn run_loopback_dirs(
    leaf_dir: &Path,
    trust_dir: &Path,
    policy: IssuancePolicy,
    rounds: u32,
    now: u64,
) -> anyhow::Result<LoopbackReport> {
    let leaf_der = std::fs::read(leaf_dir.join(LEAF_CERT_FILE))?;
    let secret = ClassicalSecret::from_bytes(&std::fs::read(leaf_dir.join(LEAF_KEY_FILE))?);
    let peer = load_trust(trust_dir, policy)?;
    let sig_len = peer.ca().xmss_public_key().map_or(0, |pk| pk.params().signature_bytes());
    let responder = Responder::bind("127.0.0.1:0")?;
    responder.set_credentials(Credentials { leaf_der, secret });
    let mut rng = ChaCha20Rng::from_entropy();
    let mut report = LoopbackReport::new(rounds, sig_len);
    for round in 0..rounds {
        report.record(round, initiate(responder.addr(), &peer, now, &mut rng));
    }
    Ok(report.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WithheldReport {
    pub before_update: Result<u32, String>,
    /// Reject codes while the peer still lacks the updated schedule.
    pub while_withheld: Vec<Result<u32, String>>,
    pub after_delivery: Vec<Result<u32, String>>,
    pub update_index: u32,
}

impl WithheldReport {
    pub fn passed(&self) -> bool {
        self.before_update.is_ok()
            && !self.while_withheld.is_empty()
            && self.while_withheld.iter().all(|r| r.is_err())
            && !self.after_delivery.is_empty()
            && self.after_delivery.iter().all(|r| r.is_ok())
    }
}

/// The CA is down long enough that it must re-anchor its schedule. Peers
/// that have not received the new schedule reject the new leaves until it is
/// delivered.
pub fn run_withheld_update(seed: u64, start: u64, rounds: u32) -> anyhow::Result<WithheldReport> {
    let dir = tempfile::tempdir()?;
    let mut ca = LoopbackCa::setup(dir.path(), XmssParams::SHA2_10_256, seed, start)?;
    let responder = Responder::bind("127.0.0.1:0")?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7768);
    let slot = ca.slot_ms();
    let shake = |ca: &LoopbackCa, rng: &mut ChaCha20Rng| -> anyhow::Result<Result<u32, String>> {
        responder.set_credentials(Credentials::from_engine(&ca.engine).context("CA has no leaf")?);
        Ok(initiate(responder.addr(), &ca.peer, ca.now_secs(), rng).map(|a| a.index).map_err(|e| e.code().to_owned()))
    };

    ca.advance(slot)?;
    let before_update = shake(&ca, &mut rng)?;

    // down for twelve slots: too far behind for dummy signatures
    let config = ca.engine.config().clone();
    let dir_path = ca.engine.dir().to_path_buf();
    let LoopbackCa { engine, mut time, peer } = ca;
    drop(engine);
    time.advance(12 * slot);
    time.mono_ms = 0;
    let engine = Engine::open(&dir_path, config, &mut time, None)?;
    let mut ca = LoopbackCa { engine, time, peer };
    if ca.engine.phase() != Phase::HaltedAwaitingAdmin {
        bail!("expected the CA to wait for an operator after the outage");
    }
    ca.engine.apply_admin(AdminDecision::ExecutePlan, &mut ca.time)?;
    let update_index = ca
        .engine
        .events()
        .iter()
        .rev()
        .find_map(|e| match e.kind {
            schedca::engine::EventKind::ScheduleUpdated { index, .. } => Some(index),
            _ => None,
        })
        .ok_or_else(|| anyhow!("no schedule update was signed"))?;
    ca.advance(60_000)?;

    let mut while_withheld = Vec::new();
    for _ in 0..rounds {
        while_withheld.push(shake(&ca, &mut rng)?);
        ca.advance(slot / 4)?;
    }
    ca.deliver_schedules()?;
    let mut after_delivery = Vec::new();
    for _ in 0..rounds {
        after_delivery.push(shake(&ca, &mut rng)?);
        ca.advance(slot / 4)?;
    }
    Ok(WithheldReport { before_update, while_withheld, after_delivery, update_index })
}
