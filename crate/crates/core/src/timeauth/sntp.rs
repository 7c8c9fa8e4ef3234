//! SNTPv4 client exchange over a pluggable transport.

use std::net::{ToSocketAddrs, UdpSocket};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clock::{ClockSource, VirtualClock};

pub const PACKET_BYTES: usize = 48;
pub const DEFAULT_TIMEOUT_MS: u64 = 2000;
/// Seconds from 1900-01-01 to 1970-01-01.
const NTP_UNIX_OFFSET: u64 = 2_208_988_800;

const MODE_CLIENT: u8 = 3;
const MODE_SERVER: u8 = 4;
const VERSION: u8 = 4;

pub fn ms_to_ntp(ms: u64) -> u64 {
    let secs = ms / 1000 + NTP_UNIX_OFFSET;
    let frac = ((ms % 1000) << 32) / 1000;
    (secs << 32) | frac
}

pub fn ntp_to_ms(ts: u64) -> Option<u64> {
    let secs = (ts >> 32).checked_sub(NTP_UNIX_OFFSET)?;
    let frac = ((ts & 0xffff_ffff) * 1000 + (1 << 31)) >> 32;
    Some(secs * 1000 + frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtpPacket {
    pub leap: u8,
    pub version: u8,
    pub mode: u8,
    pub stratum: u8,
    pub originate: u64,
    pub receive: u64,
    pub transmit: u64,
}

impl NtpPacket {
    pub fn request(transmit_ms: u64) -> Self {
        Self {
            leap: 0,
            version: VERSION,
            mode: MODE_CLIENT,
            stratum: 0,
            originate: 0,
            receive: 0,
            transmit: ms_to_ntp(transmit_ms),
        }
    }

    pub fn encode(&self) -> [u8; PACKET_BYTES] {
        let mut b = [0u8; PACKET_BYTES];
        b[0] = (self.leap << 6) | ((self.version & 7) << 3) | (self.mode & 7);
        b[1] = self.stratum;
        b[24..32].copy_from_slice(&self.originate.to_be_bytes());
        b[32..40].copy_from_slice(&self.receive.to_be_bytes());
        b[40..48].copy_from_slice(&self.transmit.to_be_bytes());
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SntpError> {
        if bytes.len() < PACKET_BYTES {
            return Err(SntpError::Malformed("short packet".into()));
        }
        let ts = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        Ok(Self {
            leap: bytes[0] >> 6,
            version: (bytes[0] >> 3) & 7,
            mode: bytes[0] & 7,
            stratum: bytes[1],
            originate: ts(24),
            receive: ts(32),
            transmit: ts(40),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum SntpError {
    #[error("no reply within {0} ms")]
    Timeout(u64),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
}

/// Carries one request/response exchange.
pub trait NtpTransport: Send {
    fn exchange(&mut self, request: &[u8; PACKET_BYTES], timeout_ms: u64) -> Result<Vec<u8>, SntpError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtpSample {
    pub server: String,
    /// Server time estimated at the moment the reply arrived.
    pub reported_time_ms: u64,
    /// Local wall clock when the reply arrived.
    pub received_at_ms: u64,
    pub round_trip_delay_ms: u64,
    pub error: Option<SntpError>,
}

impl NtpSample {
    pub fn failed(server: &str, received_at_ms: u64, error: SntpError) -> Self {
        Self {
            server: server.to_owned(),
            reported_time_ms: 0,
            received_at_ms,
            round_trip_delay_ms: 0,
            error: Some(error),
        }
    }

    /// Server minus local clock.
    pub fn offset_ms(&self) -> i64 {
        self.reported_time_ms as i64 - self.received_at_ms as i64
    }
}

/// One SNTP exchange; delay is measured on the monotonic clock.
pub fn query_sntp(
    server: &str,
    transport: &mut dyn NtpTransport,
    clock: &dyn ClockSource,
    timeout_ms: u64,
) -> NtpSample {
    let sent_wall = clock.now_ms();
    let sent_mono = clock.monotonic_ms();
    let request = NtpPacket::request(sent_wall);
    let result = transport.exchange(&request.encode(), timeout_ms);
    let elapsed = clock.monotonic_ms().saturating_sub(sent_mono);
    let received_at = clock.now_ms();
    let reply = match result {
        Ok(bytes) if elapsed <= timeout_ms => bytes,
        Ok(_) => return NtpSample::failed(server, received_at, SntpError::Timeout(timeout_ms)),
        Err(e) => return NtpSample::failed(server, received_at, e),
    };
    let packet = match NtpPacket::decode(&reply) {
        Ok(p) => p,
        Err(e) => return NtpSample::failed(server, received_at, e),
    };
    let check = if packet.mode != MODE_SERVER {
        Some("not a server reply")
    } else if !(1..=15).contains(&packet.stratum) {
        Some("unsynchronised stratum")
    } else if packet.leap == 3 {
        Some("alarm condition")
    } else if packet.originate != request.transmit {
        Some("originate timestamp mismatch")
    } else {
        None
    };
    if let Some(why) = check {
        return NtpSample::failed(server, received_at, SntpError::Malformed(why.into()));
    }
    let (Some(rx), Some(tx)) = (ntp_to_ms(packet.receive), ntp_to_ms(packet.transmit)) else {
        return NtpSample::failed(server, received_at, SntpError::Malformed("timestamp before 1970".into()));
    };
    let processing = tx.saturating_sub(rx);
    let delay = elapsed.saturating_sub(processing);
    NtpSample {
        server: server.to_owned(),
        reported_time_ms: tx + delay / 2,
        received_at_ms: received_at,
        round_trip_delay_ms: delay,
        error: None,
    }
}

/// Plain UDP, port 123 unless the endpoint says otherwise.
pub struct UdpTransport {
    endpoint: String,
}

impl UdpTransport {
    pub fn new(endpoint: &str) -> Self {
        let endpoint = if endpoint.contains(':') { endpoint.to_owned() } else { format!("{endpoint}:123") };
        Self { endpoint }
    }
}

impl NtpTransport for UdpTransport {
    fn exchange(&mut self, request: &[u8; PACKET_BYTES], timeout_ms: u64) -> Result<Vec<u8>, SntpError> {
        let io = |e: std::io::Error| SntpError::Transport(e.to_string());
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(io)?
            .next()
            .ok_or_else(|| SntpError::Transport(format!("cannot resolve {}", self.endpoint)))?;
        let bind = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
        let socket = UdpSocket::bind(bind).map_err(io)?;
        socket.set_read_timeout(Some(Duration::from_millis(timeout_ms.max(1)))).map_err(io)?;
        socket.send_to(request, addr).map_err(io)?;
        let mut buf = [0u8; 512];
        match socket.recv_from(&mut buf) {
            Ok((n, from)) if from == addr => Ok(buf[..n].to_vec()),
            Ok(_) => Err(SntpError::Transport("reply from unexpected address".into())),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Err(SntpError::Timeout(timeout_ms))
            }
            Err(e) => Err(io(e)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServerBehavior {
    Honest,
    /// Adds a fixed offset to every timestamp.
    Offset(i64),
    /// Never answers.
    Silent,
    /// Answers with bytes that are not a valid reply.
    Garbage,
}

/// In-process time server answering from the clock's reference time.
/// Consumes virtual time for the network delay.
pub struct SimulatedServer {
    clock: VirtualClock,
    pub behavior: ServerBehavior,
    /// One-way network delay.
    pub one_way_ms: u64,
    garbage: rand_chacha::ChaCha8Rng,
}

impl SimulatedServer {
    pub fn new(clock: VirtualClock, one_way_ms: u64) -> Self {
        Self {
            clock,
            behavior: ServerBehavior::Honest,
            one_way_ms,
            garbage: rand_chacha::ChaCha8Rng::seed_from_u64(one_way_ms),
        }
    }
}

impl NtpTransport for SimulatedServer {
    fn exchange(&mut self, request: &[u8; PACKET_BYTES], timeout_ms: u64) -> Result<Vec<u8>, SntpError> {
        let offset = match self.behavior {
            ServerBehavior::Silent => {
                self.clock.advance(timeout_ms);
                return Err(SntpError::Timeout(timeout_ms));
            }
            ServerBehavior::Garbage => {
                self.clock.advance(2 * self.one_way_ms);
                let mut junk = vec![0u8; 1 + (self.garbage.next_u32() % 60) as usize];
                self.garbage.fill_bytes(&mut junk);
                return Ok(junk);
            }
            ServerBehavior::Honest => 0,
            ServerBehavior::Offset(o) => o,
        };
        let req = NtpPacket::decode(request)?;
        self.clock.advance(self.one_way_ms);
        let server_now = (self.clock.reference_ms() as i64 + offset).max(0) as u64;
        let reply = NtpPacket {
            leap: 0,
            version: VERSION,
            mode: MODE_SERVER,
            stratum: 2,
            originate: req.transmit,
            receive: ms_to_ntp(server_now),
            transmit: ms_to_ntp(server_now),
        };
        self.clock.advance(self.one_way_ms);
        Ok(reply.encode().to_vec())
    }
}
