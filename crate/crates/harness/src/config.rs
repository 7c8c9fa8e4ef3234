//! Operator configuration file (TOML).
//!
//! ```toml
//! params = "h16"
//! ntp_servers = ["ntp-a.example:123", "ntp-b.example:123", "ntp-c.example:123"]
//!
//! [engine]
//! validity_minutes = 240
//! overlap_minutes = 2
//!
//! [time]
//! agreement_window_ms = 1000
//! ```

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use schedca::engine::{EngineConfig, TimeAuthority};
use schedca::timeauth::{ClockSource, SystemClock, TimeConfig, TimeService, TimeVerdict, UdpTransport};
use schedca::xmss::XmssParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub params: String,
    pub ntp_servers: Vec<String>,
    pub engine: EngineConfig,
    pub time: TimeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            params: "h16".into(),
            ntp_servers: Vec::new(),
            engine: EngineConfig::default(),
            time: TimeConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        if cfg.time.expected_servers == TimeConfig::default().expected_servers && !cfg.ntp_servers.is_empty() {
            cfg.time.expected_servers = cfg.ntp_servers.len();
        }
        Ok(cfg)
    }

    pub fn xmss_params(&self) -> anyhow::Result<XmssParams> {
        parse_params(&self.params).with_context(|| format!("unknown params {:?}", self.params))
    }

    /// Time authority backed by the system clock and the configured servers.
    pub fn system_time(&self) -> SystemTime {
        let clock = SystemClock::default();
        let mut service = TimeService::new(Arc::new(clock.clone()), self.time.clone());
        for s in &self.ntp_servers {
            service.add_server(s, Box::new(UdpTransport::new(s)));
        }
        SystemTime { clock, service }
    }
}

pub fn parse_params(name: &str) -> Option<XmssParams> {
    match name {
        "toy4" => Some(XmssParams::TOY_4),
        "h10" => Some(XmssParams::SHA2_10_256),
        "h16" => Some(XmssParams::SHA2_16_256),
        "h20" => Some(XmssParams::SHA2_20_256),
        _ => None,
    }
}

/// The host clock checked against SNTP servers. The clock itself is not
/// stepped or slewed; that is left to the host's time daemon.
pub struct SystemTime {
    clock: SystemClock,
    service: TimeService,
}

impl TimeAuthority for SystemTime {
    fn wall_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn mono_ms(&self) -> u64 {
        self.clock.monotonic_ms()
    }

    fn verdict(&mut self) -> TimeVerdict {
        self.service.verdict()
    }
}
