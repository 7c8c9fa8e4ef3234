use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Wall-clock and monotonic time in milliseconds.
pub trait ClockSource: Send + Sync {
    /// POSIX milliseconds as the system believes them.
    fn now_ms(&self) -> u64;
    /// Milliseconds since process start; never decreases.
    fn monotonic_ms(&self) -> u64;

    fn now_secs(&self) -> u64 {
        self.now_ms() / 1000
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    started: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { started: Instant::now() }
    }
}

impl ClockSource for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }

    fn monotonic_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct VirtualState {
    wall_ms: u64,
    mono_ms: u64,
    reference_ms: u64,
    /// Extra wall microseconds gained per second of elapsed time.
    drift_us_per_s: i64,
    /// Outstanding gradual correction, applied at `slew_us_per_s`.
    pending_slew_ms: i64,
    slew_us_per_s: u64,
    /// Sub-millisecond remainders carried between advances, in ns.
    drift_residue: i64,
    slew_residue: u64,
}

/// Deterministic clock shared by clones. Besides the local wall clock it
/// tracks the true reference time that simulated time servers report.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    inner: Arc<Mutex<VirtualState>>,
}

/// 0.5 ms per second.
pub const DEFAULT_SLEW_US_PER_S: u64 = 500;

impl VirtualClock {
    /// Local clock and reference both start at `wall_ms`.
    pub fn new(wall_ms: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(VirtualState {
                wall_ms,
                mono_ms: 0,
                reference_ms: wall_ms,
                drift_us_per_s: 0,
                pending_slew_ms: 0,
                slew_us_per_s: DEFAULT_SLEW_US_PER_S,
                drift_residue: 0,
                slew_residue: 0,
            })),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut VirtualState) -> R) -> R {
        f(&mut self.inner.lock().expect("clock lock"))
    }

    /// Lets `ms` of real time pass.
    pub fn advance(&self, ms: u64) {
        self.with(|s| {
            s.mono_ms += ms;
            s.reference_ms += ms;
            let drift_total = s.drift_us_per_s * ms as i64 + s.drift_residue;
            let drift = drift_total.div_euclid(1_000_000);
            s.drift_residue = drift_total.rem_euclid(1_000_000);
            let mut wall = s.wall_ms as i64 + ms as i64 + drift;
            if s.pending_slew_ms != 0 {
                let budget_total = s.slew_us_per_s * ms + s.slew_residue;
                let budget = (budget_total / 1_000_000) as i64;
                s.slew_residue = budget_total % 1_000_000;
                let step = s.pending_slew_ms.clamp(-budget, budget);
                wall += step;
                s.pending_slew_ms -= step;
            }
            s.wall_ms = wall.max(0) as u64;
        })
    }

    /// Sets the local wall clock; reference and monotonic time are untouched.
    pub fn set_wall(&self, wall_ms: u64) {
        self.with(|s| s.wall_ms = wall_ms)
    }

    pub fn jump(&self, delta_ms: i64) {
        self.with(|s| s.wall_ms = (s.wall_ms as i64 + delta_ms).max(0) as u64)
    }

    /// Constant drift of the local clock against the reference.
    pub fn set_drift(&self, us_per_s: i64) {
        self.with(|s| {
            s.drift_us_per_s = us_per_s;
            s.drift_residue = 0;
        })
    }

    /// Schedules a gradual correction of `offset_ms` applied at `us_per_s`.
    pub fn slew(&self, offset_ms: i64, us_per_s: u64) {
        self.with(|s| {
            s.pending_slew_ms = offset_ms;
            s.slew_us_per_s = us_per_s.max(1);
            s.slew_residue = 0;
        })
    }

    pub fn pending_slew_ms(&self) -> i64 {
        self.with(|s| s.pending_slew_ms)
    }

    /// True time, as an honest time server would report it.
    pub fn reference_ms(&self) -> u64 {
        self.with(|s| s.reference_ms)
    }

    /// Local clock minus reference.
    pub fn error_ms(&self) -> i64 {
        self.with(|s| s.wall_ms as i64 - s.reference_ms as i64)
    }

    /// Fresh process on the same machine: monotonic restarts at zero.
    pub fn restart_monotonic(&self) {
        self.with(|s| s.mono_ms = 0)
    }
}

impl ClockSource for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.with(|s| s.wall_ms)
    }

    fn monotonic_ms(&self) -> u64 {
        self.with(|s| s.mono_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_jump_and_share() {
        let c = VirtualClock::new(1_000_000);
        let c2 = c.clone();
        c.advance(1500);
        assert_eq!((c2.now_ms(), c2.monotonic_ms(), c2.reference_ms()), (1_001_500, 1500, 1_001_500));
        c.jump(-500_000);
        assert_eq!(c.now_ms(), 501_500);
        assert_eq!(c.reference_ms(), 1_001_500);
        assert_eq!(c.error_ms(), -500_000);
        c.advance(10);
        assert_eq!(c.monotonic_ms(), 1510);
    }

    #[test]
    fn slew_converges_at_rate() {
        let c = VirtualClock::new(1_000_000);
        c.jump(-10_000);
        c.slew(10_000, DEFAULT_SLEW_US_PER_S);
        c.advance(10_000_000);
        assert_eq!(c.pending_slew_ms(), 5_000);
        c.advance(10_000_000);
        assert_eq!(c.error_ms(), 0);
        c.advance(10_000_000);
        assert_eq!(c.error_ms(), 0);
    }

    #[test]
    fn drift_accumulates_fractionally() {
        let c = VirtualClock::new(0);
        c.set_drift(1000);
        for _ in 0..1000 {
            c.advance(1);
        }
        assert_eq!(c.error_ms(), 1);
    }

    #[test]
    fn system_clock_is_monotone() {
        let c = SystemClock::default();
        let a = c.monotonic_ms();
        assert!(c.monotonic_ms() >= a);
        assert!(c.now_ms() > 1_600_000_000_000);
    }
}
