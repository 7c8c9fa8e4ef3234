use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::RngCore;
use schedca::certkit::{describe, render_table};
use schedca::engine::{
    describe_action, AdminDecision, AdminInbox, Engine, EngineError, TickOutcome, TimeAuthority, Wakeup,
};
use schedca::keystore::{KeyStore, KeyStoreError};
use schedca::schedule::{IssuancePolicy, Schedule};
use schedca::timeauth::{ClockSource, TimeConfig, TimeService, VirtualClock};
use schedca::xmss::ENTROPY_BYTES;
use schedca_harness::config::{parse_params, Config};
use schedca_harness::handshake::{run_loopback, run_loopback_dirs, run_withheld_update};
use schedca_harness::sim::builtin::{builtin, BUILTINS};
use schedca_harness::sim::script::parse_duration;
use schedca_harness::sim::{run_script, SimTime};

#[derive(Parser)]
#[command(
    name = "schedca",
    version,
    about = "Certificate authority that signs short-lived leaves on a fixed XMSS schedule"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CaArgs {
    /// CA state directory.
    #[arg(long)]
    dir: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl CaArgs {
    fn config(&self) -> anyhow::Result<Config> {
        self.config.as_deref().map_or_else(|| Ok(Config::default()), Config::load)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a standalone XMSS key state file.
    Keygen {
        #[arg(long, default_value = "h16")]
        params: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the key, self-signed CA certificate and initial schedule.
    Setup(CaArgs),
    /// Start the CA, run one tick and exit.
    Issue(CaArgs),
    /// Run the CA until interrupted, applying queued admin decisions.
    Run {
        #[command(flatten)]
        ca: CaArgs,
        /// Drive a virtual clock from this POSIX time instead of the system clock.
        #[arg(long)]
        virtual_start: Option<u64>,
        /// With a virtual clock: how long to run, e.g. 2d or 12slot.
        #[arg(long, default_value = "1d")]
        virtual_duration: String,
    },
    /// Show phase, key usage, schedule and outstanding alerts.
    Status(CaArgs),
    /// Operator interaction with a halted CA.
    Admin {
        #[command(subcommand)]
        command: AdminCommand,
    },
    /// Check a leaf certificate against a CA certificate and its schedules.
    Verify {
        #[arg(long)]
        ca: PathBuf,
        /// Schedule files, oldest first.
        #[arg(long = "schedule", required = true, num_args = 1..)]
        schedules: Vec<PathBuf>,
        #[arg(long)]
        leaf: PathBuf,
        /// POSIX seconds; defaults to now.
        #[arg(long)]
        at: Option<u64>,
        #[arg(long, default_value_t = 2)]
        overlap_minutes: u16,
    },
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
    /// Print the fields of a certificate.
    Cert { file: PathBuf },
    /// Scripted simulations.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Leaf-authenticated handshakes over TCP loopback.
    Handshake {
        #[arg(long, default_value_t = 100)]
        rounds: u32,
        /// Parameters of the throwaway CA used without directories.
        #[arg(long, default_value = "h16")]
        params: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory with the current leaf and its key.
        #[arg(long, requires = "trust_dir")]
        leaf_dir: Option<PathBuf>,
        /// Directory with the CA certificate and schedules.
        #[arg(long, requires = "leaf_dir")]
        trust_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        overlap_minutes: u16,
        /// Demonstrate a schedule update withheld from the peer.
        #[arg(long, conflicts_with = "leaf_dir")]
        withheld: bool,
    },
}

#[derive(Subcommand)]
enum AdminCommand {
    /// Alerts raised since the CA last resumed, and the pending plan.
    Alerts(CaArgs),
    /// Record a decision for a halted CA.
    Decide {
        #[command(flatten)]
        ca: CaArgs,
        /// Queue the decision for a running daemon instead of applying it.
        #[arg(long)]
        queue: bool,
        #[command(subcommand)]
        decision: Decision,
    },
}

#[derive(Subcommand)]
enum Decision {
    /// The operator supplies the correct time (POSIX seconds, or "now").
    CorrectTime { time: String },
    /// The operator confirms the current system time is right.
    AcceptTime { time: String },
    /// Carry out the pending recovery plan.
    ExecutePlan,
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Print a schedule file.
    Show { file: PathBuf },
    /// Re-anchor the schedule now; peers must receive the new file.
    Update {
        #[command(flatten)]
        ca: CaArgs,
        /// New certificate validity; defaults to the current one.
        #[arg(long)]
        validity_minutes: Option<u16>,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    List,
    /// Run a built-in scenario by name or a script file.
    Run {
        target: String,
        #[arg(long)]
        verbose: bool,
    },
    /// Run every built-in scenario.
    All,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Keygen { params, out } => keygen(&params, &out),
        Command::Setup(ca) => setup(&ca),
        Command::Issue(ca) => issue(&ca),
        Command::Run { ca, virtual_start: None, .. } => run(&ca),
        Command::Run { ca, virtual_start: Some(start), virtual_duration } => run_virtual(&ca, start, &virtual_duration),
        Command::Status(ca) => status(&ca),
        Command::Admin { command: AdminCommand::Alerts(ca) } => alerts(&ca),
        Command::Admin { command: AdminCommand::Decide { ca, queue, decision } } => decide(&ca, queue, decision),
        Command::Verify { ca, schedules, at, overlap_minutes, leaf } => {
            verify(&ca, &schedules, at, overlap_minutes, &leaf)
        }
        Command::Schedule { command: ScheduleCommand::Show { file } } => {
            let s = Schedule::decode(&std::fs::read(&file)?)?;
            println!("{s}");
            Ok(())
        }
        Command::Schedule { command: ScheduleCommand::Update { ca, validity_minutes } } => {
            schedule_update(&ca, validity_minutes)
        }
        Command::Cert { file } => {
            print!("{}", render_table(&describe(&std::fs::read(&file)?)?));
            Ok(())
        }
        Command::Scenario { command } => scenario(command),
        Command::Handshake {
            rounds,
            params,
            seed,
            leaf_dir: Some(leaf),
            trust_dir: Some(trust),
            overlap_minutes,
            ..
        } => {
            let _ = (params, seed);
            let r = run_loopback_dirs(&leaf, &trust, IssuancePolicy::new(overlap_minutes), rounds, now_secs())?;
            report_loopback(&r)
        }
        Command::Handshake { rounds, params, seed, withheld, .. } => handshake(rounds, &params, seed, withheld),
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn keygen(params: &str, out: &Path) -> anyhow::Result<()> {
    let params = parse_params(params).with_context(|| format!("unknown params {params:?}"))?;
    let mut entropy = [0u8; ENTROPY_BYTES];
    rand::rngs::OsRng.fill_bytes(&mut entropy);
    log::info!("generating {} key; this can take a while", params.name());
    let store = KeyStore::create_file(out, params, &entropy)?;
    let pk = store.public_key().to_bytes();
    println!(
        "{}: {} signatures, public key {} B, signature {} B",
        out.display(),
        params.leaf_count(),
        pk.len(),
        params.signature_bytes()
    );
    println!("public key {}", pk.iter().map(|b| format!("{b:02x}")).collect::<String>());
    Ok(())
}

fn setup(ca: &CaArgs) -> anyhow::Result<()> {
    let cfg = ca.config()?;
    let params = cfg.xmss_params()?;
    std::fs::create_dir_all(&ca.dir)?;
    let mut entropy = [0u8; ENTROPY_BYTES];
    rand::rngs::OsRng.fill_bytes(&mut entropy);
    let mut time = cfg.system_time();
    log::info!("generating {} key; this can take a while", params.name());
    let engine = Engine::setup(&ca.dir, cfg.engine, params, &entropy, &mut time, None)?;
    for e in engine.events() {
        println!("{}", serde_json::to_string(e)?);
    }
    Ok(())
}

fn open(ca: &CaArgs) -> anyhow::Result<(Engine, schedca_harness::config::SystemTime)> {
    let cfg = ca.config()?;
    let mut time = cfg.system_time();
    let engine = Engine::open(&ca.dir, cfg.engine, &mut time, None)?;
    Ok((engine, time))
}

fn print_outcome(o: &TickOutcome) {
    match o {
        TickOutcome::Idle => println!("idle"),
        TickOutcome::Issued(i) => println!("issued leaf {i}"),
        TickOutcome::Halted(reasons) => println!("halted: {}", reasons.join("; ")),
        TickOutcome::Exhausted => println!("key exhausted"),
        TickOutcome::NotRunning(p) => println!("not running ({p:?})"),
    }
}

fn issue(ca: &CaArgs) -> anyhow::Result<()> {
    let (mut engine, mut time) = open(ca)?;
    let outcome = engine.tick(&mut time)?;
    print_outcome(&outcome);
    Ok(())
}

fn run(ca: &CaArgs) -> anyhow::Result<()> {
    let (mut engine, mut time) = open(ca)?;
    loop {
        for decision in AdminInbox::drain(&ca.dir)? {
            for e in engine.apply_admin(decision, &mut time)? {
                println!("{}", serde_json::to_string(&e)?);
            }
        }
        let mono = time.mono_ms();
        let wait = match engine.next_wakeup(mono) {
            Some(Wakeup::Now) => 0,
            Some(Wakeup::AtMonotonic(m)) => m.saturating_sub(mono),
            Some(Wakeup::AtWall(w)) => w.saturating_sub(now_secs() * 1000),
            None => u64::MAX,
        };
        if wait > 0 {
            // poll the inbox at least once a second
            std::thread::sleep(Duration::from_millis(wait.min(1000)));
            continue;
        }
        match engine.tick(&mut time)? {
            TickOutcome::Idle => std::thread::sleep(Duration::from_millis(10)),
            outcome => print_outcome(&outcome),
        }
    }
}

/// Runs the CA against a virtual clock with no time servers, jumping from
/// wakeup to wakeup.
fn run_virtual(ca: &CaArgs, start: u64, duration: &str) -> anyhow::Result<()> {
    let cfg = ca.config()?;
    let clock = VirtualClock::new(start * 1000);
    let mut time = SimTime::new(clock.clone(), TimeService::new(Arc::new(clock.clone()), TimeConfig::default()));
    let mut engine = Engine::open(&ca.dir, cfg.engine, &mut time, None)?;
    let slot_ms = engine.schedule().interval_secs(&engine.config().policy()).unwrap_or(0) * 1000;
    let total = parse_duration(duration, slot_ms).map_err(anyhow::Error::msg)?;
    let end = clock.monotonic_ms() + u64::try_from(total).context("duration must be positive")?;
    let mut shown = engine.events().len();
    while clock.monotonic_ms() < end {
        let mono = clock.monotonic_ms();
        let wait = match engine.next_wakeup(mono) {
            Some(Wakeup::Now) => 0,
            Some(Wakeup::AtMonotonic(m)) => m.saturating_sub(mono),
            Some(Wakeup::AtWall(w)) => w.saturating_sub(clock.now_ms()),
            None => break,
        };
        clock.advance(wait.min(end - mono).max(1));
        if clock.monotonic_ms() <= end {
            engine.tick(&mut time)?;
        }
        for e in &engine.events()[shown..] {
            println!("{}", serde_json::to_string(e)?);
        }
        shown = engine.events().len();
    }
    println!("stopped at {} in phase {:?}", clock.now_ms() / 1000, engine.phase());
    Ok(())
}

fn alerts(ca: &CaArgs) -> anyhow::Result<()> {
    let (engine, _) = open(ca)?;
    for a in engine.alerts() {
        println!("{a}");
    }
    if let Some(plan) = &engine.state().pending_plan {
        println!("pending plan: {} ({})", describe_action(&plan.action), plan.rationale);
    }
    Ok(())
}

fn schedule_update(ca: &CaArgs, validity_minutes: Option<u16>) -> anyhow::Result<()> {
    let (mut engine, mut time) = open(ca)?;
    let validity = validity_minutes.unwrap_or_else(|| engine.schedule().validity_minutes());
    let event = engine.update_schedule(validity, &mut time)?;
    println!("{}", serde_json::to_string(&event)?);
    println!("{}", engine.schedule());
    Ok(())
}

fn status(ca: &CaArgs) -> anyhow::Result<()> {
    let (engine, _) = open(ca)?;
    println!("phase        {:?}", engine.phase());
    println!("next index   {} of {}", engine.store().next_index(), engine.store().params().leaf_count());
    if let Some((leaf, _)) = engine.current_leaf() {
        println!("current leaf {} valid {}..{}", leaf.xmss_index(), leaf.not_before, leaf.not_after);
    }
    if let Some(plan) = &engine.state().pending_plan {
        println!("pending plan {} ({})", describe_action(&plan.action), plan.rationale);
    }
    for a in engine.alerts() {
        println!("alert        {a}");
    }
    println!("{}", engine.schedule());
    Ok(())
}

fn parse_time(s: &str) -> anyhow::Result<u64> {
    if s == "now" {
        Ok(now_secs())
    } else {
        s.parse().with_context(|| format!("expected POSIX seconds or \"now\", got {s:?}"))
    }
}

fn decide(ca: &CaArgs, queue: bool, cmd: Decision) -> anyhow::Result<()> {
    let decision = match cmd {
        Decision::CorrectTime { time } => AdminDecision::CorrectTime { time: parse_time(&time)? },
        Decision::AcceptTime { time } => AdminDecision::AcceptTime { time: parse_time(&time)? },
        Decision::ExecutePlan => AdminDecision::ExecutePlan,
    };
    if queue {
        AdminInbox::submit(&ca.dir, &decision)?;
        println!("queued");
        return Ok(());
    }
    let (mut engine, mut time) = match open(ca) {
        Err(e) if matches!(e.downcast_ref(), Some(EngineError::KeyStore(KeyStoreError::Locked(_)))) => {
            bail!("the CA is running; pass --queue to hand the decision to it")
        }
        r => r?,
    };
    for e in engine.apply_admin(decision, &mut time)? {
        println!("{}", serde_json::to_string(&e)?);
    }
    Ok(())
}

fn verify(ca: &Path, schedules: &[PathBuf], at: Option<u64>, overlap_minutes: u16, leaf: &Path) -> anyhow::Result<()> {
    let ca_bytes = std::fs::read(ca).with_context(|| format!("reading {}", ca.display()))?;
    let mut store = schedca::verifier::TrustStore::from_der(&ca_bytes, IssuancePolicy::new(overlap_minutes))?;
    for s in schedules {
        store.ingest_schedule(&std::fs::read(s)?).with_context(|| format!("schedule {}", s.display()))?;
    }
    let now = at.unwrap_or_else(now_secs);
    match store.verify_leaf(&std::fs::read(leaf)?, now) {
        Ok(cert) => {
            println!("accept: leaf {} valid {}..{}", cert.xmss_index(), cert.not_before, cert.not_after);
            Ok(())
        }
        Err(r) => bail!("reject ({}): {r}", r.code()),
    }
}

fn scenario(cmd: ScenarioCommand) -> anyhow::Result<()> {
    match cmd {
        ScenarioCommand::List => {
            for (name, src) in BUILTINS {
                let about = src.lines().next().unwrap_or("").trim_start_matches('#').trim();
                println!("{name:22} {about}");
            }
            Ok(())
        }
        ScenarioCommand::Run { target, verbose } => {
            let src = match builtin(&target) {
                Some(s) => s.to_owned(),
                None => {
                    std::fs::read_to_string(&target).with_context(|| format!("no built-in or file named {target:?}"))?
                }
            };
            let report = run_script(&src)?;
            if verbose || !report.passed() {
                print!("{}", report.render());
            } else {
                println!("{}: PASS ({})", report.name, report.audit.summary());
            }
            if !report.passed() {
                bail!("scenario {} failed", report.name);
            }
            Ok(())
        }
        ScenarioCommand::All => {
            let mut failed = 0;
            for (name, src) in BUILTINS {
                let report = run_script(src)?;
                println!("{name:22} {}", if report.passed() { "PASS" } else { "FAIL" });
                if !report.passed() {
                    failed += 1;
                    print!("{}", report.render());
                }
            }
            if failed > 0 {
                bail!("{failed} scenario(s) failed");
            }
            Ok(())
        }
    }
}

fn report_loopback(r: &schedca_harness::handshake::LoopbackReport) -> anyhow::Result<()> {
    println!("{}", r.summary());
    for f in &r.failures {
        println!("  {f}");
    }
    if r.accepted != r.rounds {
        bail!("{} handshake(s) rejected", r.rounds - r.accepted);
    }
    Ok(())
}

fn handshake(rounds: u32, params: &str, seed: u64, withheld: bool) -> anyhow::Result<()> {
    let start = now_secs();
    if withheld {
        let r = run_withheld_update(seed, start, 4)?;
        println!("before update      {:?}", r.before_update);
        println!("update signed at   index {}", r.update_index);
        println!("schedule withheld  {:?}", r.while_withheld);
        println!("schedule delivered {:?}", r.after_delivery);
        if !r.passed() {
            bail!("unexpected handshake results");
        }
        return Ok(());
    }
    let params = parse_params(params).with_context(|| format!("unknown params {params:?}"))?;
    report_loopback(&run_loopback(params, rounds, seed, start)?)
}
