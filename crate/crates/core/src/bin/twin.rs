use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use twin_core::bus::{Direction, measure_latency};
use twin_core::config::load_scenario;
use twin_core::emulator::{PerturbationProfile, run_emulated};
use twin_core::fidelity::{CalibrationRoutine, calibrate};
use twin_core::recorder::{self, LogHeader};
use twin_core::scenario::evaluate_session;
use twin_core::server::{self, LiveOptions, Server};
use twin_core::sim::{CommandScript, RunLog, Session, TimedCommand};
use twin_core::units::ns_to_secs;
use twin_core::{Error, TwinConfig, load_config};

const EXIT_CONFIG: u8 = 2;
const EXIT_CONNECTION: u8 = 3;
const EXIT_TOLERANCE: u8 = 4;
const EXIT_NONCONVERGENCE: u8 = 5;

#[derive(Parser)]
#[command(name = "twin", version, about = "Rover digital twin simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Twin configuration (TOML); the built-in default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario document replacing the config's [scenario] table.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Command script (TOML).
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    #[arg(long, global = true, env = "TWIN_PORT", default_value_t = server::DEFAULT_PORT)]
    port: u16,
    /// Defaults to the config's seed.
    #[arg(long, global = true, env = "TWIN_SEED")]
    seed: Option<u64>,
    /// Run as fast as possible without opening a port.
    #[arg(long, global = true)]
    headless: bool,
    /// Output file: a session log, or the calibration report for `calibrate`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the twin for the operator console (WebSocket and line protocol).
    Serve,
    /// Run the hardware emulator with a perturbation profile.
    Emulate {
        #[arg(long)]
        profile: PathBuf,
    },
    /// Run the calibration routine against an emulator and fit corrections.
    Calibrate {
        /// Perturbation profile for an in-process emulator.
        #[arg(long, conflicts_with = "emulator", required_unless_present = "emulator")]
        profile: Option<PathBuf>,
        /// Address of a running `twin emulate` (host:port).
        #[arg(long)]
        emulator: Option<String>,
        /// Calibration routine; the standard routine when omitted.
        #[arg(long)]
        routine: Option<PathBuf>,
    },
    /// Run a script headless against a scenario and check its expectations.
    RunScenario,
    /// Re-run a recorded log and compare telemetry hashes.
    Replay { log: PathBuf },
    /// Print scenario metrics and latency statistics of a recorded log.
    Report { log: PathBuf },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Connection(_) => EXIT_CONNECTION,
            Error::Parse(_)
            | Error::Invalid { .. }
            | Error::NonFinite(_)
            | Error::JointOutOfLimits { .. }
            | Error::UnknownTopic(_)
            | Error::DirectionViolation { .. }
            | Error::PayloadMismatch(_)
            | Error::MalformedLog(_)
            | Error::ConfigMismatch { .. } => EXIT_CONFIG,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

impl Common {
    fn config(&self) -> CliResult<TwinConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(&read(p)?)?,
            None => TwinConfig::builtin(),
        };
        if let Some(p) = &self.scenario {
            cfg.scenario = load_scenario(&read(p)?)?;
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &TwinConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    fn script(&self) -> CliResult<Option<CommandScript>> {
        self.script.as_deref().map(|p| Ok(CommandScript::from_document(&read(p)?)?)).transpose()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::Relaxed)) {
        log::warn!("no Ctrl-C handler: {e}");
    }
    stop
}

fn run(cli: Cli) -> CliResult {
    let c = &cli.common;
    match &cli.command {
        Command::Serve => serve(c, PerturbationProfile::identity()),
        Command::Emulate { profile } => {
            let profile = PerturbationProfile::from_document(&read(profile)?)?;
            if c.headless {
                return serve(c, profile);
            }
            let cfg = c.config()?;
            let server = Server::bind(c.port)?;
            log::info!("emulator listening on {}", server.local_addr()?);
            server.run_emulator(&cfg, &profile, c.seed(&cfg), stop_flag())?;
            Ok(())
        }
        Command::Calibrate {
            profile,
            emulator,
            routine,
        } => calibrate_cmd(c, profile.as_deref(), emulator.as_deref(), routine.as_deref()),
        Command::RunScenario => run_scenario(c),
        Command::Replay { log } => {
            let cfg = c.config()?;
            let rec = recorder::read_log_file(log)?;
            if rec.truncated {
                log::warn!("log ends in a partial record; comparing the recorded prefix");
            }
            let out = recorder::replay(&rec, &cfg)?;
            println!("recorded {}", out.recorded_hash);
            println!("replayed {}", out.replay_hash);
            if out.matches {
                println!("replay matches");
                Ok(())
            } else {
                Err(fail(EXIT_TOLERANCE, "replay telemetry differs from the recording"))
            }
        }
        Command::Report { log } => {
            let rec = recorder::read_log_file(log)?;
            report(&rec.header, &rec.log)
        }
    }
}

/// Live on a port, or headless as fast as possible when `--headless`.
fn serve(c: &Common, profile: PerturbationProfile) -> CliResult {
    let cfg = c.config()?;
    let seed = c.seed(&cfg);
    let script = c.script()?;
    let stop = stop_flag();
    if c.headless {
        let script = script.ok_or_else(|| fail(EXIT_CONFIG, "--headless needs --script"))?;
        let log = run_headless(&cfg, &profile, seed, &script, c.out.as_deref(), &stop)?;
        println!("telemetry hash {}", log.telemetry_hash());
        return Ok(());
    }
    let server = Server::bind(c.port)?;
    log::info!("twin listening on {} (seed {seed})", server.local_addr()?);
    let summary = server.run_live(
        &cfg,
        LiveOptions {
            seed,
            profile,
            record: c.out.clone(),
            script,
            duration_ns: None,
        },
        stop,
    )?;
    println!(
        "stopped at {:.2} s, telemetry hash {}",
        ns_to_secs(summary.end_ns),
        summary.telemetry_hash
    );
    Ok(())
}

fn run_headless(
    cfg: &TwinConfig,
    profile: &PerturbationProfile,
    seed: u64,
    script: &CommandScript,
    out: Option<&Path>,
    stop: &AtomicBool,
) -> CliResult<RunLog> {
    let mut session = Session::new(cfg, profile, seed)?;
    let mut rec = out.map(|p| recorder::create(p, &LogHeader::new(cfg, profile, seed))).transpose()?;
    let mut log = RunLog::default();
    let mut sink = |batch: Vec<twin_core::bus::Envelope>| -> CliResult {
        for e in batch {
            if let Some(r) = rec.as_mut() {
                r.record(&e)?;
            }
            log.envelopes.push(e);
        }
        Ok(())
    };
    let cmds: &[TimedCommand] = &script.commands;
    let mut next = 0;
    while session.now_ns() < script.duration_ns && !stop.load(Ordering::Relaxed) {
        let t = session.now_ns();
        let start = next;
        while next < cmds.len() && cmds[next].at_ns <= t {
            next += 1;
        }
        sink(session.tick_with(cmds[start..next].iter().map(|c| c.payload.clone()))?)?;
    }
    sink(session.finish())?;
    if let Some(r) = rec {
        r.finish()?;
    }
    Ok(log)
}

fn run_scenario(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let script = c.script()?.ok_or_else(|| fail(EXIT_CONFIG, "run-scenario needs --script"))?;
    let log = run_headless(&cfg, &PerturbationProfile::identity(), c.seed(&cfg), &script, c.out.as_deref(), &stop_flag())?;
    let m = evaluate_session(&log.events())?;
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
    let e = &script.expect;
    let mut problems = Vec::new();
    if let Some(want) = e.success_rate
        && (m.success_rate - want).abs() > 1e-12
    {
        problems.push(format!("success_rate {} != {want}", m.success_rate));
    }
    if let Some(want) = e.resets
        && m.reset_count != want
    {
        problems.push(format!("reset_count {} != {want}", m.reset_count));
    }
    if let Some(want) = e.completion_ns {
        let tick = twin_core::physics::DT;
        match m.time_to_completion {
            Some(got) if (got - ns_to_secs(want)).abs() <= tick + 1e-9 => {}
            got => problems.push(format!("time_to_completion {got:?} != {} s", ns_to_secs(want))),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(fail(EXIT_TOLERANCE, problems.join("; ")))
    }
}

fn calibrate_cmd(c: &Common, profile: Option<&Path>, emulator: Option<&str>, routine: Option<&Path>) -> CliResult {
    let cfg = c.config()?;
    let seed = c.seed(&cfg);
    let routine = match routine {
        Some(p) => CalibrationRoutine::from_document(&read(p)?)?,
        None => CalibrationRoutine::standard(),
    };
    let script = routine.expand(cfg.physics.joint_step);
    let physical = match (profile, emulator) {
        (Some(p), _) => {
            let profile = PerturbationProfile::from_document(&read(p)?)?;
            // the stand-in hardware gets its own noise stream
            run_emulated(&cfg, &script.commands, script.duration_ns, &profile, seed.wrapping_add(1))?
        }
        (None, Some(addr)) => server::request_emulation(addr, &script.commands, script.duration_ns, Duration::from_secs(600))?,
        (None, None) => return Err(fail(EXIT_CONFIG, "need --profile or --emulator")),
    };
    let result = calibrate(&physical, &cfg, seed)?;
    print!("{}", result.summary());
    if let Some(out) = &c.out {
        let doc = serde_json::json!({
            "result": result,
            "corrections": result.corrections(),
        });
        std::fs::write(out, serde_json::to_string_pretty(&doc).expect("report serializes") + "\n")
            .map_err(|e| fail(1, format!("{}: {e}", out.display())))?;
    }
    if !result.converged {
        return Err(fail(EXIT_NONCONVERGENCE, "parameter search did not converge"));
    }
    if !result.tolerances_met {
        return Err(fail(EXIT_TOLERANCE, "calibrated residuals exceed tolerance"));
    }
    Ok(())
}

fn report(header: &LogHeader, log: &RunLog) -> CliResult {
    println!("scenario   {}", header.scenario_id);
    println!("role       {:?}", header.role);
    println!("seed       {}", header.seed);
    println!("duration   {:.2} s", ns_to_secs(log.end_ns()));
    for dir in [Direction::Command, Direction::Telemetry] {
        if let Ok(s) = measure_latency(log.direction(dir)) {
            println!("{dir:?} latency: median {:.1} ms over {} messages", s.median_ms, s.count);
        }
    }
    match evaluate_session(&log.events()) {
        Ok(m) => println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize")),
        Err(e) => println!("no scenario metrics: {e}"),
    }
    println!("telemetry hash {}", log.telemetry_hash());
    Ok(())
}
