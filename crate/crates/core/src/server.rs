//! Network front end for a session.
//!
//! One TCP port carries two protocols, chosen by the first bytes a client
//! sends: `GET ` starts a WebSocket handshake, anything else is the raw line
//! protocol. Both move the same newline-free JSON wire records: clients send
//! command records (`topic` + `payload`; stamps are assigned by the server),
//! the server sends every delivered telemetry record.
//!
//! The emulator runs in batch mode instead: each connection sends timestamped
//! command records ending with an `_end` record and half-closes; the server
//! runs them through a perturbed session and answers with the full log.

use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bus::{Direction, Envelope, Payload, Topic, WireRecord};
use crate::config::TwinConfig;
use crate::emulator::{PerturbationProfile, run_emulated};
use crate::error::{Error, Result};
use crate::recorder::{self, LogHeader};
use crate::sim::{CommandScript, RunLog, Session, TimedCommand};

pub const DEFAULT_PORT: u16 = 8790;
/// Batch-mode terminator topic.
pub const END_TOPIC: &str = "_end";
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Serialize, Deserialize)]
struct ErrorReply<'a> {
    topic: &'a str,
    message: String,
}

fn error_line(message: impl ToString) -> String {
    serde_json::to_string(&ErrorReply {
        topic: "_error",
        message: message.to_string(),
    })
    .expect("error reply serializes")
}

/// Parses a console command record; stamps in the record are ignored.
pub fn parse_command(line: &str) -> Result<Payload> {
    let rec: WireRecord = serde_json::from_str(line)?;
    let topic: Topic = rec.topic.parse()?;
    if topic.direction() != Direction::Command {
        return Err(Error::DirectionViolation {
            topic: rec.topic,
            publisher: "console",
        });
    }
    let payload = if rec.payload.is_null() { serde_json::json!({}) } else { rec.payload };
    Payload::from_json(topic, payload)
}

pub struct Server {
    listener: TcpListener,
}

impl Server {
    /// Binds on localhost; port 0 picks a free port.
    pub fn bind(port: u16) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| Error::Connection(format!("bind port {port}: {e}")))?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    fn accept(&self, stop: &AtomicBool) -> Option<TcpStream> {
        while !stop.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((s, _)) => {
                    let _ = s.set_nonblocking(false);
                    return Some(s);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
        None
    }

    /// Runs an interactive session paced at real time until `stop` is set or
    /// the optional `duration_ns` elapses.
    pub fn run_live(self, config: &TwinConfig, opts: LiveOptions, stop: Arc<AtomicBool>) -> Result<LiveSummary> {
        let mut session = Session::new(config, &opts.profile, opts.seed)?;
        let mut rec = match &opts.record {
            Some(p) => Some(recorder::create(p, &LogHeader::new(config, &opts.profile, opts.seed))?),
            None => None,
        };
        let clients: Arc<Mutex<Vec<Sender<String>>>> = Arc::default();
        let (cmd_tx, cmd_rx) = mpsc::channel::<Payload>();

        let accept_stop = stop.clone();
        let accept_clients = clients.clone();
        let acceptor = thread::spawn(move || {
            while let Some(stream) = self.accept(&accept_stop) {
                let (out_tx, out_rx) = mpsc::channel();
                accept_clients.lock().expect("client list").push(out_tx.clone());
                let cmd_tx = cmd_tx.clone();
                let stop = accept_stop.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_client(stream, cmd_tx, out_tx, out_rx, &stop) {
                        log::info!("client closed: {e}");
                    }
                });
            }
        });

        let script = opts.script.map(|s| (s.commands, s.duration_ns));
        let (scripted, script_end) = script.unwrap_or_default();
        let duration = opts.duration_ns.or((script_end > 0).then_some(script_end));
        let mut next = 0;
        let start = Instant::now();
        let mut result = Ok(());
        while !stop.load(Ordering::Relaxed) && duration.is_none_or(|d| session.now_ns() < d) {
            let t = session.now_ns();
            let mut batch = Vec::new();
            while next < scripted.len() && scripted[next].at_ns <= t {
                batch.push(scripted[next].payload.clone());
                next += 1;
            }
            batch.extend(cmd_rx.try_iter());
            let delivered = match session.tick_with(batch) {
                Ok(d) => d,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            };
            if let Err(e) = emit(&delivered, rec.as_mut(), &clients) {
                result = Err(e);
                break;
            }
            let due = start + Duration::from_nanos(session.now_ns());
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
        let tail = session.finish();
        let flushed = emit(&tail, rec.as_mut(), &clients);
        stop.store(true, Ordering::Relaxed);
        let _ = acceptor.join();
        if let Some(r) = rec {
            r.finish()?;
        }
        result?;
        flushed?;
        Ok(LiveSummary {
            end_ns: session.now_ns(),
            telemetry_hash: session.telemetry_hash(),
        })
    }

    /// Serves batch emulation requests until `stop` is set.
    pub fn run_emulator(self, config: &TwinConfig, profile: &PerturbationProfile, seed: u64, stop: Arc<AtomicBool>) -> Result<()> {
        profile.validate()?;
        while let Some(stream) = self.accept(&stop) {
            if let Err(e) = serve_batch(stream, config, profile, seed) {
                log::warn!("emulation request failed: {e}");
            }
        }
        Ok(())
    }
}

fn emit(envelopes: &[Envelope], rec: Option<&mut recorder::Recorder<impl Write>>, clients: &Mutex<Vec<Sender<String>>>) -> Result<()> {
    if let Some(r) = rec {
        for e in envelopes {
            r.record(e)?;
        }
    }
    let mut list = clients.lock().expect("client list");
    for e in envelopes.iter().filter(|e| e.topic.direction() == Direction::Telemetry) {
        let line = e.to_line();
        list.retain(|c| c.send(line.clone()).is_ok());
    }
    Ok(())
}

pub struct LiveOptions {
    pub seed: u64,
    pub profile: PerturbationProfile,
    pub record: Option<PathBuf>,
    pub script: Option<CommandScript>,
    /// Stop after this much sim time; defaults to the script duration, or forever.
    pub duration_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSummary {
    pub end_ns: u64,
    pub telemetry_hash: String,
}

fn is_websocket(stream: &TcpStream) -> bool {
    let mut head = [0u8; 4];
    // a client that sends nothing yet is a line client that only listens
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let n = stream.peek(&mut head).unwrap_or(0);
    let _ = stream.set_read_timeout(None);
    n == 4 && &head == b"GET "
}

fn handle_inbound(line: &str, cmd_tx: &Sender<Payload>, out_tx: &Sender<String>) {
    let line = line.trim();
    if line.is_empty() {
        return;
    }
    match parse_command(line) {
        Ok(p) => {
            let _ = cmd_tx.send(p);
        }
        Err(e) => {
            let _ = out_tx.send(error_line(e));
        }
    }
}

fn serve_client(stream: TcpStream, cmd_tx: Sender<Payload>, out_tx: Sender<String>, out_rx: Receiver<String>, stop: &AtomicBool) -> Result<()> {
    if is_websocket(&stream) {
        return serve_websocket(stream, cmd_tx, out_tx, out_rx, stop);
    }
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream.try_clone()?);
    let inbound = thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            handle_inbound(&line, &cmd_tx, &out_tx);
        }
    });
    while !stop.load(Ordering::Relaxed) {
        match out_rx.recv_timeout(Duration::from_millis(50)) {
            Ok(line) => {
                writer.write_all(line.as_bytes())?;
                writer.write_all(b"\n")?;
            }
            Err(mpsc::RecvTimeoutError::Timeout) if inbound.is_finished() => break,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    let _ = inbound.join();
    Ok(())
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)
}

fn serve_websocket(stream: TcpStream, cmd_tx: Sender<Payload>, out_tx: Sender<String>, out_rx: Receiver<String>, stop: &AtomicBool) -> Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Connection(format!("websocket handshake: {e}")))?;
    ws.get_ref().set_nonblocking(true)?;
    let ws_err = |e: tungstenite::Error| Error::Connection(e.to_string());
    while !stop.load(Ordering::Relaxed) {
        let mut idle = true;
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                idle = false;
                for line in t.as_str().lines() {
                    handle_inbound(line, &cmd_tx, &out_tx);
                }
            }
            Ok(tungstenite::Message::Close(_)) => break,
            Ok(_) => idle = false,
            Err(e) if would_block(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(ws_err(e)),
        }
        for line in out_rx.try_iter() {
            idle = false;
            match ws.send(tungstenite::Message::text(line)) {
                Ok(()) => {}
                Err(e) if would_block(&e) => {}
                Err(e) => return Err(ws_err(e)),
            }
        }
        match ws.flush() {
            Ok(()) => {}
            Err(e) if would_block(&e) => {}
            Err(e) => return Err(ws_err(e)),
        }
        if idle {
            thread::sleep(POLL);
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EndRecord {
    topic: String,
    sent_at_ns: u64,
}

fn serve_batch(stream: TcpStream, config: &TwinConfig, profile: &PerturbationProfile, seed: u64) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut commands = Vec::new();
    let mut until = None;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: WireRecord = serde_json::from_str(line)?;
        if rec.topic == END_TOPIC {
            until = Some(rec.sent_at_ns);
            break;
        }
        let at_ns = rec.sent_at_ns;
        commands.push(TimedCommand {
            at_ns,
            payload: parse_command(line)?,
        });
    }
    let Some(until) = until else {
        writeln!(writer, "{}", error_line("request ended without an _end record"))?;
        return Ok(());
    };
    commands.sort_by_key(|c| c.at_ns);
    let reply = match run_emulated(config, &commands, until, profile, seed) {
        Ok(log) => log.envelopes.iter().map(|e| e.to_line() + "\n").collect::<String>(),
        Err(e) => error_line(e) + "\n",
    };
    writer.write_all(reply.as_bytes())?;
    writer.flush()?;
    writer.shutdown(Shutdown::Write)?;
    Ok(())
}

/// Client side of batch emulation: sends `commands`, waits for the log.
pub fn request_emulation(addr: &str, commands: &[TimedCommand], until_ns: u64, timeout: Duration) -> Result<RunLog> {
    let target = addr
        .to_socket_addrs()
        .map_err(|e| Error::Connection(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::Connection(format!("{addr}: no address")))?;
    let mut stream = TcpStream::connect_timeout(&target, timeout).map_err(|e| Error::Connection(format!("{addr}: {e}")))?;
    stream.set_read_timeout(Some(timeout))?;
    let mut req = String::new();
    for c in commands {
        let env = Envelope {
            topic: c.payload.topic(),
            seq: 0,
            sent_at_ns: c.at_ns,
            delivered_at_ns: None,
            payload: c.payload.clone(),
        };
        req += &env.to_line();
        req.push('\n');
    }
    req += &serde_json::to_string(&EndRecord {
        topic: END_TOPIC.into(),
        sent_at_ns: until_ns,
    })?;
    req.push('\n');
    stream.write_all(req.as_bytes()).map_err(|e| Error::Connection(e.to_string()))?;
    stream.shutdown(Shutdown::Write)?;
    let mut body = String::new();
    stream.read_to_string(&mut body).map_err(|e| Error::Connection(e.to_string()))?;
    let mut log = RunLog::default();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(err) = serde_json::from_str::<ErrorReply>(line)
            && err.topic == "_error"
        {
            return Err(Error::Connection(format!("emulator: {}", err.message)));
        }
        log.envelopes.push(Envelope::from_line(line)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DriveInput;
    use crate::physics::DT_NS;

    #[test]
    fn command_parsing() {
        let p = parse_command(r#"{"topic":"drive_cmd","payload":{"mode":"velocity","left":0.1,"right":0.2}}"#).unwrap();
        assert_eq!(p, Payload::Drive(DriveInput::Velocity { left: 0.1, right: 0.2 }));
        assert_eq!(parse_command(r#"{"topic":"reset_cmd"}"#).unwrap(), Payload::Reset);
        assert!(matches!(
            parse_command(r#"{"topic":"odometry","payload":{}}"#),
            Err(Error::DirectionViolation { .. })
        ));
        assert!(matches!(parse_command(r#"{"topic":"warp","payload":{}}"#), Err(Error::UnknownTopic(_))));
    }

    #[test]
    fn batch_emulation_matches_local_run() {
        let cfg = TwinConfig::builtin();
        let profile = PerturbationProfile {
            extra_latency: crate::bus::LatencyModel::fixed_ms(30),
            ..PerturbationProfile::identity()
        };
        let server = Server::bind(0).unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let (c, p, s) = (cfg.clone(), profile.clone(), stop.clone());
        let h = thread::spawn(move || server.run_emulator(&c, &p, 3, s));
        let cmds = vec![TimedCommand {
            at_ns: 100 * DT_NS,
            payload: Payload::Drive(DriveInput::Velocity { left: 0.3, right: 0.3 }),
        }];
        let remote = request_emulation(&addr, &cmds, 2_000_000_000, Duration::from_secs(10)).unwrap();
        let local = run_emulated(&cfg, &cmds, 2_000_000_000, &profile, 3).unwrap();
        assert_eq!(remote.telemetry_hash(), local.telemetry_hash());
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap().unwrap();
    }

    #[test]
    fn unreachable_emulator_is_a_connection_error() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let r = request_emulation(&format!("127.0.0.1:{port}"), &[], DT_NS, Duration::from_secs(1));
        assert!(matches!(r, Err(Error::Connection(_))));
    }
}
