//! Front-panel service.
//!
//! One executor thread owns the [`Machine`]. Client connections validate
//! commands and queue them to the executor; the executor applies them in
//! arrival order, runs the machine in short slices while it is running, and
//! fans immutable snapshots out to every client's [`Outbox`].
//!
//! The first client to connect while no controller is attached becomes the
//! controller; everyone else observes. Observers may only `examine`. When the
//! controller disconnects a running machine is paused.
//!
//! Transports share one listening port: an HTTP `GET` carrying a WebSocket
//! upgrade becomes a WebSocket session, any other `GET` is answered from the
//! static asset directory, and a connection that does not start with `GET`
//! speaks newline-delimited JSON directly.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use mr_core::isa::format_address;
use mr_core::machine::{Machine, RunLimits, Status, PLANE_COUNT};
use tungstenite::Message;

use crate::protocol::{parse_command, Command, Event, LastStep, Snapshot};

/// Instructions per run slice between command checks.
const SLICE: u64 = 2_000;
/// Frames a client may have queued before its snapshots are coalesced.
const OUTBOX_CAPACITY: usize = 64;
const SNIFF_TIMEOUT: Duration = Duration::from_millis(150);
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct PanelConfig {
    pub listen: String,
    pub refresh_hz: u32,
    pub assets: Option<PathBuf>,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig {
            listen: "127.0.0.1:7957".into(),
            refresh_hz: 30,
            assets: None,
        }
    }
}

enum Frame {
    Snapshot(String),
    Other(String),
}

/// Per-client send queue. Pushing never blocks; when full, queued snapshots
/// are dropped in favour of the newest, so a slow reader sees fewer states
/// but always in order.
pub struct Outbox {
    state: Mutex<(VecDeque<Frame>, bool)>,
    ready: Condvar,
}

impl Outbox {
    fn new() -> Arc<Outbox> {
        Arc::new(Outbox {
            state: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        })
    }

    fn push(&self, frame: Frame) {
        let mut s = self.state.lock().expect("outbox lock");
        if s.1 {
            return;
        }
        if s.0.len() >= OUTBOX_CAPACITY && matches!(frame, Frame::Snapshot(_)) {
            s.0.retain(|f| !matches!(f, Frame::Snapshot(_)));
        }
        s.0.push_back(frame);
        self.ready.notify_one();
    }

    fn send(&self, event: &Event) {
        let line = event.to_line();
        self.push(match event {
            Event::State(_) => Frame::Snapshot(line),
            _ => Frame::Other(line),
        });
    }

    /// Next line, waiting up to `wait`. `Err` once closed and drained.
    fn pop(&self, wait: Duration) -> Result<Option<String>, ()> {
        let mut s = self.state.lock().expect("outbox lock");
        if s.0.is_empty() && !s.1 && !wait.is_zero() {
            s = self.ready.wait_timeout(s, wait).expect("outbox lock").0;
        }
        match s.0.pop_front() {
            Some(Frame::Snapshot(l)) | Some(Frame::Other(l)) => Ok(Some(l)),
            None if s.1 => Err(()),
            None => Ok(None),
        }
    }

    fn close(&self) {
        self.state.lock().expect("outbox lock").1 = true;
        self.ready.notify_all();
    }
}

enum ExecMsg {
    Connect(u64, Arc<Outbox>),
    Disconnect(u64),
    Command(u64, Command),
    /// A line that failed validation; answered in queue order.
    Reject(u64, Event),
}

struct Client {
    outbox: Arc<Outbox>,
}

struct Executor {
    machine: Machine,
    clients: BTreeMap<u64, Client>,
    controller: Option<u64>,
    plane: usize,
    seq: u64,
    last_step: Option<LastStep>,
    refresh: Duration,
    last_push: Instant,
}

impl Executor {
    fn snapshot(&mut self) -> Event {
        self.seq += 1;
        Event::State(Box::new(Snapshot::capture(
            &self.machine,
            self.seq,
            self.plane,
            self.last_step.clone(),
        )))
    }

    fn broadcast(&mut self) {
        let ev = self.snapshot();
        for c in self.clients.values() {
            c.outbox.send(&ev);
        }
        self.last_push = Instant::now();
    }

    fn reply(&self, id: u64, ev: &Event) {
        if let Some(c) = self.clients.get(&id) {
            c.outbox.send(ev);
        }
    }

    fn fail(&self, id: u64, cmd: &Command, message: impl ToString) {
        self.reply(
            id,
            &Event::Error {
                cmd: Some(cmd.name().to_string()),
                message: message.to_string(),
            },
        );
    }

    fn handle(&mut self, msg: ExecMsg) {
        match msg {
            ExecMsg::Connect(id, outbox) => {
                let role = if self.controller.is_none() {
                    self.controller = Some(id);
                    "controller"
                } else {
                    "observer"
                };
                info!("client {id} connected as {role}");
                outbox.send(&Event::Hello { role: role.into() });
                let ev = self.snapshot();
                outbox.send(&ev);
                self.clients.insert(id, Client { outbox });
            }
            ExecMsg::Disconnect(id) => {
                if let Some(c) = self.clients.remove(&id) {
                    c.outbox.close();
                }
                if self.controller == Some(id) {
                    info!("controller {id} left; pausing");
                    self.controller = None;
                    if self.machine.state().status == Status::Running {
                        self.machine.stop();
                        self.broadcast();
                    }
                }
            }
            ExecMsg::Command(id, cmd) => self.command(id, cmd),
            ExecMsg::Reject(id, ev) => self.reply(id, &ev),
        }
    }

    fn command(&mut self, id: u64, cmd: Command) {
        if let Command::Examine(a) = cmd {
            match self.machine.examine(a) {
                Ok(w) => self.reply(
                    id,
                    &Event::Examine {
                        addr: format_address(a),
                        word: w.to_string(),
                    },
                ),
                Err(e) => self.fail(id, &cmd, e),
            }
            return;
        }
        if self.controller != Some(id) {
            self.fail(id, &cmd, "observers cannot control the machine");
            return;
        }
        if let Err(e) = self.apply(&cmd) {
            self.fail(id, &cmd, e);
        }
        self.broadcast();
    }

    fn apply(&mut self, cmd: &Command) -> anyhow::Result<()> {
        let m = &mut self.machine;
        match cmd {
            Command::Start => m.start(),
            Command::Stop => m.stop(),
            Command::Step | Command::StepMicro => {
                if m.state().status == Status::Running {
                    anyhow::bail!("stop the machine before stepping");
                }
                m.start();
                let done = if matches!(cmd, Command::Step) {
                    m.step_instruction().map(Some)
                } else {
                    m.step_micro().map(|r| r.completed)
                };
                m.stop();
                if let Some(r) = done? {
                    self.last_step = Some(LastStep::from_report(&r, m));
                }
            }
            Command::Reset => {
                m.reset();
                self.last_step = None;
            }
            Command::Deposit(a, w) => m.deposit(*a, *w)?,
            Command::SetPc(a) => m.set_pc(*a)?,
            Command::SelectPlane(p) => self.plane = (*p).min(PLANE_COUNT - 1),
            Command::MountTape(ch, tape) => m.mount(*ch, tape.clone())?,
            Command::SetBreakpoint(a) => m.set_breakpoint(*a)?,
            Command::ClearBreakpoint(a) => m.clear_breakpoint(*a)?,
            Command::Boot => {
                m.boot_from_reader()?;
            }
            Command::Examine(_) => unreachable!("handled by caller"),
        }
        Ok(())
    }

    fn run_slice(&mut self) {
        let result = self.machine.run(RunLimits {
            max_instructions: SLICE,
            max_sim_us: u64::MAX,
        });
        let stopped = self.machine.state().status != Status::Running;
        if let Err(e) = result {
            let ev = Event::Error {
                cmd: None,
                message: e.to_string(),
            };
            for c in self.clients.values() {
                c.outbox.send(&ev);
            }
        }
        if stopped || self.last_push.elapsed() >= self.refresh {
            self.broadcast();
        }
    }

    fn run(mut self, rx: Receiver<ExecMsg>, shutdown: Arc<AtomicBool>) -> Machine {
        while !shutdown.load(Ordering::Relaxed) {
            let running = self.machine.state().status == Status::Running;
            let first = if running {
                rx.try_recv().ok()
            } else {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            };
            if let Some(m) = first {
                self.handle(m);
                while let Ok(m) = rx.try_recv() {
                    self.handle(m);
                }
            }
            if self.machine.state().status == Status::Running {
                self.run_slice();
            }
        }
        for c in self.clients.values() {
            c.outbox.close();
        }
        self.machine
    }
}

/// A running panel service.
pub struct PanelHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    executor: JoinHandle<Machine>,
    acceptor: JoinHandle<()>,
}

impl PanelHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, disconnects clients and returns the machine.
    pub fn shutdown(self) -> Machine {
        self.shutdown.store(true, Ordering::Relaxed);
        let _ = self.acceptor.join();
        self.executor.join().expect("executor thread")
    }

    /// Blocks for the life of the service.
    pub fn wait(self) -> Machine {
        let _ = self.acceptor.join();
        self.executor.join().expect("executor thread")
    }
}

pub fn serve(machine: Machine, config: PanelConfig) -> io::Result<PanelHandle> {
    if config.refresh_hz == 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "refresh rate must be positive",
        ));
    }
    let listener = TcpListener::bind(&config.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    info!("panel listening on {addr}");
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let exec = Executor {
        machine,
        clients: BTreeMap::new(),
        controller: None,
        plane: PLANE_COUNT - 1,
        seq: 0,
        last_step: None,
        refresh: Duration::from_secs(1) / config.refresh_hz,
        last_push: Instant::now(),
    };
    let flag = shutdown.clone();
    let executor = thread::Builder::new()
        .name("mr-executor".into())
        .spawn(move || exec.run(rx, flag))?;
    let flag = shutdown.clone();
    let assets = config.assets.clone();
    let acceptor = thread::Builder::new()
        .name("mr-accept".into())
        .spawn(move || {
            let ids = AtomicU64::new(1);
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let id = ids.fetch_add(1, Ordering::Relaxed);
                        let tx = tx.clone();
                        let assets = assets.clone();
                        thread::spawn(move || {
                            if let Err(e) = connection(stream, id, tx, assets.as_deref()) {
                                warn!("client {id} ({peer}): {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => warn!("accept: {e}"),
                }
            }
        })?;
    Ok(PanelHandle {
        addr,
        shutdown,
        executor,
        acceptor,
    })
}

/// Reads the request head without consuming it, if the peer sent `GET`.
/// A peer that stays silent is taken to be a JSON-lines client.
fn sniff_http(stream: &TcpStream) -> io::Result<Option<String>> {
    stream.set_read_timeout(Some(SNIFF_TIMEOUT))?;
    let mut buf = [0u8; 4096];
    let started = Instant::now();
    loop {
        let n = match stream.peek(&mut buf) {
            Ok(0) => return Ok(None),
            Ok(n) => n,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                return Ok(None)
            }
            Err(e) => return Err(e),
        };
        let k = n.min(4);
        if buf[..k] != b"GET "[..k] {
            return Ok(None);
        }
        if let Some(end) = buf[..n].windows(4).position(|w| w == b"\r\n\r\n") {
            return Ok(Some(String::from_utf8_lossy(&buf[..end]).into_owned()));
        }
        if n == buf.len() || started.elapsed() > Duration::from_secs(2) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "oversized or stalled request head",
            ));
        }
        thread::sleep(POLL);
    }
}

fn connection(
    stream: TcpStream,
    id: u64,
    tx: Sender<ExecMsg>,
    assets: Option<&Path>,
) -> io::Result<()> {
    match sniff_http(&stream)? {
        None => json_lines(stream, id, tx),
        Some(head) => {
            let upgrade = head.lines().any(|l| {
                l.to_ascii_lowercase().starts_with("upgrade:")
                    && l.to_ascii_lowercase().contains("websocket")
            });
            if upgrade {
                stream.set_read_timeout(None)?;
                websocket(stream, id, tx)
            } else {
                static_file(stream, &head, assets)
            }
        }
    }
}

fn submit(line: &str, id: u64, tx: &Sender<ExecMsg>) -> bool {
    if line.trim().is_empty() {
        return true;
    }
    let msg = match parse_command(line) {
        Ok(cmd) => ExecMsg::Command(id, cmd),
        Err(e) => ExecMsg::Reject(id, Event::error(e)),
    };
    tx.send(msg).is_ok()
}

fn json_lines(stream: TcpStream, id: u64, tx: Sender<ExecMsg>) -> io::Result<()> {
    stream.set_read_timeout(None)?;
    let outbox = Outbox::new();
    if tx.send(ExecMsg::Connect(id, outbox.clone())).is_err() {
        return Ok(());
    }
    let mut writer = stream.try_clone()?;
    let out = outbox.clone();
    let write_half = thread::spawn(move || {
        while let Ok(next) = out.pop(Duration::from_millis(200)) {
            if let Some(line) = next {
                if writeln!(writer, "{line}").is_err() {
                    break;
                }
            }
        }
        let _ = writer.shutdown(Shutdown::Both);
    });
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                let line = String::from_utf8_lossy(&buf);
                if !submit(&line, id, &tx) {
                    break;
                }
            }
        }
    }
    let _ = tx.send(ExecMsg::Disconnect(id));
    outbox.close();
    let _ = write_half.join();
    Ok(())
}

fn websocket(stream: TcpStream, id: u64, tx: Sender<ExecMsg>) -> io::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let outbox = Outbox::new();
    if tx.send(ExecMsg::Connect(id, outbox.clone())).is_err() {
        return Ok(());
    }
    'session: loop {
        loop {
            match outbox.pop(Duration::ZERO) {
                Ok(Some(line)) => {
                    if ws.send(Message::text(line)).is_err() {
                        break 'session;
                    }
                }
                Ok(None) => break,
                Err(()) => break 'session,
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.lines() {
                    if !submit(line, id, &tx) {
                        break 'session;
                    }
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(_) => break,
        }
    }
    let _ = tx.send(ExecMsg::Disconnect(id));
    outbox.close();
    Ok(())
}

const FALLBACK_INDEX: &str = "<!doctype html>\n<title>MR panel</title>\n\
<p>The front-panel build is not installed. Start <code>mr serve --assets DIR</code> \
with the built panel, or connect a WebSocket client to this address.</p>\n";

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") | Some("map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("md") | Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto the asset directory, refusing to leave it.
pub fn resolve_asset(root: &Path, request: &str) -> Option<PathBuf> {
    let path = request.split(['?', '#']).next().unwrap_or("/");
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut full = root.join(rel);
    if full.is_dir() {
        full.push("index.html");
    }
    full.is_file().then_some(full)
}

fn static_file(mut stream: TcpStream, head: &str, assets: Option<&Path>) -> io::Result<()> {
    let mut consumed = vec![0u8; head.len() + 4];
    stream.read_exact(&mut consumed)?;
    let target = head.split_whitespace().nth(1).unwrap_or("/");
    let found = match assets {
        Some(root) => resolve_asset(root, target).map(|p| (content_type(&p), std::fs::read(&p))),
        None if target == "/" || target == "/index.html" => Some((
            "text/html; charset=utf-8",
            Ok(FALLBACK_INDEX.as_bytes().to_vec()),
        )),
        None => None,
    };
    let (status, ctype, body) = match found {
        Some((ctype, Ok(body))) => ("200 OK", ctype, body),
        _ => ("404 Not Found", "text/plain", b"not found\n".to_vec()),
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(&body)?;
    stream.flush()
}
