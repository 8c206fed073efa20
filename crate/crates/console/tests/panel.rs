use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use mr_console::panel::{serve, PanelConfig, PanelHandle};
use mr_core::isa::{format_address, IsaTable};
use mr_core::machine::{Machine, MachineConfig};
use mr_core::toolchain::assemble;
use serde_json::Value;

const PATIENCE: Duration = Duration::from_secs(10);

fn start_panel(assets: Option<std::path::PathBuf>) -> PanelHandle {
    let m = Machine::new(MachineConfig::default()).unwrap();
    serve(
        m,
        PanelConfig {
            listen: "127.0.0.1:0".into(),
            refresh_hz: 30,
            assets,
        },
    )
    .unwrap()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr) -> Client {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(PATIENCE)).unwrap();
        Client {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    /// Connects and consumes the hello and initial snapshot.
    fn join(addr: SocketAddr, role: &str) -> Client {
        let mut c = Client::connect(addr);
        let hello = c.next();
        assert_eq!(hello["event"], "hello");
        assert_eq!(hello["role"], role);
        assert_eq!(c.next()["event"], "state");
        c
    }

    fn send(&mut self, line: &str) {
        writeln!(self.writer, "{line}").unwrap();
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).unwrap();
        assert!(n > 0, "server closed the connection");
        serde_json::from_str(&line).unwrap()
    }

    fn until(&mut self, mut pred: impl FnMut(&Value) -> bool) -> Value {
        let t0 = Instant::now();
        loop {
            assert!(t0.elapsed() < PATIENCE, "condition never met");
            let v = self.next();
            if pred(&v) {
                return v;
            }
        }
    }

    fn state(&mut self) -> Value {
        self.until(|v| v["event"] == "state")
    }
}

fn deposit_program(c: &mut Client, src: &str) {
    let out = assemble(src, &IsaTable::default_table()).unwrap();
    for (i, w) in out.words.iter().enumerate() {
        let addr = format_address(out.origin + i as u16);
        c.send(&format!(
            r#"{{"cmd":"deposit","addr":"{addr}","word":"{w}"}}"#
        ));
        c.state();
    }
}

const LOOP: &str = "        ORG 0\nTOP:    ADD 20\n        ADD 20\n        ADD 20\n        ADD 20\n        JMP TOP\n        END\n";

#[test]
fn reset_then_step_gives_two_snapshots() {
    let panel = start_panel(None);
    let mut c = Client::join(panel.local_addr(), "controller");
    c.send(r#"{"cmd":"reset"}"#);
    c.send(r#"{"cmd":"step"}"#);
    let a = c.next();
    let b = c.next();
    assert_eq!(a["event"], "state");
    assert_eq!(a["sim_time_us"], 0);
    assert_eq!(b["event"], "state");
    assert_eq!(b["sim_time_us"], 12);
    assert_eq!(b["status"], "halted");
    assert_eq!(b["last_step"]["disassembly"], "HLT");
    assert!(b["seq"].as_u64() > a["seq"].as_u64());
    panel.shutdown();
}

#[test]
fn breakpoint_set_while_running_pauses_there() {
    let panel = start_panel(None);
    let mut c = Client::join(panel.local_addr(), "controller");
    deposit_program(&mut c, LOOP);
    c.send(r#"{"cmd":"start"}"#);
    c.until(|v| v["event"] == "state" && v["status"] == "running");
    c.send(r#"{"cmd":"set_breakpoint","addr":"0003"}"#);
    let s = c.until(|v| v["event"] == "state" && v["status"] == "paused");
    assert_eq!(s["pc"], "0003");
    assert_eq!(s["breakpoints"], serde_json::json!(["0003"]));
    let m = panel.shutdown();
    assert_eq!(m.state().pc(), 3);
}

#[test]
fn observers_see_identical_sequences() {
    let panel = start_panel(None);
    let addr = panel.local_addr();
    let mut ctl = Client::join(addr, "controller");
    let mut o1 = Client::join(addr, "observer");
    let mut o2 = Client::join(addr, "observer");
    ctl.send(r#"{"cmd":"reset"}"#);
    ctl.send(r#"{"cmd":"deposit","addr":"0000","word":"000001"}"#);
    ctl.send(r#"{"cmd":"select_plane","plane":0}"#);
    ctl.send(r#"{"cmd":"step"}"#);
    ctl.send(r#"{"cmd":"set_pc","addr":"0100"}"#);
    let mut last = 0;
    for _ in 0..5 {
        last = ctl.state()["seq"].as_u64().unwrap();
    }
    let collect = |c: &mut Client| {
        let mut seen = Vec::new();
        loop {
            let v = c.state();
            let done = v["seq"].as_u64().unwrap() == last;
            seen.push(v);
            if done {
                return seen;
            }
        }
    };
    let a = collect(&mut o1);
    let b = collect(&mut o2);
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
    o1.send(r#"{"cmd":"start"}"#);
    let e = o1.until(|v| v["event"] == "error");
    assert_eq!(e["cmd"], "start");
    o1.send(r#"{"cmd":"examine","addr":"0000"}"#);
    let x = o1.until(|v| v["event"] == "examine");
    assert_eq!(x["word"], "000001");
    panel.shutdown();
}

#[test]
fn controller_disconnect_pauses_running_machine() {
    let panel = start_panel(None);
    let addr = panel.local_addr();
    let mut ctl = Client::join(addr, "controller");
    let mut obs = Client::join(addr, "observer");
    deposit_program(&mut ctl, LOOP);
    ctl.send(r#"{"cmd":"start"}"#);
    obs.until(|v| v["event"] == "state" && v["status"] == "running");
    drop(ctl);
    let s = obs.until(|v| v["event"] == "state" && v["status"] != "running");
    assert_eq!(s["status"], "paused");
    let mut next = Client::join(addr, "controller");
    next.send(r#"{"cmd":"start"}"#);
    next.until(|v| v["event"] == "state" && v["status"] == "running");
    next.send(r#"{"cmd":"stop"}"#);
    next.until(|v| v["event"] == "state" && v["status"] == "paused");
    panel.shutdown();
}

#[test]
fn malformed_messages_get_error_frames() {
    let panel = start_panel(None);
    let mut c = Client::join(panel.local_addr(), "controller");
    c.send("this is not json");
    let e = c.next();
    assert_eq!(e["event"], "error");
    assert!(e.get("cmd").is_none());
    c.send(r#"{"cmd":"fly"}"#);
    assert_eq!(c.next()["event"], "error");
    c.send(r#"{"cmd":"deposit","addr":"2000","word":"0"}"#);
    let e = c.next();
    assert_eq!(e["cmd"], "deposit");
    c.send(r#"{"cmd":"select_plane","plane":18}"#);
    assert_eq!(c.next()["cmd"], "select_plane");
    c.send(r#"{"cmd":"boot"}"#);
    let e = c.next();
    assert_eq!(e["event"], "error");
    assert_eq!(e["cmd"], "boot");
    assert_eq!(c.next()["event"], "state");
    c.send(r#"{"cmd":"examine","addr":"0000"}"#);
    assert_eq!(c.next()["event"], "examine");
    panel.shutdown();
}

#[test]
fn effects_follow_command_order() {
    let panel = start_panel(None);
    let mut c = Client::join(panel.local_addr(), "controller");
    for i in 1..=40 {
        c.send(&format!(
            r#"{{"cmd":"deposit","addr":"0100","word":"{i:06o}"}}"#
        ));
        c.send(r#"{"cmd":"examine","addr":"0100"}"#);
    }
    for i in 1..=40 {
        let x = c.until(|v| v["event"] == "examine");
        assert_eq!(x["word"], format!("{i:06o}"));
    }
    panel.shutdown();
}

#[test]
fn snapshot_plane_matches_memory() {
    let panel = start_panel(None);
    let mut c = Client::join(panel.local_addr(), "controller");
    c.send(r#"{"cmd":"deposit","addr":"0041","word":"000021"}"#);
    c.send(r#"{"cmd":"select_plane","plane":0}"#);
    c.state();
    let s = c.state();
    let rows: Vec<&str> = s["plane"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_str().unwrap())
        .collect();
    assert_eq!(s["plane"]["index"], 0);
    assert_eq!(rows.len(), 32);
    let lit: usize = rows.iter().map(|r| r.matches('1').count()).sum();
    assert_eq!(lit, 1);
    assert_eq!(&rows[1][1..2], "1");
    c.send(r#"{"cmd":"select_plane","plane":4}"#);
    let s = c.state();
    assert_eq!(&s["plane"]["rows"][1].as_str().unwrap()[1..2], "1");
    panel.shutdown();
}

#[test]
fn websocket_clients_speak_the_same_protocol() {
    let panel = start_panel(None);
    let url = format!("ws://{}/", panel.local_addr());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let mut next = || -> Value {
        let m = ws.read().unwrap();
        serde_json::from_str(m.to_text().unwrap()).unwrap()
    };
    assert_eq!(next()["role"], "controller");
    assert_eq!(next()["event"], "state");
    ws.send(tungstenite::Message::text(r#"{"cmd":"step"}"#))
        .unwrap();
    let v: Value = serde_json::from_str(ws.read().unwrap().to_text().unwrap()).unwrap();
    assert_eq!(v["sim_time_us"], 12);
    ws.close(None).unwrap();
    panel.shutdown();
}

fn http_get(addr: SocketAddr, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(PATIENCE)).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    body
}

#[test]
fn static_assets_are_served() {
    let dir = std::env::temp_dir().join(format!("mr-panel-assets-{}", std::process::id()));
    std::fs::create_dir_all(dir.join("js")).unwrap();
    std::fs::write(dir.join("index.html"), "<p>panel</p>").unwrap();
    std::fs::write(dir.join("js/app.js"), "let x = 1;").unwrap();
    let panel = start_panel(Some(dir.clone()));
    let addr = panel.local_addr();
    let index = http_get(addr, "/");
    assert!(index.starts_with("HTTP/1.1 200"));
    assert!(index.contains("text/html"));
    assert!(index.ends_with("<p>panel</p>"));
    let js = http_get(addr, "/js/app.js");
    assert!(js.contains("text/javascript"));
    assert!(http_get(addr, "/nope.css").starts_with("HTTP/1.1 404"));
    assert!(http_get(addr, "/../secret").starts_with("HTTP/1.1 404"));
    panel.shutdown();
    std::fs::remove_dir_all(&dir).unwrap();

    let bare = start_panel(None);
    assert!(http_get(bare.local_addr(), "/").starts_with("HTTP/1.1 200"));
    bare.shutdown();
}
