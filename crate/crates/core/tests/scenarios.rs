use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use mr_core::adder::build_ripple_adder;
use mr_core::devices::{decode_tape, encode_tape, DeviceRates, TapeImage};
use mr_core::isa::{encode, Instruction, IsaTable, OperandClass, Word};
use mr_core::machine::{Control, Machine, MachineConfig, RunLimits, Status, StopReason};
use mr_core::microcode::MicroRom;
use mr_core::toolchain::{
    assemble, disassemble_region, run_subroutine_suite, Routine, HELLO_SOURCE, LINKAGE_SOURCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a frozen file; `MR_BLESS=1` rewrites it instead.
fn check_golden(name: &str, actual: &[u8]) {
    let path = golden(name);
    if std::env::var_os("MR_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from golden file");
}

fn isa() -> IsaTable {
    IsaTable::default_table()
}

fn pinned() -> Machine {
    Machine::new(MachineConfig::with_rates(DeviceRates {
        teletype_cps: 10,
        reader_cps: 20,
        fast_reader_cps: 200,
    }))
    .unwrap()
}

#[test]
fn full_adder_netlist_golden() {
    check_golden(
        "full_adder.net",
        build_ripple_adder(1).unwrap().to_netlist().as_bytes(),
    );
}

#[test]
fn default_rom_text_is_canonical() {
    let rom = MicroRom::default_rom();
    assert_eq!(rom.to_text(), mr_core::microcode::DEFAULT_ROM);
    assert_eq!(IsaTable::parse(&isa().to_text()).unwrap(), isa());
}

#[test]
fn multiply_tape_golden() {
    let out = Routine::Multiply.assemble(&isa());
    check_golden("multiply.mrt", &out.tape.to_bytes());
    check_golden("multiply.lst", out.listing_text().as_bytes());
    // Hand-encoded stub: LDA 0004, SAS 0045, JMP 0020, HLT, DATA 0003.
    let words = decode_tape(&out.tape).unwrap();
    let hand = [0o060004, 0o440045, 0o340020, 0o000000, 0o000003];
    assert_eq!(
        words[..5].iter().map(|w| w.value()).collect::<Vec<_>>(),
        hand
    );
    assert_eq!(out.symbol("MULX"), Some(0o45));
}

#[test]
fn every_opcode_assembles_and_disassembles() {
    let isa = isa();
    for e in isa.entries() {
        let line = match e.operand {
            OperandClass::None => e.mnemonic.clone(),
            OperandClass::Memory => format!("{} 0000", e.mnemonic),
            OperandClass::Device => format!("{} 0", e.mnemonic),
        };
        let out = assemble(&format!("{line}\nEND\n"), &isa).unwrap();
        assert_eq!(mr_core::isa::disassemble(out.words[0], &isa), line);
    }
}

#[test]
fn loader_round_trip() {
    let out = Routine::Divide.assemble(&isa());
    let mut m = pinned();
    m.boot_load(&out.tape).unwrap();
    assert_eq!(&m.state().memory()[..out.words.len()], &out.words[..]);
    for l in &out.listing {
        if let (Some(a), Some(w)) = (l.address, l.word) {
            assert_eq!(m.examine(a).unwrap(), w);
        }
    }
    let text = disassemble_region(m.state().memory(), 0..out.words.len() as u16, &isa());
    assert_eq!(assemble(&text, &isa()).unwrap().words, out.words);
}

#[test]
fn hello_prints_golden_text() {
    let out = assemble(HELLO_SOURCE, &isa()).unwrap();
    let mut m = pinned();
    m.boot_load(&out.tape).unwrap();
    let boot_us = m.state().sim_time_us();
    m.start();
    let r = m.run(RunLimits::instructions(10_000)).unwrap();
    assert_eq!(r.reason, StopReason::Halted);
    let text = m.devices().printed_text(0).unwrap();
    check_golden("hello.txt", text.as_bytes());
    assert_eq!(text, "HELLO MR\r\n");
    // 10 frames at 10 cps
    let io = 10 * 100_000;
    assert!(m.state().sim_time_us() - boot_us > io);
}

#[test]
fn boot_state_golden() {
    let mut m = pinned();
    let tape = Routine::Multiply.assemble(&isa()).tape;
    let r = m.boot_load(&tape).unwrap();
    assert_eq!(r.elapsed_us, tape.len() as u64 * 5_000);
    assert_eq!(m.instructions_executed(), 0);
    check_golden("multiply_boot.state", m.state().to_text().as_bytes());
}

#[test]
fn three_word_boot_leaves_rest_untouched() {
    let mut m = pinned();
    m.deposit(3, Word::new(0o555)).unwrap();
    let words = [Word::new(1), Word::new(0o777777), Word::new(0o123)];
    m.boot_load(&encode_tape(&words)).unwrap();
    assert_eq!(&m.state().memory()[..3], &words);
    assert_eq!(m.examine(3).unwrap(), Word::new(0o555));
    assert_eq!(m.state().status, Status::Halted);
}

#[test]
fn boot_from_mounted_reader() {
    let mut m = pinned();
    let tape = assemble(LINKAGE_SOURCE, &isa()).unwrap().tape;
    m.mount(4, tape.clone()).unwrap();
    let r = m.boot_from_reader().unwrap();
    assert_eq!(r.frames, tape.len());
    assert!(m.boot_from_reader().is_err());
}

#[test]
fn linkage_returns_to_both_callers() {
    let out = assemble(LINKAGE_SOURCE, &isa()).unwrap();
    let mut m = pinned();
    m.boot_load(&out.tape).unwrap();
    m.start();
    let subx = out.symbol("SUBX").unwrap();
    let mut returns = Vec::new();
    loop {
        let r = m.step_instruction().unwrap();
        if r.address == subx {
            returns.push(m.state().pc());
        }
        if r.status == Status::Halted {
            break;
        }
    }
    assert_eq!(
        returns,
        vec![out.symbol("BACK1").unwrap(), out.symbol("BACK2").unwrap()]
    );
    assert_eq!(
        m.examine(out.symbol("MARK1").unwrap()).unwrap(),
        Word::new(1)
    );
    assert_eq!(
        m.examine(out.symbol("MARK2").unwrap()).unwrap(),
        Word::new(2)
    );
    assert_eq!(
        m.examine(out.symbol("COUNT").unwrap()).unwrap(),
        Word::new(2)
    );
}

#[test]
fn alu_path_matches_host_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut m = pinned();
    let add = |op: u32| encode(Instruction::new(op, 0, 0o100).unwrap()).unwrap();
    for i in 0..10_000 {
        let (a, b): (i64, i64) = (
            rng.random_range(-(1 << 17)..1 << 17),
            rng.random_range(-(1 << 17)..1 << 17),
        );
        let sub = i % 2 == 1;
        m.deposit(0, add(if sub { 2 } else { 1 })).unwrap();
        m.deposit(0o100, Word::from_signed(b)).unwrap();
        m.set_acc(Word::from_signed(a));
        m.set_pc(0).unwrap();
        m.start();
        m.step_instruction().unwrap();
        let want = if sub { a - b } else { a + b };
        assert_eq!(m.state().acc, Word::from_signed(want), "{a} {b} sub={sub}");
        let in_range = (-(1 << 17)..1 << 17).contains(&want);
        assert_eq!(m.state().overflow, !in_range);
        let mut s = m.state().clone();
        s.overflow = false;
        m.restore(s);
    }
}

#[test]
fn full_grid_multiply_and_divide() {
    let values: Vec<i32> = (0..50).map(|i| (i - 25) * 5242 + (i % 7) - 4).collect();
    let pairs: Vec<(i32, i32)> = values
        .iter()
        .flat_map(|&a| values.iter().map(move |&b| (a, b)))
        .collect();
    let mut m = pinned();
    for routine in [Routine::Multiply, Routine::Divide] {
        let tape = routine.assemble(&isa()).tape;
        for r in run_subroutine_suite(&mut m, &tape, &pairs).unwrap() {
            assert!(r.matches_host(routine), "{routine:?} {r:?}");
        }
    }
}

fn counting_loop() -> (Machine, u16) {
    let src = "LOOP: LDA N\nADD ONE\nSTA N\nJMP LOOP\nN: DATA 0\nONE: DATA 1\nEND\n";
    let out = assemble(src, &isa()).unwrap();
    let mut m = pinned();
    m.boot_load(&out.tape).unwrap();
    (m, out.symbol("LOOP").unwrap())
}

#[test]
fn breakpoint_pauses_each_iteration() {
    let (mut m, lp) = counting_loop();
    m.set_breakpoint(lp).unwrap();
    m.start();
    for i in 1..=3 {
        let r = m.run(RunLimits::instructions(100)).unwrap();
        assert_eq!(r.reason, StopReason::Breakpoint(lp));
        assert_eq!(m.state().pc(), lp);
        assert_eq!(m.state().status, Status::Paused);
        // the first run starts on the breakpoint and passes it once
        assert_eq!(m.examine(4).unwrap(), Word::new(i));
        let hash = m.state().memory_digest();
        m.start();
        assert_eq!(m.state().memory_digest(), hash);
    }
    m.clear_breakpoint(lp).unwrap();
    let r = m.run(RunLimits::instructions(40)).unwrap();
    assert_eq!(r.reason, StopReason::InstructionLimit);
}

#[test]
fn unreached_breakpoint_is_inert() {
    let out = assemble(HELLO_SOURCE, &isa()).unwrap();
    let mut m = pinned();
    m.boot_load(&out.tape).unwrap();
    m.set_breakpoint(0o777).unwrap();
    m.start();
    assert_eq!(
        m.run(RunLimits::instructions(10_000)).unwrap().reason,
        StopReason::Halted
    );
}

#[test]
fn hot_breakpoint_from_another_thread() {
    let (mut m, lp) = counting_loop();
    let h = m.control_handle();
    m.start();
    let runner = thread::spawn(move || {
        let r = m
            .run(RunLimits {
                max_instructions: u64::MAX,
                max_sim_us: u64::MAX,
            })
            .unwrap();
        (m, r)
    });
    thread::sleep(Duration::from_millis(20));
    assert!(h.send(Control::SetBreakpoint(lp)));
    let (mut m, r) = runner.join().unwrap();
    assert_eq!(r.reason, StopReason::Breakpoint(lp));
    assert_eq!(m.state().pc(), lp);
    // memory at the pause equals an undisturbed run of the same length
    let (mut reference, _) = counting_loop();
    reference.start();
    reference
        .run(RunLimits::instructions(m.instructions_executed()))
        .unwrap();
    assert_eq!(m.state().memory_digest(), reference.state().memory_digest());
    let paused = m.state().clone();
    h.send(Control::ClearBreakpoint(lp));
    m.start();
    let r = m.run(RunLimits::instructions(4)).unwrap();
    assert_eq!(r.reason, StopReason::InstructionLimit);
    assert_eq!(m.state().pc(), lp);
    assert!(m.state().breakpoints.is_empty());
    // one more pass through the loop: only the counter moved
    assert_eq!(m.examine(4).unwrap().value(), paused.read(4).value() + 1);
}

#[test]
fn reset_clears_devices_but_keeps_mounted_reader() {
    let mut m = pinned();
    let tape = TapeImage::new(vec![1, 2, 3], mr_core::devices::Provenance::Imported).unwrap();
    m.mount(3, tape).unwrap();
    m.deposit(0, encode(Instruction::new(0o23, 3, 0).unwrap()).unwrap())
        .unwrap();
    m.start();
    m.step_instruction().unwrap();
    assert_eq!(m.state().acc, Word::new(1));
    m.reset();
    m.deposit(0, encode(Instruction::new(0o23, 3, 0).unwrap()).unwrap())
        .unwrap();
    m.start();
    m.step_instruction().unwrap();
    assert_eq!(m.state().acc, Word::new(1));
}
