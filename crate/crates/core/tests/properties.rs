use std::collections::BTreeMap;

use mr_core::adder::{build_lookahead_adder, build_ripple_adder, check_equivalence, LogicNetwork};
use mr_core::devices::{decode_tape, decode_text, encode_tape, encode_text, repertoire};
use mr_core::isa::{decode, encode, IsaTable, Word, MEMORY_WORDS};
use mr_core::machine::{Alu, Machine, MachineConfig, Phase, RunLimits, Status};
use mr_core::microcode::{cost_envelope, MicroRom};
use mr_core::toolchain::{assemble, disassemble_region};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = Word> {
    (0u32..1 << 18).prop_map(Word::new)
}

fn machine() -> Machine {
    Machine::new(MachineConfig::default()).unwrap()
}

proptest! {
    #[test]
    fn encode_decode_inverse(w in word()) {
        prop_assert_eq!(encode(decode(w)).unwrap(), w);
    }

    #[test]
    fn tape_round_trip(ws in prop::collection::vec(word(), 0..64)) {
        prop_assert_eq!(decode_tape(&encode_tape(&ws)).unwrap(), ws);
    }

    #[test]
    fn text_round_trip(idx in prop::collection::vec(0usize..64, 0..40)) {
        let rep = repertoire();
        let text: String = idx.iter().map(|i| rep[i % rep.len()]).collect();
        prop_assert_eq!(decode_text(&encode_text(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn lookahead_matches_ripple(width in 1usize..12, group in 1usize..6) {
        prop_assume!(group <= width);
        let cla = build_lookahead_adder(width, group).unwrap();
        prop_assert!(check_equivalence(&cla, width).unwrap().is_equivalent());
        prop_assert!(cla.gate_depth() <= build_ripple_adder(width).unwrap().gate_depth());
    }

    #[test]
    fn netlist_round_trip(width in 1usize..8) {
        let net = build_lookahead_adder(width, width.min(3)).unwrap();
        prop_assert_eq!(LogicNetwork::from_netlist(&net.to_netlist()).unwrap(), net);
    }

    #[test]
    fn evaluate_is_pure(bits in prop::collection::vec(any::<bool>(), 9)) {
        let net = build_ripple_adder(4).unwrap();
        let assign: BTreeMap<String, bool> =
            net.inputs().iter().cloned().zip(bits).collect();
        prop_assert_eq!(net.evaluate(&assign).unwrap(), net.evaluate(&assign).unwrap());
    }

    #[test]
    fn alu_matches_host(a in word(), b in word()) {
        let mut alu = Alu::new();
        let (sum, _) = alu.add_signed(a, b);
        prop_assert_eq!(sum, Word::from_signed(a.to_signed() as i64 + b.to_signed() as i64));
        let (diff, _) = alu.sub_signed(a, b);
        prop_assert_eq!(diff, Word::from_signed(a.to_signed() as i64 - b.to_signed() as i64));
    }

    #[test]
    fn sas_keeps_high_bits(target in word(), acc in word()) {
        let mut m = machine();
        m.deposit(0, Word::new(0o22 << 13 | 0o200)).unwrap();
        m.deposit(0o200, target).unwrap();
        m.set_acc(acc);
        m.start();
        m.step_instruction().unwrap();
        let after = m.examine(0o200).unwrap();
        prop_assert_eq!(after.value() >> 10, target.value() >> 10);
        prop_assert_eq!(after.address_field(), acc.address_field());
    }

    /// Any word stream runs with 12 or 16 us per instruction, or stops on an
    /// I/O fault with the instruction undone.
    #[test]
    fn every_instruction_costs_12_or_16(prog in prop::collection::vec(word(), 1..48)) {
        let mut m = machine();
        for (i, w) in prog.iter().enumerate() {
            m.deposit(i as u16, *w).unwrap();
        }
        m.start();
        for _ in 0..200 {
            let before = m.state().clone();
            match m.step_instruction() {
                Ok(r) => {
                    prop_assert!(r.micro_us == 12 || r.micro_us == 16);
                    prop_assert_eq!(r.microwords, 2);
                    if r.status != Status::Running {
                        break;
                    }
                }
                Err(_) => {
                    let after = m.state();
                    prop_assert_eq!(after.pc(), before.pc());
                    prop_assert_eq!(after.sim_time_us(), before.sim_time_us());
                    prop_assert_eq!(after.acc, before.acc);
                    break;
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic(prog in prop::collection::vec(word(), 1..32), acc in word()) {
        let go = || {
            let mut m = machine();
            for (i, w) in prog.iter().enumerate() {
                m.deposit(i as u16, *w).unwrap();
            }
            m.set_acc(acc);
            m.start();
            let _ = m.run(RunLimits::instructions(500));
            m.state().to_text()
        };
        prop_assert_eq!(go(), go());
    }

    #[test]
    fn plane_views_match_memory(cells in prop::collection::vec((0usize..MEMORY_WORDS, word()), 1..20)) {
        let mut m = machine();
        for (a, w) in &cells {
            m.deposit(*a as u16, *w).unwrap();
        }
        for p in 0..18 {
            let v = m.plane_view(p).unwrap();
            for (a, _) in &cells {
                prop_assert_eq!(v.lit(a % 32, a / 32), m.examine(*a as u16).unwrap().bit(p as u32));
            }
        }
    }

    #[test]
    fn disassembly_reassembles(ws in prop::collection::vec(word(), 1..64), start in 0u16..900) {
        let isa = IsaTable::default_table();
        let mut mem = vec![Word::ZERO; MEMORY_WORDS];
        mem[start as usize..start as usize + ws.len()].copy_from_slice(&ws);
        let text = disassemble_region(&mem, start..start + ws.len() as u16, &isa);
        let out = assemble(&text, &isa).unwrap();
        prop_assert_eq!(out.origin, start);
        prop_assert_eq!(out.words, ws);
    }

    #[test]
    fn assembly_is_deterministic(n in 1u16..50) {
        let src = format!("ORG {n:o}\nL: LDA L+1\nDATA {n:o}\nJMP L\nEND L\n");
        let isa = IsaTable::default_table();
        let (a, b) = (assemble(&src, &isa).unwrap(), assemble(&src, &isa).unwrap());
        prop_assert_eq!(a.tape.to_bytes(), b.tape.to_bytes());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn snapshot_text_round_trip(cells in prop::collection::vec((0u16..1024, word()), 0..16), steps in 0usize..6) {
        let mut m = machine();
        for (a, w) in &cells {
            m.deposit(*a, *w).unwrap();
        }
        m.start();
        for _ in 0..steps {
            if m.step_micro().is_err() || m.state().status != Status::Running {
                break;
            }
        }
        let text = m.state().to_text();
        prop_assert_eq!(&mr_core::machine::MachineState::from_text(&text).unwrap(), m.state());
    }
}

#[test]
fn cost_envelope_is_12_and_16() {
    assert_eq!(
        cost_envelope(&MicroRom::default_rom())
            .into_iter()
            .collect::<Vec<_>>(),
        vec![12, 16]
    );
}

#[test]
fn accumulator_changes_only_at_execute() {
    let mut m = machine();
    m.deposit(0, Word::new(0o01 << 13 | 0o10)).unwrap();
    m.deposit(0o10, Word::new(0o777777)).unwrap();
    m.set_acc(Word::new(0o123456));
    m.start();
    let r = m.step_micro().unwrap();
    assert!(r.completed.is_none());
    assert_eq!(m.state().phase, Phase::Execute);
    assert_eq!(m.state().acc, Word::new(0o123456));
    m.step_micro().unwrap();
    assert_eq!(m.state().acc, Word::new(0o123455));
}
