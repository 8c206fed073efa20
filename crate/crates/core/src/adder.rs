//! Gate-level combinational logic.
//!
//! A [`LogicNetwork`] is a DAG of AND/OR/NOT gates listed in topological
//! order. The machine's arithmetic element is one of these networks, so every
//! ADD and SUB the emulator executes is the result of evaluating gates, not
//! of host integer arithmetic.
//!
//! Two adder generators are provided: a ripple-carry baseline and a two-level
//! carry-lookahead design in the group-generate/group-propagate style. Both
//! use the port naming convention `a0..`, `b0..`, `cin` for inputs and
//! `s0..`, `cout` for outputs, bit 0 least significant.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Depth of the width-1 full adder emitted by both generators.
///
/// Counted on the emitted gates: `g = a·b`, `p = a+b` (level 1); `!g`
/// (level 2); half sum `h = p·!g` (level 3); then `s = h ⊕ cin` built as
/// `(h+cin)·!(h·cin)` adds three more levels (4, 5, 6). The carry
/// `g + p·cin` finishes at level 3.
pub const FULL_ADDER_DEPTH: usize = 6;

/// Default lookahead group size for the 18-bit machine adder (3 groups).
pub const MACHINE_GROUP_SIZE: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("adder width must be at least 1")]
    ZeroWidth,
    #[error("group size {group_size} invalid for width {width}")]
    GroupSize { width: usize, group_size: usize },
    #[error("node name `{0}` defined twice")]
    DuplicateName(String),
    #[error("reference to undefined node {0}")]
    UndefinedNode(String),
    #[error("{kind} gate needs {expected} inputs, got {got}")]
    FanIn {
        kind: GateKind,
        expected: &'static str,
        got: usize,
    },
    #[error("missing value for input `{0}`")]
    MissingInput(String),
    #[error("assignment names unknown input `{0}`")]
    ExtraInput(String),
    #[error("expected {expected} input lanes, got {got}")]
    LaneCount { expected: usize, got: usize },
    #[error("network does not have width-{width} adder ports: {reason}")]
    PortShape { width: usize, reason: String },
    #[error("gate index {0} out of range")]
    GateIndex(usize),
    #[error("netlist line {line}: {message}")]
    Netlist { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    And,
    Or,
    Not,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::And => "AND",
            GateKind::Or => "OR",
            GateKind::Not => "NOT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "AND" => Some(GateKind::And),
            "OR" => Some(GateKind::Or),
            "NOT" => Some(GateKind::Not),
            _ => None,
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of a node. Primary inputs come first, then one node per gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub kind: GateKind,
    pub inputs: Vec<NodeId>,
}

/// An immutable, topologically ordered gate network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicNetwork {
    inputs: Vec<String>,
    gates: Vec<Gate>,
    outputs: Vec<(String, NodeId)>,
}

/// Result of evaluating a network on a named assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    pub outputs: BTreeMap<String, bool>,
    /// Inputs that were supplied but cannot influence any output.
    pub unused_inputs: Vec<String>,
}

fn check_fan_in(kind: GateKind, n: usize) -> Result<(), NetworkError> {
    let ok = match kind {
        GateKind::Not => n == 1,
        GateKind::And | GateKind::Or => n >= 2,
    };
    if ok {
        Ok(())
    } else {
        Err(NetworkError::FanIn {
            kind,
            expected: if kind == GateKind::Not {
                "exactly 1"
            } else {
                "at least 2"
            },
            got: n,
        })
    }
}

/// Incremental constructor; a gate may only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    inputs: Vec<String>,
    input_names: HashSet<String>,
    gates: Vec<Gate>,
    outputs: Vec<(String, NodeId)>,
    output_names: HashSet<String>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn node_count(&self) -> usize {
        self.inputs.len() + self.gates.len()
    }

    pub fn input(&mut self, name: &str) -> Result<NodeId, NetworkError> {
        if !self.gates.is_empty() {
            // Inputs are numbered before gates; adding one later would renumber them.
            return Err(NetworkError::Netlist {
                line: 0,
                message: format!("input `{name}` declared after the first gate"),
            });
        }
        if !self.input_names.insert(name.to_string()) {
            return Err(NetworkError::DuplicateName(name.to_string()));
        }
        self.inputs.push(name.to_string());
        Ok(NodeId(self.inputs.len() as u32 - 1))
    }

    pub fn gate(&mut self, kind: GateKind, inputs: &[NodeId]) -> Result<NodeId, NetworkError> {
        check_fan_in(kind, inputs.len())?;
        let limit = self.node_count();
        if let Some(bad) = inputs.iter().find(|n| n.index() >= limit) {
            return Err(NetworkError::UndefinedNode(format!("#{}", bad.0)));
        }
        self.gates.push(Gate {
            kind,
            inputs: inputs.to_vec(),
        });
        Ok(NodeId(self.node_count() as u32 - 1))
    }

    pub fn not(&mut self, x: NodeId) -> Result<NodeId, NetworkError> {
        self.gate(GateKind::Not, &[x])
    }

    /// AND of the terms; a single term is returned unchanged.
    pub fn and_all(&mut self, terms: &[NodeId]) -> Result<NodeId, NetworkError> {
        match terms {
            [] => Err(NetworkError::FanIn {
                kind: GateKind::And,
                expected: "at least 1 term",
                got: 0,
            }),
            [one] => Ok(*one),
            _ => self.gate(GateKind::And, terms),
        }
    }

    /// OR of the terms; a single term is returned unchanged.
    pub fn or_all(&mut self, terms: &[NodeId]) -> Result<NodeId, NetworkError> {
        match terms {
            [] => Err(NetworkError::FanIn {
                kind: GateKind::Or,
                expected: "at least 1 term",
                got: 0,
            }),
            [one] => Ok(*one),
            _ => self.gate(GateKind::Or, terms),
        }
    }

    /// Sum of products: OR over the AND of each term.
    pub fn sum_of_products(&mut self, products: &[Vec<NodeId>]) -> Result<NodeId, NetworkError> {
        let mut terms = Vec::with_capacity(products.len());
        for p in products {
            terms.push(self.and_all(p)?);
        }
        self.or_all(&terms)
    }

    /// `x ⊕ y` as `(x + y) · !(x · y)`, three levels deep.
    pub fn xor(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, NetworkError> {
        let either = self.gate(GateKind::Or, &[x, y])?;
        let both = self.gate(GateKind::And, &[x, y])?;
        let not_both = self.not(both)?;
        self.gate(GateKind::And, &[either, not_both])
    }

    pub fn output(&mut self, name: &str, node: NodeId) -> Result<(), NetworkError> {
        if node.index() >= self.node_count() {
            return Err(NetworkError::UndefinedNode(format!("#{}", node.0)));
        }
        if !self.output_names.insert(name.to_string()) {
            return Err(NetworkError::DuplicateName(name.to_string()));
        }
        self.outputs.push((name.to_string(), node));
        Ok(())
    }

    pub fn finish(self) -> LogicNetwork {
        LogicNetwork {
            inputs: self.inputs,
            gates: self.gates,
            outputs: self.outputs,
        }
    }
}

impl LogicNetwork {
    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    fn node_count(&self) -> usize {
        self.inputs.len() + self.gates.len()
    }

    /// Checks the structural invariants: names unique, fan-in rules, every
    /// gate input defined earlier, every output an existing node.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let mut seen = HashSet::new();
        for name in &self.inputs {
            if !seen.insert(name) {
                return Err(NetworkError::DuplicateName(name.clone()));
            }
        }
        for (i, gate) in self.gates.iter().enumerate() {
            check_fan_in(gate.kind, gate.inputs.len())?;
            let own = self.inputs.len() + i;
            if let Some(bad) = gate.inputs.iter().find(|n| n.index() >= own) {
                return Err(NetworkError::UndefinedNode(format!("#{}", bad.0)));
            }
        }
        let mut seen = HashSet::new();
        for (name, node) in &self.outputs {
            if !seen.insert(name) {
                return Err(NetworkError::DuplicateName(name.clone()));
            }
            if node.index() >= self.node_count() {
                return Err(NetworkError::UndefinedNode(format!("#{}", node.0)));
            }
        }
        Ok(())
    }

    /// Replaces the kind of one gate, keeping its inputs. Used to build
    /// mutated fixtures for the equivalence checker.
    pub fn with_gate_kind(
        &self,
        index: usize,
        kind: GateKind,
    ) -> Result<LogicNetwork, NetworkError> {
        let gate = self
            .gates
            .get(index)
            .ok_or(NetworkError::GateIndex(index))?;
        check_fan_in(kind, gate.inputs.len())?;
        let mut net = self.clone();
        net.gates[index].kind = kind;
        Ok(net)
    }

    /// Bit-parallel evaluation: each `u64` carries 64 independent vectors.
    /// `inputs` is positional in declaration order; results follow output order.
    pub fn evaluate_lanes(&self, inputs: &[u64]) -> Result<Vec<u64>, NetworkError> {
        let mut scratch = Vec::new();
        let mut out = vec![0; self.outputs.len()];
        self.evaluate_lanes_into(inputs, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// As [`evaluate_lanes`](Self::evaluate_lanes) but reusing caller buffers.
    pub fn evaluate_lanes_into(
        &self,
        inputs: &[u64],
        scratch: &mut Vec<u64>,
        out: &mut [u64],
    ) -> Result<(), NetworkError> {
        if inputs.len() != self.inputs.len() {
            return Err(NetworkError::LaneCount {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        if out.len() != self.outputs.len() {
            return Err(NetworkError::LaneCount {
                expected: self.outputs.len(),
                got: out.len(),
            });
        }
        scratch.clear();
        scratch.extend_from_slice(inputs);
        for gate in &self.gates {
            let v = match gate.kind {
                GateKind::Not => !scratch[gate.inputs[0].index()],
                GateKind::And => gate
                    .inputs
                    .iter()
                    .fold(!0u64, |acc, n| acc & scratch[n.index()]),
                GateKind::Or => gate
                    .inputs
                    .iter()
                    .fold(0u64, |acc, n| acc | scratch[n.index()]),
            };
            scratch.push(v);
        }
        for (slot, (_, node)) in out.iter_mut().zip(&self.outputs) {
            *slot = scratch[node.index()];
        }
        Ok(())
    }

    /// Evaluates on a named assignment, which must name every primary input
    /// exactly once and nothing else.
    pub fn evaluate(
        &self,
        assignment: &BTreeMap<String, bool>,
    ) -> Result<Evaluation, NetworkError> {
        let known: HashSet<&str> = self.inputs.iter().map(String::as_str).collect();
        if let Some(extra) = assignment.keys().find(|k| !known.contains(k.as_str())) {
            return Err(NetworkError::ExtraInput(extra.clone()));
        }
        let mut lanes = Vec::with_capacity(self.inputs.len());
        for name in &self.inputs {
            let bit = *assignment
                .get(name)
                .ok_or_else(|| NetworkError::MissingInput(name.clone()))?;
            lanes.push(if bit { 1 } else { 0 });
        }
        let values = self.evaluate_lanes(&lanes)?;
        let outputs = self
            .outputs
            .iter()
            .zip(values)
            .map(|((name, _), v)| (name.clone(), v & 1 == 1))
            .collect();
        Ok(Evaluation {
            outputs,
            unused_inputs: self.unused_inputs(),
        })
    }

    /// Primary inputs outside the fan-in cone of every output.
    pub fn unused_inputs(&self) -> Vec<String> {
        let mut live = vec![false; self.node_count()];
        for (_, node) in &self.outputs {
            live[node.index()] = true;
        }
        for (i, gate) in self.gates.iter().enumerate().rev() {
            if live[self.inputs.len() + i] {
                for n in &gate.inputs {
                    live[n.index()] = true;
                }
            }
        }
        self.inputs
            .iter()
            .zip(&live)
            .filter(|(_, &l)| !l)
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Per-node logic level: inputs are 0, a gate is one more than its deepest input.
    pub fn node_depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.inputs.len()];
        depth.reserve(self.gates.len());
        for gate in &self.gates {
            let d = gate
                .inputs
                .iter()
                .map(|n| depth[n.index()])
                .max()
                .unwrap_or(0);
            depth.push(d + 1);
        }
        depth
    }

    /// Longest input-to-output path measured in gates.
    pub fn gate_depth(&self) -> usize {
        let depth = self.node_depths();
        self.outputs
            .iter()
            .map(|(_, n)| depth[n.index()])
            .max()
            .unwrap_or(0)
    }

    fn node_name(&self, node: NodeId) -> String {
        match self.inputs.get(node.index()) {
            Some(name) => name.clone(),
            None => format!("g{}", node.index() - self.inputs.len()),
        }
    }

    /// Renders the netlist text form.
    ///
    /// ```text
    /// INPUT a0 b0 cin
    /// OUTPUT s0 g9
    /// OUTPUT cout g5
    /// g0 AND a0 b0
    /// ```
    pub fn to_netlist(&self) -> String {
        let mut s = String::new();
        if !self.inputs.is_empty() {
            s.push_str("INPUT");
            for name in &self.inputs {
                s.push(' ');
                s.push_str(name);
            }
            s.push('\n');
        }
        for (name, node) in &self.outputs {
            writeln!(s, "OUTPUT {} {}", name, self.node_name(*node)).unwrap();
        }
        for (i, gate) in self.gates.iter().enumerate() {
            write!(s, "g{} {}", i, gate.kind).unwrap();
            for n in &gate.inputs {
                s.push(' ');
                s.push_str(&self.node_name(*n));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the netlist text form. Gate node ids are arbitrary identifiers
    /// but must be defined before use; `#` starts a comment.
    pub fn from_netlist(text: &str) -> Result<LogicNetwork, NetworkError> {
        let mut builder = NetworkBuilder::new();
        let mut names: HashMap<String, NodeId> = HashMap::new();
        let mut pending_outputs: Vec<(usize, String, String)> = Vec::new();
        let err = |line: usize, message: String| NetworkError::Netlist { line, message };

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap();
            match head {
                "INPUT" => {
                    for name in tokens {
                        let id = builder
                            .input(name)
                            .map_err(|e| err(line_no, e.to_string()))?;
                        names.insert(name.to_string(), id);
                    }
                }
                "OUTPUT" => {
                    let (Some(name), Some(node), None) =
                        (tokens.next(), tokens.next(), tokens.next())
                    else {
                        return Err(err(line_no, "expected `OUTPUT <name> <node>`".into()));
                    };
                    pending_outputs.push((line_no, name.to_string(), node.to_string()));
                }
                id => {
                    let kind = tokens.next().and_then(GateKind::parse).ok_or_else(|| {
                        err(line_no, "expected `<node> AND|OR|NOT <inputs>`".into())
                    })?;
                    if names.contains_key(id) {
                        return Err(err(line_no, format!("node `{id}` defined twice")));
                    }
                    let ins = tokens
                        .map(|t| {
                            names
                                .get(t)
                                .copied()
                                .ok_or_else(|| err(line_no, format!("undefined node `{t}`")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    let node = builder
                        .gate(kind, &ins)
                        .map_err(|e| err(line_no, e.to_string()))?;
                    names.insert(id.to_string(), node);
                }
            }
        }
        for (line_no, name, node) in pending_outputs {
            let id = *names
                .get(&node)
                .ok_or_else(|| err(line_no, format!("undefined node `{node}`")))?;
            builder
                .output(&name, id)
                .map_err(|e| err(line_no, e.to_string()))?;
        }
        Ok(builder.finish())
    }
}

struct BitSignals {
    cin: NodeId,
    generate: Vec<NodeId>,
    propagate: Vec<NodeId>,
    half_sum: Vec<NodeId>,
}

fn adder_inputs(builder: &mut NetworkBuilder, width: usize) -> Result<BitSignals, NetworkError> {
    let a = (0..width)
        .map(|i| builder.input(&format!("a{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let b = (0..width)
        .map(|i| builder.input(&format!("b{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let cin = builder.input("cin")?;
    let mut generate = Vec::with_capacity(width);
    let mut propagate = Vec::with_capacity(width);
    let mut half_sum = Vec::with_capacity(width);
    for i in 0..width {
        let g = builder.gate(GateKind::And, &[a[i], b[i]])?;
        let p = builder.gate(GateKind::Or, &[a[i], b[i]])?;
        let ng = builder.not(g)?;
        let h = builder.gate(GateKind::And, &[p, ng])?;
        generate.push(g);
        propagate.push(p);
        half_sum.push(h);
    }
    Ok(BitSignals {
        cin,
        generate,
        propagate,
        half_sum,
    })
}

/// Ripple-carry adder: `c[i+1] = g[i] + p[i]·c[i]`, two levels per bit.
pub fn build_ripple_adder(width: usize) -> Result<LogicNetwork, NetworkError> {
    if width == 0 {
        return Err(NetworkError::ZeroWidth);
    }
    let mut nb = NetworkBuilder::new();
    let sig = adder_inputs(&mut nb, width)?;
    let mut carry = sig.cin;
    let mut sums = Vec::with_capacity(width);
    for i in 0..width {
        sums.push(nb.xor(sig.half_sum[i], carry)?);
        let through = nb.gate(GateKind::And, &[sig.propagate[i], carry])?;
        carry = nb.gate(GateKind::Or, &[sig.generate[i], through])?;
    }
    for (i, s) in sums.into_iter().enumerate() {
        nb.output(&format!("s{i}"), s)?;
    }
    nb.output("cout", carry)?;
    Ok(nb.finish())
}

/// Two-level carry-lookahead adder.
///
/// Bits are split into groups of `group_size` (the last group may be short).
/// Each group forms a generate `G` and propagate `P`; the carry into every
/// bit is then a flat sum of products over in-group `g`/`p`, the group
/// signals of lower groups, and `cin`. Carry depth is constant in width.
pub fn build_lookahead_adder(
    width: usize,
    group_size: usize,
) -> Result<LogicNetwork, NetworkError> {
    if width == 0 {
        return Err(NetworkError::ZeroWidth);
    }
    if group_size == 0 || group_size > width {
        return Err(NetworkError::GroupSize { width, group_size });
    }
    let mut nb = NetworkBuilder::new();
    let sig = adder_inputs(&mut nb, width)?;
    let (g, p) = (&sig.generate, &sig.propagate);

    // In-group products for the carry into bit `i` from bits `lo..i`.
    let local_terms = |lo: usize, i: usize| -> Vec<Vec<NodeId>> {
        (lo..i)
            .map(|t| {
                let mut term: Vec<NodeId> = ((t + 1)..i).map(|k| p[k]).collect();
                term.push(g[t]);
                term
            })
            .collect()
    };

    let starts: Vec<usize> = (0..width).step_by(group_size).collect();
    // Carry into each group, kept as a list of product terms.
    let mut group_carry: Vec<Vec<NodeId>> = vec![vec![sig.cin]];
    let mut carries = vec![sig.cin; width];

    for &lo in &starts {
        let hi = (lo + group_size).min(width);
        #[allow(clippy::needless_range_loop)]
        for i in lo..hi {
            let mut terms = local_terms(lo, i);
            let through: Vec<NodeId> = (lo..i).map(|k| p[k]).collect();
            for t in &group_carry {
                let mut term = through.clone();
                term.extend_from_slice(t);
                terms.push(term);
            }
            carries[i] = nb.sum_of_products(&terms)?;
        }
        // Group signals feed every higher group's carries.
        let gen_terms = local_terms(lo, hi);
        let group_g = nb.sum_of_products(&gen_terms)?;
        let prop: Vec<NodeId> = (lo..hi).map(|k| p[k]).collect();
        let group_p = nb.and_all(&prop)?;
        let mut next = vec![vec![group_g]];
        for t in &group_carry {
            let mut term = vec![group_p];
            term.extend_from_slice(t);
            next.push(term);
        }
        group_carry = next;
    }
    let carry_out = nb.sum_of_products(&group_carry)?;

    let mut sums = Vec::with_capacity(width);
    for (&h, &c) in sig.half_sum.iter().zip(&carries) {
        sums.push(nb.xor(h, c)?);
    }
    for (i, s) in sums.into_iter().enumerate() {
        nb.output(&format!("s{i}"), s)?;
    }
    nb.output("cout", carry_out)?;
    Ok(nb.finish())
}

/// Width-6 lookahead adder with its first AND gate changed to OR.
///
/// A single-token slip of this kind is invisible on paper but breaks the
/// adder; [`check_equivalence`] must find it.
pub fn flawed_lookahead_fixture() -> LogicNetwork {
    let net = build_lookahead_adder(6, 3).expect("valid parameters");
    let first_and = net
        .gates()
        .iter()
        .position(|g| g.kind == GateKind::And)
        .expect("adder has AND gates");
    net.with_gate_kind(first_and, GateKind::Or)
        .expect("same fan-in")
}

/// Positions of the adder ports inside a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdderPorts {
    pub width: usize,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub carry_in: usize,
    pub sum: Vec<usize>,
    pub carry_out: usize,
}

/// Largest width whose operands fit the `u64` helpers.
pub const MAX_PORT_WIDTH: usize = 32;

impl AdderPorts {
    pub fn resolve(net: &LogicNetwork, width: usize) -> Result<AdderPorts, NetworkError> {
        let shape = |reason: String| NetworkError::PortShape { width, reason };
        if width == 0 || width > MAX_PORT_WIDTH {
            return Err(shape(format!("width must be in 1..={MAX_PORT_WIDTH}")));
        }
        if net.inputs().len() != 2 * width + 1 {
            return Err(shape(format!(
                "expected {} inputs, found {}",
                2 * width + 1,
                net.inputs().len()
            )));
        }
        if net.outputs().len() != width + 1 {
            return Err(shape(format!(
                "expected {} outputs, found {}",
                width + 1,
                net.outputs().len()
            )));
        }
        let input_pos: HashMap<&str, usize> = net
            .inputs()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let output_pos: HashMap<&str, usize> = net
            .outputs()
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i))
            .collect();
        let find_in = |name: String| {
            input_pos
                .get(name.as_str())
                .copied()
                .ok_or_else(|| shape(format!("missing input `{name}`")))
        };
        let find_out = |name: String| {
            output_pos
                .get(name.as_str())
                .copied()
                .ok_or_else(|| shape(format!("missing output `{name}`")))
        };
        Ok(AdderPorts {
            width,
            a: (0..width)
                .map(|i| find_in(format!("a{i}")))
                .collect::<Result<_, _>>()?,
            b: (0..width)
                .map(|i| find_in(format!("b{i}")))
                .collect::<Result<_, _>>()?,
            carry_in: find_in("cin".into())?,
            sum: (0..width)
                .map(|i| find_out(format!("s{i}")))
                .collect::<Result<_, _>>()?,
            carry_out: find_out("cout".into())?,
        })
    }

    pub fn mask(&self) -> u64 {
        (1u64 << self.width) - 1
    }

    /// Packs up to 64 `(a, b, cin)` vectors into input lanes.
    pub fn pack(&self, vectors: &[(u64, u64, bool)]) -> Vec<u64> {
        debug_assert!(vectors.len() <= 64);
        let mut lanes = vec![0u64; 2 * self.width + 1];
        for (lane, &(a, b, cin)) in vectors.iter().enumerate() {
            for bit in 0..self.width {
                lanes[self.a[bit]] |= ((a >> bit) & 1) << lane;
                lanes[self.b[bit]] |= ((b >> bit) & 1) << lane;
            }
            lanes[self.carry_in] |= (cin as u64) << lane;
        }
        lanes
    }

    /// Extracts `(sum, carry_out)` for one lane from evaluated outputs.
    pub fn unpack(&self, outputs: &[u64], lane: usize) -> (u64, bool) {
        let mut sum = 0u64;
        for bit in 0..self.width {
            sum |= ((outputs[self.sum[bit]] >> lane) & 1) << bit;
        }
        (sum, (outputs[self.carry_out] >> lane) & 1 == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counterexample {
    pub a: u64,
    pub b: u64,
    pub carry_in: bool,
    pub expected_sum: u64,
    pub expected_carry: bool,
    pub actual_sum: u64,
    pub actual_carry: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub width: usize,
    pub exhaustive: bool,
    pub vectors_checked: u64,
    pub counterexamples: Vec<Counterexample>,
}

impl EquivalenceReport {
    pub fn is_equivalent(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Widths up to this are checked exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 8;
/// Random vectors drawn for wider adders, on top of the structured corners.
pub const RANDOM_VECTORS: usize = 10_000;
const RANDOM_SEED: u64 = 0x4d52_1957;

fn corner_vectors(width: usize) -> Vec<(u64, u64, bool)> {
    let mask = (1u64 << width) - 1;
    let alt_a = 0x5555_5555_5555_5555 & mask;
    let alt_b = 0xaaaa_aaaa_aaaa_aaaa & mask;
    let mut base = vec![
        (0, 0),
        (mask, 0),
        (0, mask),
        (mask, mask),
        (mask, 1),
        (1, mask),
        (alt_a, alt_b),
        (alt_b, alt_a),
        (alt_a, alt_a),
        (alt_b, alt_b),
        (mask >> 1, 1),
        (1 << (width - 1), 1 << (width - 1)),
    ];
    for i in 0..width {
        base.push((1 << i, 1 << i));
        base.push((mask, 1 << i));
        base.push((mask ^ (1 << i), 1 << i));
    }
    base.into_iter()
        .flat_map(|(a, b)| [(a, b, false), (a, b, true)])
        .collect()
}

/// Compares an adder-shaped network against `(a + b + cin) mod 2^w` and the
/// carry out, listing every disagreeing vector.
pub fn check_equivalence(
    net: &LogicNetwork,
    width: usize,
) -> Result<EquivalenceReport, NetworkError> {
    let ports = AdderPorts::resolve(net, width)?;
    let mask = ports.mask();
    let exhaustive = width <= EXHAUSTIVE_LIMIT;
    let vectors: Vec<(u64, u64, bool)> = if exhaustive {
        let n = 1u64 << (2 * width + 1);
        (0..n)
            .map(|v| (v & mask, (v >> width) & mask, (v >> (2 * width)) & 1 == 1))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(RANDOM_SEED);
        let mut v = corner_vectors(width);
        v.extend((0..RANDOM_VECTORS).map(|_| {
            (
                rng.random::<u64>() & mask,
                rng.random::<u64>() & mask,
                rng.random::<bool>(),
            )
        }));
        v
    };

    let mut counterexamples = Vec::new();
    let mut scratch = Vec::new();
    let mut out = vec![0u64; net.outputs().len()];
    for chunk in vectors.chunks(64) {
        let lanes = ports.pack(chunk);
        net.evaluate_lanes_into(&lanes, &mut scratch, &mut out)?;
        for (lane, &(a, b, cin)) in chunk.iter().enumerate() {
            let total = a + b + cin as u64;
            let (expected_sum, expected_carry) = (total & mask, total >> width == 1);
            let (actual_sum, actual_carry) = ports.unpack(&out, lane);
            if (actual_sum, actual_carry) != (expected_sum, expected_carry) {
                counterexamples.push(Counterexample {
                    a,
                    b,
                    carry_in: cin,
                    expected_sum,
                    expected_carry,
                    actual_sum,
                    actual_carry,
                });
            }
        }
    }
    Ok(EquivalenceReport {
        width,
        exhaustive,
        vectors_checked: vectors.len() as u64,
        counterexamples,
    })
}
