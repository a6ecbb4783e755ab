//! Instruction-level power model: a weighted sum of 25 components computed
//! from architectural values and a small amount of hidden state (operand
//! history, memory bus word, store latch).

mod config;

use std::fmt;
use std::io::{self, Write};
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::asm::{Instruction, Mnemonic, Op, Program, Reg, ShiftOp, Width};
use crate::machine::{self, ExecError, ExecRecord, MachineState};

pub use config::{ConfigError, ModelConfig};

pub const N_COMPONENTS: usize = 25;
pub const MAX_STEPS: usize = 1 << 20;

pub fn hw(x: u32) -> u32 {
    x.count_ones()
}

pub fn hd(x: u32, y: u32) -> u32 {
    hw(x ^ y)
}

/// Instruction groups, each with its own coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Alu,
    Shift,
    Mul,
    Load,
    Store,
    /// Branches, `nop` and `cmp rn, #imm`: never weighted.
    Neutral,
}

impl Group {
    pub const MODELED: [Group; 5] = [Group::Alu, Group::Shift, Group::Mul, Group::Load, Group::Store];

    pub fn of(op: &Op) -> Group {
        use crate::asm::AluOp::*;
        match op {
            Op::Alu { op, .. } => match op {
                Lsls | Lsrs | Rors => Group::Shift,
                Muls => Group::Mul,
                _ => Group::Alu,
            },
            Op::MovImm { .. } | Op::AddImm { .. } | Op::SubImm { .. } => Group::Alu,
            Op::ShiftImm { .. } => Group::Shift,
            Op::Load { .. } | Op::Pop(_) => Group::Load,
            Op::Store { .. } | Op::Push(_) => Group::Store,
            Op::CmpImm { .. } | Op::Branch { .. } | Op::Nop => Group::Neutral,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Alu => "alu",
            Group::Shift => "shift",
            Group::Mul => "mul",
            Group::Load => "load",
            Group::Store => "store",
            Group::Neutral => "neutral",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::MODELED.into_iter().find(|g| g.name() == s)
    }

    /// Position among the five modeled groups.
    pub fn slot(self) -> Option<usize> {
        Group::MODELED.iter().position(|&g| g == self)
    }

    /// Groups whose second operand feeds the ALU datapath.
    pub fn is_datapath(self) -> bool {
        matches!(self, Group::Alu | Group::Shift | Group::Mul)
    }
}

/// Index of one scalar in a [`ComponentVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Component(usize);

impl Component {
    pub const W_OP1: Component = Component(0);
    pub const W_OP2: Component = Component(1);
    pub const T_OP1: Component = Component(2);
    pub const T_OP2: Component = Component(3);
    pub const X_OPS: Component = Component(4);
    pub const A_OPS: Component = Component(5);
    pub const T_DEST: Component = Component(6);
    pub const T_BUS: Component = Component(7);
    pub const T_MEMCELL: Component = Component(8);
    pub const T_LATCH: Component = Component(9);
    pub const B_ADJ: Component = Component(10);
    pub const W_RESULT: Component = Component(21);

    pub fn g_prev(group: Group) -> Option<Component> {
        group.slot().map(|s| Component(11 + s))
    }

    pub fn g_next(group: Group) -> Option<Component> {
        group.slot().map(|s| Component(16 + s))
    }

    pub fn all() -> impl Iterator<Item = Component> {
        (0..N_COMPONENTS).map(Component)
    }

    pub fn from_index(i: usize) -> Option<Component> {
        (i < N_COMPONENTS).then_some(Component(i))
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_reserved(self) -> bool {
        self.0 >= 22
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; N_COMPONENTS] = [
            "W_op1",
            "W_op2",
            "T_op1",
            "T_op2",
            "X_ops",
            "A_ops",
            "T_dest",
            "T_bus",
            "T_memcell",
            "T_latch",
            "B_adj",
            "G_prev_alu",
            "G_prev_shift",
            "G_prev_mul",
            "G_prev_load",
            "G_prev_store",
            "G_next_alu",
            "G_next_shift",
            "G_next_mul",
            "G_next_load",
            "G_next_store",
            "W_result",
            "reserved_0",
            "reserved_1",
            "reserved_2",
        ];
        NAMES[self.0]
    }

    pub fn from_name(s: &str) -> Option<Component> {
        Component::all().find(|c| c.name() == s)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentVector(pub [f64; N_COMPONENTS]);

impl Index<Component> for ComponentVector {
    type Output = f64;
    fn index(&self, c: Component) -> &f64 {
        &self.0[c.0]
    }
}

impl IndexMut<Component> for ComponentVector {
    fn index_mut(&mut self, c: Component) -> &mut f64 {
        &mut self.0[c.0]
    }
}

/// Hidden state carried from one instruction to the next.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakState {
    pub prev_op1: u32,
    pub prev_op2: u32,
    pub bus_word: u32,
    pub store_latch_ref: Option<Reg>,
    pub store_latch_pending: Option<Reg>,
    pub prev_group: Option<Group>,
    /// Register file before the previous instruction; the latch multiplexer
    /// reads register contents one instruction late.
    pub prev_regs_before: Option<[u32; 16]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSample {
    pub slot: usize,
    pub total: f64,
    pub components: ComponentVector,
    pub weighted: ComponentVector,
}

/// Bytes of the transferred data, as seen on the bus lanes.
fn byte_adjacency(width: Width, data: u32) -> u32 {
    let b = machine::word_bytes(data);
    let n = width.bytes() as usize;
    (0..n.saturating_sub(1))
        .map(|i| hd(b[i] as u32, b[i + 1] as u32))
        .sum()
}

/// Register whose value the store latch captures.
fn latch_source(op: &Op) -> Option<Reg> {
    match op {
        Op::Store { rs, .. } => Some(*rs),
        Op::Push(r) | Op::Pop(r) => Some(*r),
        _ => None,
    }
}

/// Raw component values for one executed instruction; advances `lstate`.
pub fn components(
    exec: &ExecRecord,
    op: &Op,
    lstate: &mut LeakState,
    next_group: Option<Group>,
) -> ComponentVector {
    let mut v = ComponentVector::default();
    let group = Group::of(op);
    let (op1, op2) = (exec.op1, exec.op2);

    v[Component::W_OP1] = hw(op1) as f64;
    v[Component::W_OP2] = hw(op2) as f64;
    v[Component::T_OP1] = hd(op1, lstate.prev_op1) as f64;
    v[Component::T_OP2] = hd(op2, lstate.prev_op2) as f64;
    v[Component::X_OPS] = hw(op1 ^ op2) as f64;
    v[Component::A_OPS] = hw(op1 & op2) as f64;
    if let (Some(old), Some(new)) = (exec.dest_old, exec.result) {
        v[Component::T_DEST] = hd(new, old) as f64;
    }
    let result = exec.result.or(exec.mem.filter(|m| m.is_store).map(|m| m.data));
    v[Component::W_RESULT] = result.map_or(0.0, |r| hw(r) as f64);

    if let Some(m) = &exec.mem {
        v[Component::T_BUS] = hd(lstate.bus_word, m.new_word) as f64;
        if m.is_store {
            v[Component::T_MEMCELL] = hd(m.new_word, m.old_word) as f64;
        }
        v[Component::B_ADJ] = byte_adjacency(m.width, m.data) as f64;
        lstate.bus_word = m.new_word;
    }

    if group.is_datapath() {
        if let Some(r) = lstate.store_latch_ref {
            let regs = lstate.prev_regs_before.as_ref().unwrap_or(&exec.regs_before);
            v[Component::T_LATCH] = hd(regs[r.index()], op2) as f64;
        }
    }

    if let Some(c) = lstate.prev_group.and_then(Component::g_prev) {
        v[c] = 1.0;
    }
    if let Some(c) = next_group.and_then(Component::g_next) {
        v[c] = 1.0;
    }

    if let Some(p) = lstate.store_latch_pending.take() {
        lstate.store_latch_ref = Some(p);
    }
    if let Some(r) = latch_source(op) {
        lstate.store_latch_pending = Some(r);
    }
    lstate.prev_op1 = op1;
    lstate.prev_op2 = op2;
    lstate.prev_group = Some(group);
    lstate.prev_regs_before = Some(exec.regs_before);
    v
}

/// Computes one power sample and advances the leakage state.
pub fn leak_step<R: Rng + ?Sized>(
    exec: &ExecRecord,
    instr: &Instruction,
    lstate: &mut LeakState,
    next_instr: Option<&Instruction>,
    config: &ModelConfig,
    rng: &mut R,
) -> PowerSample {
    let raw = components(exec, &instr.op, lstate, next_instr.map(|i| Group::of(&i.op)));
    weigh(exec.slot, raw, Group::of(&instr.op), config, rng)
}

fn weigh<R: Rng + ?Sized>(
    slot: usize,
    raw: ComponentVector,
    group: Group,
    config: &ModelConfig,
    rng: &mut R,
) -> PowerSample {
    let coef = config.coefficients(group);
    let mut weighted = ComponentVector::default();
    let mut total = 0.0;
    for i in 0..N_COMPONENTS {
        weighted.0[i] = coef[i] * raw.0[i];
        total += weighted.0[i];
    }
    total += config.noise(rng);
    PowerSample {
        slot,
        total,
        components: raw,
        weighted,
    }
}

/// Per-instruction lookahead group: the next instruction in the same basic
/// block, or none at a block boundary.
pub fn lookahead_groups(program: &Program) -> Vec<Option<Group>> {
    let mut leaders = vec![false; program.len() + 1];
    for &idx in program.labels.values() {
        leaders[idx] = true;
    }
    (0..program.len())
        .map(|i| {
            let ends_block = matches!(program.text[i].op, Op::Branch { .. });
            if ends_block || i + 1 >= program.len() || leaders[i + 1] {
                None
            } else {
                Some(Group::of(&program.text[i + 1].op))
            }
        })
        .collect()
}

/// Replays an execution trace through the model, producing raw component
/// vectors only. Used by campaigns, which test raw values.
pub fn trace_components(program: &Program, records: &[ExecRecord], lookahead: &[Option<Group>]) -> Vec<ComponentVector> {
    let mut lstate = LeakState::default();
    records
        .iter()
        .map(|r| components(r, &program.text[r.index].op, &mut lstate, lookahead[r.index]))
        .collect()
}

/// Runs `program` and returns one sample per executed instruction.
pub fn emulate_power(
    program: &Program,
    init: MachineState,
    config: &ModelConfig,
    seed: u64,
) -> Result<Vec<PowerSample>, ExecError> {
    emulate_with_records(program, init, config, seed).map(|(_, s)| s)
}

/// Like [`emulate_power`], also returning the execution records.
pub fn emulate_with_records(
    program: &Program,
    init: MachineState,
    config: &ModelConfig,
    seed: u64,
) -> Result<(Vec<ExecRecord>, Vec<PowerSample>), ExecError> {
    let (_, records) = machine::run(program, init, MAX_STEPS)?;
    let lookahead = lookahead_groups(program);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut lstate = LeakState::default();
    let samples = records
        .iter()
        .map(|r| {
            let op = &program.text[r.index].op;
            let raw = components(r, op, &mut lstate, lookahead[r.index]);
            weigh(r.slot, raw, Group::of(op), config, &mut rng)
        })
        .collect();
    Ok((records, samples))
}

/// Mnemonic of the instruction that produced each record, for reports.
pub fn mnemonic_of(program: &Program, rec: &ExecRecord) -> Mnemonic {
    program.text[rec.index].op.mnemonic()
}

pub fn is_rotation(op: &Op) -> bool {
    use crate::asm::AluOp::*;
    matches!(
        op,
        Op::Alu {
            op: Rors | Lsls | Lsrs,
            ..
        } | Op::ShiftImm {
            op: ShiftOp::Lsls | ShiftOp::Lsrs,
            ..
        }
    )
}

/// Writes samples as CSV: slot, mnemonic, total, then every raw component.
pub fn write_trace_csv(
    out: &mut impl Write,
    program: &Program,
    records: &[ExecRecord],
    samples: &[PowerSample],
) -> io::Result<()> {
    write!(out, "slot,mnemonic,total")?;
    for c in Component::all() {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    for (rec, s) in records.iter().zip(samples) {
        write!(out, "{},{},{}", s.slot, mnemonic_of(program, rec).name(), s.total)?;
        for x in s.components.0 {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
