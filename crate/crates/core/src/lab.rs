//! Instruction-pair probe batteries: which instructions interact through
//! hidden storage, and which one dominates.

use std::fmt::{self, Write as _};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::asm::{parse, Op, ParseError, Program, Reg, Width, SP};
use crate::leakage::{components, hd, lookahead_groups, trace_components, Component, Group, LeakState, ModelConfig, MAX_STEPS};
use crate::machine::{self, ExecError, ExecRecord, MachineState, STACK_BASE, STACK_SIZE};

/// Instructions covered by the pair matrix, in row/column order.
pub const UNIVERSE: [&str; 20] = [
    "eors", "adds", "ands", "bics", "cmps", "movs", "orrs", "subs", "lsls", "rors", "lsrs", "muls", "str", "strb",
    "strh", "ldr", "ldrb", "ldrh", "pop", "push",
];

pub const DEFAULT_SPACERS: usize = 9;
pub const DOMINANCE_SPACERS: usize = 3;
pub const DEFAULT_RUNS: usize = 10_000;
pub const DECISION_THRESHOLD: f64 = 0.1;

const CELL_A: u32 = STACK_BASE + 0x100;
const CELL_B: u32 = STACK_BASE + 0x300;
const CELL_SHARED: u32 = STACK_BASE + 0x200;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("`{0}` is not in the probe universe")]
    UnknownInstruction(String),
    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,
    #[error("series lengths differ or are shorter than two")]
    LengthMismatch,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSpec {
    pub first: &'static str,
    pub second: &'static str,
    pub spacer_count: usize,
    pub probed_operand: Operand,
    pub n_runs: usize,
}

impl ProbeSpec {
    pub fn new(first: &str, second: &str) -> Result<Self, LabError> {
        Ok(ProbeSpec {
            first: lookup(first)?,
            second: lookup(second)?,
            spacer_count: DEFAULT_SPACERS,
            probed_operand: Operand::Second,
            n_runs: DEFAULT_RUNS,
        })
    }

    pub fn spacers(mut self, n: usize) -> Self {
        self.spacer_count = n;
        self
    }

    pub fn runs(mut self, n: usize) -> Self {
        self.n_runs = n;
        self
    }
}

fn lookup(name: &str) -> Result<&'static str, LabError> {
    let name = if name == "mov" { "movs" } else { name };
    UNIVERSE
        .iter()
        .find(|n| **n == name)
        .copied()
        .ok_or_else(|| LabError::UnknownInstruction(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dominance {
    First,
    Second,
    SameStorage,
    None,
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dominance::First => "first",
            Dominance::Second => "second",
            Dominance::SameStorage => "same-storage",
            Dominance::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionVerdict {
    pub first: &'static str,
    pub second: &'static str,
    pub correlated: bool,
    pub peak_abs_r: f64,
    pub peak_slot: usize,
    pub dominance: Dominance,
}

/// Text of one probe instruction. `value` carries the probed data, `other`
/// is the base register or first ALU operand.
fn instr_text(name: &str, value: u8, other: u8) -> String {
    match name {
        "str" | "strb" | "strh" | "ldr" | "ldrb" | "ldrh" => format!("{name} r{value}, [r{other}]"),
        "push" | "pop" => format!("{name} {{r{value}}}"),
        _ => format!("{name} r{other}, r{value}"),
    }
}

fn is_memory(name: &str) -> bool {
    matches!(name, "str" | "strb" | "strh" | "ldr" | "ldrb" | "ldrh")
}

const SPACER: &str = "movs r7, r7";

/// Register roles: (value, other) for each probe position.
const ROLES: [(u8, u8); 3] = [(1, 2), (4, 3), (5, 6)];

fn assemble(lines: &[String]) -> Result<Program, LabError> {
    let mut src = String::from(".uses_mask_register\n");
    for l in lines {
        src.push_str(l);
        src.push('\n');
    }
    Ok(parse(&src)?)
}

/// `first`, `spacer_count` spacers, `second`.
pub fn gen_probe(spec: &ProbeSpec) -> Result<Program, LabError> {
    let mut lines = vec![instr_text(spec.first, ROLES[0].0, ROLES[0].1)];
    lines.extend((0..spec.spacer_count).map(|_| SPACER.to_string()));
    lines.push(instr_text(spec.second, ROLES[1].0, ROLES[1].1));
    assemble(&lines)
}

/// `a`, spacers, `b`, spacers, `a` again with fresh registers.
pub fn gen_dominance_probe(a: &str, b: &str, spacers: usize) -> Result<Program, LabError> {
    let mut lines = vec![instr_text(a, ROLES[0].0, ROLES[0].1)];
    lines.extend((0..spacers).map(|_| SPACER.to_string()));
    lines.push(instr_text(b, ROLES[1].0, ROLES[1].1));
    lines.extend((0..spacers).map(|_| SPACER.to_string()));
    lines.push(instr_text(a, ROLES[2].0, ROLES[2].1));
    assemble(&lines)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, LabError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(LabError::LengthMismatch);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(LabError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between raw component `c` at the last execution of
/// instruction `index` and the Hamming distance between the initial values
/// of each register pair, over `n_runs` states drawn by `sample`. A constant
/// component correlates with nothing and yields 0.
pub fn component_register_correlation(
    program: &Program,
    index: usize,
    c: Component,
    pairs: &[(Reg, Reg)],
    n_runs: usize,
    seed: u64,
    mut sample: impl FnMut(&mut ChaCha12Rng) -> MachineState,
) -> Result<Vec<f64>, LabError> {
    let lookahead = lookahead_groups(program);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut comp = Vec::with_capacity(n_runs);
    let mut dists = vec![Vec::with_capacity(n_runs); pairs.len()];
    for _ in 0..n_runs {
        let init = sample(&mut rng);
        for (d, (a, b)) in dists.iter_mut().zip(pairs) {
            d.push(hd(init.regs[a.index()], init.regs[b.index()]) as f64);
        }
        let (_, records) = machine::run(program, init, MAX_STEPS)?;
        let vectors = trace_components(program, &records, &lookahead);
        let slot = records.iter().rposition(|r| r.index == index).ok_or(LabError::LengthMismatch)?;
        comp.push(vectors[slot][c]);
    }
    dists
        .iter()
        .map(|d| match pearson(&comp, d) {
            Err(LabError::UndefinedCorrelation) => Ok(0.0),
            r => r,
        })
        .collect()
}

/// Values an executed instruction exposes to hidden storage, each with the
/// bits it actually carries: the register-side value and, for memory
/// accesses, the aligned word moved over the bus.
fn designated(rec: &ExecRecord, op: &Op, operand: Operand) -> [(u32, u32); 2] {
    if operand == Operand::First && !op.is_memory() {
        return [(rec.op1, u32::MAX); 2];
    }
    let bus = rec.mem.map(|m| if m.is_store { m.new_word } else { m.old_word });
    match op {
        Op::Load { width, .. } => [(rec.mem.map_or(0, |m| m.data), width_mask(*width)), (bus.unwrap_or(0), u32::MAX)],
        Op::Store { rs, .. } => [(rec.regs_before[rs.index()], u32::MAX), (bus.unwrap_or(0), u32::MAX)],
        Op::Pop(_) => [(rec.mem.map_or(0, |m| m.data), u32::MAX); 2],
        _ => [(rec.op2, u32::MAX); 2],
    }
}

/// Bits a narrow access selects from the word; full word otherwise.
fn access_mask(name: &str) -> u32 {
    match name {
        "strb" | "ldrb" => 0xff,
        "strh" | "ldrh" => 0xffff,
        _ => u32::MAX,
    }
}

fn width_mask(width: Width) -> u32 {
    match width {
        Width::Byte => 0xff,
        Width::Half => 0xffff,
        Width::Word => u32::MAX,
    }
}

/// Randomized initial state: data registers, the mask register and the
/// whole stack region are fresh; base registers point at their cells.
fn probe_state(program: &Program, bases: [u32; 3], sp: u32, rng: &mut impl RngCore) -> MachineState {
    let mut s = MachineState::for_program(program);
    for r in 0..8 {
        s.regs[r] = rng.random();
    }
    rng.fill_bytes(&mut s.mem.region_mut("stack").expect("stack region").bytes);
    for ins in &program.text {
        if let Op::Load { base, .. } | Op::Store { base, .. } = ins.op {
            if let Some(k) = ROLES.iter().position(|r| r.1 as usize == base.index()) {
                s.regs[base.index()] = bases[k];
            }
        }
    }
    s.regs[SP.index()] = sp;
    s
}

struct Runs {
    /// Per slot power samples, one series per slot.
    totals: Vec<Vec<f64>>,
    /// Candidate values of the two probed instructions, per run.
    values: [Vec<[(u32, u32); 2]>; 2],
}

impl Runs {
    /// HD series for every pairing of candidate values, over the bits both
    /// values carry.
    fn pair_hds(&self, extra: u32) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let series: Vec<f64> = self.values[0]
                    .iter()
                    .zip(&self.values[1])
                    .map(|(a, b)| {
                        let ((x, mx), (y, my)) = (a[i], b[j]);
                        let m = mx & my & extra;
                        hd(x & m, y & m) as f64
                    })
                    .collect();
                if !out.contains(&series) {
                    out.push(series);
                }
            }
        }
        out
    }
}

/// Largest |r| between `series` and any candidate HD series.
fn best_correlation(series: &[f64], hds: &[Vec<f64>]) -> f64 {
    hds.iter()
        .filter_map(|h| pearson(series, h).ok())
        .map(f64::abs)
        .fold(0.0, f64::max)
}

fn simulate(
    program: &Program,
    probed: [usize; 2],
    operand: Operand,
    bases: [u32; 3],
    sp: u32,
    model: &ModelConfig,
    n_runs: usize,
    seed: u64,
) -> Result<Runs, LabError> {
    let lookahead = lookahead_groups(program);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut totals = vec![Vec::with_capacity(n_runs); program.len()];
    let mut values = [Vec::with_capacity(n_runs), Vec::with_capacity(n_runs)];
    for _ in 0..n_runs {
        let init = probe_state(program, bases, sp, &mut rng);
        let (_, records) = machine::run(program, init, MAX_STEPS)?;
        let mut ls = LeakState::default();
        for rec in &records {
            let op = &program.text[rec.index].op;
            let raw = components(rec, op, &mut ls, lookahead[rec.index]);
            let coef = model.coefficients(Group::of(op));
            let total: f64 = coef.iter().zip(raw.0).map(|(c, x)| c * x).sum::<f64>() + model.noise(&mut rng);
            totals[rec.slot].push(total);
        }
        for (k, &p) in probed.iter().enumerate() {
            values[k].push(designated(&records[p], &program.text[p].op, operand));
        }
    }
    Ok(Runs { totals, values })
}

fn stack_pointer(names: &[&str], cell: u32) -> u32 {
    match names.iter().find(|n| matches!(**n, "push" | "pop")) {
        Some(&"push") => cell + 4,
        Some(_) => cell,
        None => cell,
    }
}

/// Correlates every slot's sample with HD of the two designated values.
pub fn probe_interaction(spec: &ProbeSpec, model: &ModelConfig, seed: u64) -> Result<InteractionVerdict, LabError> {
    let program = gen_probe(spec)?;
    let last = program.len() - 1;
    let sp = STACK_BASE + STACK_SIZE / 2;
    let runs = simulate(
        &program,
        [0, last],
        spec.probed_operand,
        [CELL_A, CELL_B, CELL_SHARED],
        sp,
        model,
        spec.n_runs,
        seed,
    )?;
    let hds = runs.pair_hds(u32::MAX);
    let mut peak = (0.0f64, last);
    for (slot, series) in runs.totals.iter().enumerate() {
        let r = best_correlation(series, &hds);
        if r > peak.0 {
            peak = (r, slot);
        }
    }
    Ok(InteractionVerdict {
        first: spec.first,
        second: spec.second,
        correlated: peak.0 >= DECISION_THRESHOLD,
        peak_abs_r: peak.0,
        peak_slot: peak.1,
        dominance: Dominance::None,
    })
}

/// |r| at the second instance of `a` against HD of the two instances' values.
pub fn dominance_visibility(a: &str, b: &str, model: &ModelConfig, n_runs: usize, seed: u64) -> Result<f64, LabError> {
    let (a, b) = (lookup(a)?, lookup(b)?);
    let program = gen_dominance_probe(a, b, DOMINANCE_SPACERS)?;
    let last = program.len() - 1;
    let sp = stack_pointer(&[a, b], CELL_SHARED);
    let runs = simulate(
        &program,
        [0, last],
        Operand::Second,
        [CELL_SHARED; 3],
        sp,
        model,
        n_runs,
        seed,
    )?;
    let written = if b.starts_with("str") { access_mask(b) } else { u32::MAX };
    Ok(best_correlation(&runs.totals[last], &runs.pair_hds(access_mask(a) & written)))
}

/// Classifies which of an interacting pair dominates, running both orders.
pub fn probe_dominance(first: &str, second: &str, model: &ModelConfig, n_runs: usize, seed: u64) -> Result<Dominance, LabError> {
    let a = dominance_visibility(first, second, model, n_runs, seed)? >= DECISION_THRESHOLD;
    let b = dominance_visibility(second, first, model, n_runs, seed ^ 0x5bd1_e995)? >= DECISION_THRESHOLD;
    Ok(match (a, b) {
        (true, false) => Dominance::First,
        (false, true) => Dominance::Second,
        (false, false) => Dominance::SameStorage,
        (true, true) => Dominance::None,
    })
}

/// One entry of the pair matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Blank,
    /// The row instruction dominates.
    Row,
    /// The column instruction dominates.
    Column,
    SameStorage,
    /// Interaction without a dominance order.
    Mutual,
}

impl Cell {
    pub fn glyph(self) -> char {
        match self {
            Cell::Blank => '.',
            Cell::Row => '<',
            Cell::Column => '^',
            Cell::SameStorage => 'o',
            Cell::Mutual => 'x',
        }
    }

    pub fn from_glyph(c: char) -> Option<Cell> {
        [Cell::Blank, Cell::Row, Cell::Column, Cell::SameStorage, Cell::Mutual]
            .into_iter()
            .find(|x| x.glyph() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Cell::Blank => "",
            Cell::Row => "row",
            Cell::Column => "column",
            Cell::SameStorage => "same",
            Cell::Mutual => "mutual",
        }
    }

    /// The verdict seen from the transposed cell.
    pub fn mirrored(self) -> Cell {
        match self {
            Cell::Row => Cell::Column,
            Cell::Column => Cell::Row,
            c => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub cells: Vec<Vec<Cell>>,
    /// Peak |r| of the interaction probes, max over both orders and spacings.
    pub peak_r: Vec<Vec<f64>>,
    /// Dominance visibility |r| for (row, column, row) programs.
    pub visibility: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct MatrixOptions {
    pub n_runs: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            n_runs: DEFAULT_RUNS,
            seed: 0,
            threshold: DECISION_THRESHOLD,
        }
    }
}

/// Probes all ordered pairs. A pair interacts when the first instruction's
/// value correlates with the second's, directly adjacent or across the
/// default spacers, in either order.
pub fn build_matrix(model: &ModelConfig, opts: MatrixOptions) -> Result<Matrix, LabError> {
    let n = UNIVERSE.len();
    let pair_seed = |i: usize, j: usize, k: u64| opts.seed ^ ((i * n + j) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k;
    let ordered: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();

    let corr: Vec<f64> = ordered
        .par_iter()
        .map(|&(i, j)| -> Result<f64, LabError> {
            let mut best = 0.0f64;
            for spacers in [0, DEFAULT_SPACERS] {
                let spec = ProbeSpec::new(UNIVERSE[i], UNIVERSE[j])?.spacers(spacers).runs(opts.n_runs);
                let v = probe_interaction(&spec, model, pair_seed(i, j, spacers as u64))?;
                best = best.max(v.peak_abs_r);
            }
            Ok(best)
        })
        .collect::<Result<_, _>>()?;
    let vis: Vec<f64> = ordered
        .par_iter()
        .map(|&(i, j)| dominance_visibility(UNIVERSE[i], UNIVERSE[j], model, opts.n_runs, pair_seed(i, j, 0xd0)))
        .collect::<Result<_, _>>()?;

    let mut peak_r = vec![vec![0.0; n]; n];
    let mut visibility = vec![vec![0.0; n]; n];
    for (k, &(i, j)) in ordered.iter().enumerate() {
        peak_r[i][j] = corr[k].max(corr[j * n + i]);
        visibility[i][j] = vis[k];
    }
    let cells = classify(&peak_r, &visibility, opts.threshold);
    debug_assert!((0..n).all(|i| (0..n).all(|j| cells[i][j] == cells[j][i].mirrored())));
    Ok(Matrix {
        cells,
        peak_r,
        visibility,
    })
}

fn classify(peak_r: &[Vec<f64>], visibility: &[Vec<f64>], threshold: f64) -> Vec<Vec<Cell>> {
    let n = peak_r.len();
    let mut cells = vec![vec![Cell::Blank; n]; n];
    for i in 0..n {
        for j in 0..n {
            if peak_r[i][j] < threshold {
                continue;
            }
            let a = visibility[i][j] >= threshold;
            let b = visibility[j][i] >= threshold;
            cells[i][j] = match (a, b) {
                (true, false) => Cell::Row,
                (false, true) => Cell::Column,
                (false, false) => Cell::SameStorage,
                (true, true) => Cell::Mutual,
            };
        }
    }
    cells
}

impl Matrix {
    /// Verdicts under another decision threshold, from the same measurements.
    pub fn reclassify(&self, threshold: f64) -> Vec<Vec<Cell>> {
        classify(&self.peak_r, &self.visibility, threshold)
    }

    pub fn get(&self, row: &str, col: &str) -> Option<Cell> {
        let i = UNIVERSE.iter().position(|n| *n == row)?;
        let j = UNIVERSE.iter().position(|n| *n == col)?;
        Some(self.cells[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("first");
        for n in UNIVERSE {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            out.push_str(UNIVERSE[i]);
            for c in row {
                out.push(',');
                out.push_str(c.name());
            }
            out.push('\n');
        }
        out
    }

    /// Text grid: `o` same storage, `<` row dominates, `^` column dominates,
    /// `x` mutual, `.` no interaction.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{:<5}", UNIVERSE[i]);
            for c in row {
                out.push(' ');
                out.push(c.glyph());
            }
            out.push('\n');
        }
        out
    }

    /// Parses the grid produced by [`Matrix::to_grid`]; statistics are zeroed.
    pub fn parse_grid(text: &str) -> Option<Vec<Vec<Cell>>> {
        let rows: Vec<Vec<Cell>> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().skip(1).map(|g| g.chars().next().and_then(Cell::from_glyph)).collect::<Option<Vec<_>>>())
            .collect::<Option<_>>()?;
        (rows.len() == UNIVERSE.len() && rows.iter().all(|r| r.len() == UNIVERSE.len())).then_some(rows)
    }

    /// Cells differing from an expected grid, as (row, column, got, expected).
    pub fn mismatches(&self, expected: &[Vec<Cell>]) -> Vec<(&'static str, &'static str, Cell, Cell)> {
        let mut out = Vec::new();
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c != expected[i][j] {
                    out.push((UNIVERSE[i], UNIVERSE[j], c, expected[i][j]));
                }
            }
        }
        out
    }
}

pub fn is_memory_instruction(name: &str) -> bool {
    is_memory(name) || matches!(name, "push" | "pop")
}
