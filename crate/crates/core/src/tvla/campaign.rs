use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::report::{aggregate_max, ReportError, SlotReport, TTestReport, DEFAULT_THRESHOLD};
use super::stats::{welch_t, WelfordAccumulator};
use crate::asm::{Op, Program, Reg, MASK_REG};
use crate::leakage::{components, lookahead_groups, Group, LeakState, ModelConfig, MAX_STEPS, N_COMPONENTS};
use crate::machine::{self, ExecError, MachineState};

const SHARDS: usize = 64;

/// How a mask's bytes are drawn for each trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// One random byte repeated over every position.
    Byte,
    /// One random word repeated every four bytes.
    Word,
    /// Independent random byte per position.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskDecl {
    pub name: String,
    pub kind: MaskKind,
}

/// How a secret is combined with its mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ShareOp {
    /// Bytewise XOR.
    #[default]
    Xor,
    /// Little-endian 32-bit words minus the mask words, modulo 2^32.
    Sub,
}

/// Contents written into a data region at the start of each trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fill {
    /// `input[start..end]`, combined with a mask if given.
    Input {
        start: usize,
        end: usize,
        mask: Option<String>,
        op: ShareOp,
    },
    Mask(String),
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionBinding {
    pub region: String,
    /// First byte written; mask bytes are taken from the same position.
    pub offset: usize,
    pub fill: Fill,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegValue {
    /// Address of a data region plus an offset.
    Addr { region: String, offset: u32 },
    Const(u32),
    Random,
    /// First word of a mask.
    MaskWord(String),
    /// Little-endian word `input[start..start + 4]`, optionally masked.
    Input { start: usize, mask: Option<String> },
}

/// Where secret inputs and masks go in the initial machine state. `r7` is
/// always loaded with a fresh random word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InputBinding {
    pub input_len: usize,
    pub masks: Vec<MaskDecl>,
    pub regions: Vec<RegionBinding>,
    pub regs: Vec<(Reg, RegValue)>,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign: {0}")]
    InvalidSpec(String),
    #[error("binding: {0}")]
    Binding(String),
    #[error("trace {trace}: control flow diverged from the first trace; campaigns need constant-flow programs")]
    DivergentControlFlow { trace: usize },
    #[error("trace {trace}: {source}")]
    Exec {
        trace: usize,
        #[source]
        source: ExecError,
    },
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl InputBinding {
    fn mask_len(&self, program: &Program) -> usize {
        let regions = program.data.iter().map(|r| r.bytes.len());
        regions.chain([4]).max().unwrap_or(4)
    }

    pub fn check(&self, program: &Program) -> Result<(), CampaignError> {
        let err = |m: String| Err(CampaignError::Binding(m));
        let known_mask = |m: &Option<String>| m.as_ref().is_none_or(|m| self.masks.iter().any(|d| &d.name == m));
        for rb in &self.regions {
            let Some(region) = program.region(&rb.region) else {
                return err(format!("unknown region `{}`", rb.region));
            };
            if rb.offset >= region.bytes.len() {
                return err(format!("offset {} is outside `{}`", rb.offset, rb.region));
            }
            let room = region.bytes.len() - rb.offset;
            match &rb.fill {
                Fill::Input { start, end, mask, op } => {
                    if start > end || *end > self.input_len || end - start > room {
                        return err(format!("input range {start}..{end} does not fit `{}`", rb.region));
                    }
                    if *op == ShareOp::Sub && (end - start) % 4 != 0 {
                        return err(format!("arithmetic shares of `{}` need whole words", rb.region));
                    }
                    if !known_mask(mask) {
                        return err(format!("unknown mask in `{}`", rb.region));
                    }
                }
                Fill::Mask(m) => {
                    if !known_mask(&Some(m.clone())) {
                        return err(format!("unknown mask `{m}`"));
                    }
                }
                Fill::Random => {}
            }
        }
        for (reg, v) in &self.regs {
            if *reg == MASK_REG {
                return err("r7 is reserved for the fresh mask".into());
            }
            match v {
                RegValue::Addr { region, .. } if program.region(region).is_none() => {
                    return err(format!("unknown region `{region}`"))
                }
                RegValue::MaskWord(m) if !known_mask(&Some(m.clone())) => return err(format!("unknown mask `{m}`")),
                RegValue::Input { start, mask } => {
                    if start + 4 > self.input_len || !known_mask(mask) {
                        return err(format!("bad input word binding for {reg}"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn draw_masks(&self, len: usize, rng: &mut impl RngCore) -> Vec<Vec<u8>> {
        self.masks
            .iter()
            .map(|d| match d.kind {
                MaskKind::Byte => vec![rng.random::<u8>(); len],
                MaskKind::Word => {
                    let w = rng.random::<u32>().to_le_bytes();
                    (0..len).map(|i| w[i % 4]).collect()
                }
                MaskKind::Fresh => {
                    let mut v = vec![0u8; len];
                    rng.fill_bytes(&mut v);
                    v
                }
            })
            .collect()
    }

    fn mask<'a>(&self, masks: &'a [Vec<u8>], name: &str) -> &'a [u8] {
        let i = self.masks.iter().position(|d| d.name == name).expect("checked binding");
        &masks[i]
    }

    /// Initial state for one trace. Every random draw comes from `rng`.
    pub fn materialize(&self, program: &Program, input: &[u8], rng: &mut impl RngCore) -> MachineState {
        self.materialize_with_masks(program, input, rng).0
    }

    /// Like [`InputBinding::materialize`], also returning the drawn masks in
    /// declaration order.
    pub fn materialize_with_masks(
        &self,
        program: &Program,
        input: &[u8],
        rng: &mut impl RngCore,
    ) -> (MachineState, Vec<Vec<u8>>) {
        let mut state = MachineState::for_program(program);
        let masks = self.draw_masks(self.mask_len(program), rng);
        for rb in &self.regions {
            let region = state.mem.region_mut(&rb.region).expect("checked binding");
            let off = rb.offset;
            let dst = &mut region.bytes[off..];
            match &rb.fill {
                Fill::Input { start, end, mask, op } => {
                    let secret = &input[*start..*end];
                    let n = secret.len();
                    let zeros = vec![0u8; n];
                    let m = mask.as_ref().map_or(&zeros[..], |m| &self.mask(&masks, m)[off..off + n]);
                    match op {
                        ShareOp::Xor => {
                            for (i, (b, k)) in secret.iter().zip(m).enumerate() {
                                dst[i] = b ^ k;
                            }
                        }
                        ShareOp::Sub => {
                            for (i, (x, k)) in secret.chunks(4).zip(m.chunks(4)).enumerate() {
                                let w = word(x).wrapping_sub(word(k));
                                dst[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
                            }
                        }
                    }
                }
                Fill::Mask(m) => {
                    let m = self.mask(&masks, m);
                    let n = dst.len();
                    dst.copy_from_slice(&m[off..off + n]);
                }
                Fill::Random => rng.fill_bytes(dst),
            }
        }
        for (reg, v) in &self.regs {
            state.regs[reg.index()] = match v {
                RegValue::Addr { region, offset } => program.region(region).expect("checked binding").base + offset,
                RegValue::Const(c) => *c,
                RegValue::Random => rng.random(),
                RegValue::MaskWord(m) => {
                    let m = self.mask(&masks, m);
                    u32::from_le_bytes([m[0], m[1], m[2], m[3]])
                }
                RegValue::Input { start, mask } => {
                    let mut w = [0u8; 4];
                    w.copy_from_slice(&input[*start..start + 4]);
                    if let Some(m) = mask {
                        let m = self.mask(&masks, m);
                        for (x, y) in w.iter_mut().zip(m) {
                            *x ^= y;
                        }
                    }
                    u32::from_le_bytes(w)
                }
            };
        }
        state.regs[MASK_REG.index()] = rng.random();
        (state, masks)
    }
}

fn word(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes.try_into().expect("four bytes"))
}

#[derive(Debug, Clone)]
pub struct CampaignSpec {
    pub program: Program,
    /// Traces per fixed input, half fixed and half random.
    pub n_traces: usize,
    pub fixed_inputs: Vec<Vec<u8>>,
    pub threshold: f64,
    pub seed: u64,
    pub binding: InputBinding,
}

impl CampaignSpec {
    pub fn new(program: Program, binding: InputBinding, fixed_inputs: Vec<Vec<u8>>) -> Self {
        CampaignSpec {
            program,
            n_traces: 10_000,
            fixed_inputs,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            binding,
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.n_traces < 4 || self.n_traces % 2 != 0 {
            return Err(CampaignError::InvalidSpec("trace count must be even and at least 4".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(CampaignError::InvalidSpec("threshold must be positive".into()));
        }
        if self.fixed_inputs.is_empty() {
            return Err(CampaignError::InvalidSpec("no fixed inputs".into()));
        }
        if let Some(bad) = self.fixed_inputs.iter().find(|i| i.len() != self.binding.input_len) {
            return Err(CampaignError::InvalidSpec(format!(
                "fixed input has {} bytes, binding expects {}",
                bad.len(),
                self.binding.input_len
            )));
        }
        self.binding.check(&self.program)
    }
}

/// Independent generator for one (campaign seed, fixed input, trace) triple.
pub fn trace_rng(seed: u64, input: u64, trace: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&input.to_le_bytes());
    key[16..24].copy_from_slice(&trace.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Class labels: exactly half fixed (`true`), randomly interleaved.
pub fn class_labels(n: usize, seed: u64, input: u64) -> Vec<bool> {
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut trace_rng(seed, input, u64::MAX));
    labels
}

const N_ACC: usize = N_COMPONENTS + 1;

#[derive(Clone)]
struct ClassAcc {
    slots: Vec<[WelfordAccumulator; N_ACC]>,
}

impl ClassAcc {
    fn new(n_slots: usize) -> Self {
        ClassAcc {
            slots: vec![[WelfordAccumulator::new(); N_ACC]; n_slots],
        }
    }

    fn merge(&mut self, other: &ClassAcc) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for k in 0..N_ACC {
                a[k].merge(&b[k]);
            }
        }
    }
}

struct Reference {
    indices: Vec<usize>,
    lookahead: Vec<Option<Group>>,
}

fn run_trace(
    spec: &CampaignSpec,
    model: &ModelConfig,
    reference: &Reference,
    input_no: usize,
    fixed: bool,
    trace: usize,
    out: &mut [[f64; N_ACC]],
) -> Result<(), CampaignError> {
    let mut rng = trace_rng(spec.seed, input_no as u64, trace as u64);
    let random_input: Vec<u8>;
    let input = if fixed {
        &spec.fixed_inputs[input_no][..]
    } else {
        let mut v = vec![0u8; spec.binding.input_len];
        rng.fill_bytes(&mut v);
        random_input = v;
        &random_input[..]
    };
    let init = spec.binding.materialize(&spec.program, input, &mut rng);
    let (_, records) =
        machine::run(&spec.program, init, MAX_STEPS).map_err(|source| CampaignError::Exec { trace, source })?;
    if records.len() != reference.indices.len() || records.iter().zip(&reference.indices).any(|(r, &i)| r.index != i) {
        return Err(CampaignError::DivergentControlFlow { trace });
    }
    let mut lstate = LeakState::default();
    for (rec, row) in records.iter().zip(out.iter_mut()) {
        let op = &spec.program.text[rec.index].op;
        let raw = components(rec, op, &mut lstate, reference.lookahead[rec.index]);
        let coef = model.coefficients(Group::of(op));
        let mut total = 0.0;
        for k in 0..N_COMPONENTS {
            total += coef[k] * raw.0[k];
            row[k] = raw.0[k];
        }
        row[N_COMPONENTS] = total + model.noise(&mut rng);
    }
    Ok(())
}

/// Fixed-vs-random campaign for a single fixed input.
pub fn run_single(spec: &CampaignSpec, model: &ModelConfig, input_no: usize) -> Result<TTestReport, CampaignError> {
    spec.validate()?;
    let program = &spec.program;
    let lookahead = lookahead_groups(program);

    // reference control flow from a fixed-class trace
    let mut rng = trace_rng(spec.seed, input_no as u64, u64::MAX - 1);
    let init = spec.binding.materialize(program, &spec.fixed_inputs[input_no], &mut rng);
    let (_, records) = machine::run(program, init, MAX_STEPS).map_err(|source| CampaignError::Exec { trace: 0, source })?;
    let reference = Reference {
        indices: records.iter().map(|r| r.index).collect(),
        lookahead,
    };
    let n_slots = reference.indices.len();
    let labels = class_labels(spec.n_traces, spec.seed, input_no as u64);
    let shard_len = spec.n_traces.div_ceil(SHARDS);

    let shards: Vec<Result<(ClassAcc, ClassAcc), CampaignError>> = (0..SHARDS)
        .into_par_iter()
        .map(|shard| {
            let mut fixed = ClassAcc::new(n_slots);
            let mut random = ClassAcc::new(n_slots);
            let mut row = vec![[0.0; N_ACC]; n_slots];
            let start = (shard * shard_len).min(spec.n_traces);
            let end = (start + shard_len).min(spec.n_traces);
            for trace in start..end {
                let is_fixed = labels[trace];
                run_trace(spec, model, &reference, input_no, is_fixed, trace, &mut row)?;
                let acc = if is_fixed { &mut fixed } else { &mut random };
                for (a, vals) in acc.slots.iter_mut().zip(&row) {
                    for k in 0..N_ACC {
                        a[k].update(vals[k]);
                    }
                }
            }
            Ok((fixed, random))
        })
        .collect();

    let mut fixed = ClassAcc::new(n_slots);
    let mut random = ClassAcc::new(n_slots);
    for shard in shards {
        let (f, r) = shard?;
        fixed.merge(&f);
        random.merge(&r);
    }

    let slots = (0..n_slots)
        .map(|slot| {
            let index = reference.indices[slot];
            let instr = &program.text[index];
            let coef = model.coefficients(Group::of(&instr.op));
            let (fa, ra) = (&fixed.slots[slot], &random.slots[slot]);
            let total = welch_t(&fa[N_COMPONENTS], &ra[N_COMPONENTS]);
            let mut degenerate = total.degenerate;
            let mut t_components = [0.0; N_COMPONENTS];
            for k in 0..N_COMPONENTS {
                if coef[k] != 0.0 {
                    let t = welch_t(&fa[k], &ra[k]);
                    degenerate |= t.degenerate;
                    t_components[k] = t.t;
                }
            }
            let mut s = SlotReport {
                slot,
                index,
                mnemonic: instr.mnemonic().name().to_string(),
                source_line: instr.source_line,
                t_total: total.t,
                t_components,
                degenerate,
                n_fixed: fa[N_COMPONENTS].n,
                n_random: ra[N_COMPONENTS].n,
                cause: super::Cause::None,
                causes: vec![],
            };
            s.classify(&instr.op, spec.threshold);
            s
        })
        .collect();
    Ok(TTestReport {
        threshold: spec.threshold,
        slots,
    })
}

/// Runs one campaign per fixed input and aggregates by maximal |t|.
pub fn run_campaign(spec: &CampaignSpec, model: &ModelConfig) -> Result<TTestReport, CampaignError> {
    spec.validate()?;
    let reports = (0..spec.fixed_inputs.len())
        .into_par_iter()
        .map(|k| run_single(spec, model, k))
        .collect::<Result<Vec<_>, _>>()?;
    let ops: Vec<Op> = spec.program.text.iter().map(|i| i.op.clone()).collect();
    Ok(aggregate_max(&reports, &ops)?)
}

/// `count` fixed inputs drawn from `seed`.
pub fn random_inputs(len: usize, count: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v = vec![0u8; len];
            rng.fill_bytes(&mut v);
            v
        })
        .collect()
}
