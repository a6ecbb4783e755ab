use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::asm::{Op, Program, Reg, MASK_REG, SP};
use crate::leakage::MAX_STEPS;
use crate::machine::{run, MachineState, STACK_BASE, STACK_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EquivError {
    #[error("state {state}: {detail}")]
    Diverged { state: usize, detail: String },
    #[error("the original program failed on every sampled state")]
    NoValidStates,
}

/// Random registers, random data regions, and load/store base registers
/// pointing at word-aligned addresses with room for the largest offset.
pub fn default_state(program: &Program, rng: &mut impl RngCore) -> MachineState {
    let mut state = MachineState::for_program(program);
    for region in state.mem.regions_mut() {
        if region.name != "stack" {
            rng.fill_bytes(&mut region.bytes);
        }
    }
    for r in 0..13 {
        state.regs[r] = rng.random();
    }
    let bases: BTreeSet<Reg> = program
        .text
        .iter()
        .filter_map(|i| match i.op {
            Op::Load { base, .. } | Op::Store { base, .. } => Some(base),
            _ => None,
        })
        .collect();
    let (lo, len) = program
        .data
        .iter()
        .map(|r| (r.base, r.bytes.len() as u32))
        .max_by_key(|r| r.1)
        .unwrap_or((STACK_BASE, STACK_SIZE / 2));
    let extent = program
        .text
        .iter()
        .filter_map(|i| match i.op {
            Op::Load { width, offset, .. } | Op::Store { width, offset, .. } => Some(offset + width.bytes()),
            _ => None,
        })
        .max()
        .unwrap_or(4);
    let positions = len.saturating_sub(extent) / 4 + 1;
    for b in bases {
        state.regs[b.index()] = lo + 4 * rng.random_range(0..positions);
    }
    state.regs[SP.index()] = state.stack_top;
    state
}

fn compare(a: &MachineState, b: &MachineState, with_flags: bool) -> Option<String> {
    for r in 0..16 {
        if r == MASK_REG.index() || r == 15 {
            continue;
        }
        if a.regs[r] != b.regs[r] {
            return Some(format!("{} differs: {:#010x} vs {:#010x}", Reg::r(r as u8), a.regs[r], b.regs[r]));
        }
    }
    if with_flags && a.flags != b.flags {
        return Some(format!("flags differ: {:?} vs {:?}", a.flags, b.flags));
    }
    for ra in a.mem.regions() {
        if ra.name == "stack" {
            continue;
        }
        let rb = b.mem.region(&ra.name)?;
        if let Some(k) = ra.bytes.iter().zip(&rb.bytes).position(|(x, y)| x != y) {
            return Some(format!(
                "{}+{k:#x} differs: {:#04x} vs {:#04x}",
                ra.name, ra.bytes[k], rb.bytes[k]
            ));
        }
    }
    None
}

/// Runs both programs from `n_states` sampled states and compares the final
/// architectural state, ignoring `r7`, the stack region, and flags when the
/// rewrite inserted flag-setting code. States on which the original faults
/// must also fault in the rewrite and are otherwise skipped.
pub fn semantic_equiv_check_with(
    original: &Program,
    rewritten: &Program,
    n_states: usize,
    seed: u64,
    mut sample: impl FnMut(&mut ChaCha12Rng) -> MachineState,
) -> Result<usize, EquivError> {
    let with_flags = !rewritten.text.iter().any(|i| i.is_inserted() && i.op.sets_flags());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut checked = 0;
    for state in 0..n_states {
        let init = sample(&mut rng);
        let a = run(original, init.clone(), MAX_STEPS);
        let b = run(rewritten, init, MAX_STEPS);
        match (a, b) {
            (Ok((sa, _)), Ok((sb, _))) => {
                if let Some(detail) = compare(&sa, &sb, with_flags) {
                    return Err(EquivError::Diverged { state, detail });
                }
                checked += 1;
            }
            (Err(_), Err(_)) => {}
            (Ok(_), Err(e)) => {
                return Err(EquivError::Diverged {
                    state,
                    detail: format!("rewrite faults: {e}"),
                })
            }
            (Err(e), Ok(_)) => {
                return Err(EquivError::Diverged {
                    state,
                    detail: format!("only the original faults: {e}"),
                })
            }
        }
    }
    if checked == 0 {
        return Err(EquivError::NoValidStates);
    }
    Ok(checked)
}

pub fn semantic_equiv_check(original: &Program, rewritten: &Program, n_states: usize, seed: u64) -> Result<usize, EquivError> {
    semantic_equiv_check_with(original, rewritten, n_states, seed, |rng| default_state(original, rng))
}
