//! Rule-driven rewriting of leaking instructions.
//!
//! Every rule either inserts a short sequence in front of the flagged
//! instruction or replaces it with an equivalent sequence. The inserted code
//! only touches the mask register `r7`, the stack below `sp`, and scratch
//! registers it saves and restores itself.

mod equiv;
mod rules;

pub use equiv::{default_state, semantic_equiv_check, semantic_equiv_check_with, EquivError};
pub use rules::{replaces, template, SPLIT_BYTE, SPLIT_SELECT};

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::asm::{Instruction, Op, Program, Reg, RuleId};
use crate::tvla::{Cause, TTestReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("line {line}: {rule} does not apply to `{instruction}`")]
    PatternMismatch {
        rule: RuleId,
        line: usize,
        instruction: String,
    },
    #[error("line {line}: {rule} would overwrite {reg}, which the instruction reads")]
    SourceClobber { rule: RuleId, line: usize, reg: Reg },
    #[error("line {line}: {reg} collides with the byte-split scratch registers r0/r6/r7; remap {reg} to one of r1-r5")]
    RegisterCollision { line: usize, reg: Reg },
    #[error("line {line}: inserted code would clobber flags read by a later branch")]
    FlagsLive { line: usize },
    #[error("no rule handles cause {cause} at `{instruction}`")]
    NoRule { cause: Cause, instruction: String },
    #[error("instruction index {0} out of range")]
    OutOfRange(usize),
}

pub(crate) fn show(op: &Op) -> String {
    Instruction::new(op.clone(), 0).to_string()
}

/// Most specific rules first.
pub const PRECEDENCE: [RuleId; 7] = [
    RuleId::ByteSplitStore,
    RuleId::StoreShadow,
    RuleId::LoadShadow,
    RuleId::RotationMask,
    RuleId::RegisterWipe,
    RuleId::LatchWipe,
    RuleId::OperandWipe,
];

/// Candidate rules for a cause, in the order they are tried.
pub fn rules_for(cause: Cause, op: &Op) -> Vec<RuleId> {
    match cause {
        Cause::ByteAdjacency => vec![RuleId::ByteSplitStore],
        Cause::MemoryOverwrite => vec![RuleId::StoreShadow],
        Cause::Bus => match op {
            Op::Load { .. } | Op::Pop(_) => vec![RuleId::LoadShadow],
            _ => vec![RuleId::StoreShadow],
        },
        Cause::RotationAlignment => vec![RuleId::RotationMask, RuleId::RegisterWipe],
        Cause::RegisterOverwrite => match op {
            Op::Load { .. } | Op::Pop(_) => vec![RuleId::LoadShadow, RuleId::RegisterWipe],
            _ => vec![RuleId::RegisterWipe],
        },
        Cause::StoreLatch => vec![RuleId::LatchWipe],
        Cause::OperandInteraction => vec![RuleId::OperandWipe],
        Cause::None => vec![],
    }
}

/// Picks the highest-precedence rule whose pattern matches one of the causes.
pub fn select_rule(causes: &[Cause], op: &Op) -> Option<RuleId> {
    let candidates: HashSet<RuleId> = causes
        .iter()
        .flat_map(|c| rules_for(*c, op))
        .filter(|r| template(*r, op, 0).is_ok())
        .collect();
    PRECEDENCE.into_iter().find(|r| candidates.contains(r))
}

/// Whether the flags at `start` may still be read by a conditional branch
/// before some instruction overwrites them.
pub fn flags_live_at(program: &Program, start: usize) -> bool {
    let mut seen = HashSet::new();
    let mut i = start;
    while i < program.len() && seen.insert(i) {
        let op = &program.text[i].op;
        if op.reads_flags() {
            return true;
        }
        if op.sets_flags() {
            return false;
        }
        i = match op {
            Op::Branch { target, .. } => program.labels[target],
            _ => i + 1,
        };
    }
    false
}

/// Applies `rule` at instruction `index`.
pub fn apply(program: &Program, index: usize, rule: RuleId) -> Result<Program, RewriteError> {
    let ins = program.text.get(index).ok_or(RewriteError::OutOfRange(index))?;
    let line = ins.source_line;
    let ops = template(rule, &ins.op, line)?;
    let clobbers = ops.iter().any(|o| o.sets_flags());
    let mut out = program.clone();
    let tag = |ops: Vec<Op>| ops.into_iter().map(|o| Instruction::inserted(o, line, rule)).collect();
    if replaces(rule) {
        // The last instruction of a replacement recomputes the original
        // result, so only a store-replacing sequence leaves different flags.
        let same_flags = ins.op.sets_flags() && ops.last().is_some_and(|o| o.sets_flags());
        if clobbers && !same_flags && flags_live_at(program, index + 1) {
            return Err(RewriteError::FlagsLive { line });
        }
        out.replace(index, tag(ops));
    } else {
        if clobbers && !ins.op.sets_flags() && flags_live_at(program, index) {
            return Err(RewriteError::FlagsLive { line });
        }
        out.insert(index, tag(ops));
    }
    Ok(out)
}

/// Applies the rule for `cause` at instruction `index`; when no candidate
/// rule fits, reports why the first one does not.
pub fn apply_rule(program: &Program, index: usize, cause: Cause) -> Result<Program, RewriteError> {
    let op = &program.text.get(index).ok_or(RewriteError::OutOfRange(index))?.op;
    let mut first_err = None;
    for rule in rules_for(cause, op) {
        match apply(program, index, rule) {
            Ok(p) => return Ok(p),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or_else(|| RewriteError::NoRule {
        cause,
        instruction: show(op),
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    /// Instruction index in the program the pass started from.
    pub index: usize,
    pub source_line: usize,
    pub mnemonic: String,
    pub rule: Option<RuleId>,
    pub inserted: usize,
    /// Why a flagged instruction was left alone.
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteLog {
    pub entries: Vec<LogEntry>,
    pub fixpoint_reached: bool,
    pub iterations: usize,
}

impl RewriteLog {
    pub fn inserted_total(&self) -> usize {
        self.entries.iter().map(|e| e.inserted).sum()
    }
}

impl fmt::Display for RewriteLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "fixpoint_reached = {}", self.fixpoint_reached)?;
        for e in &self.entries {
            match (e.rule, &e.note) {
                (Some(r), _) => writeln!(f, "line {} {}: {} (+{})", e.source_line, e.mnemonic, r, e.inserted)?,
                (None, Some(n)) => writeln!(f, "line {} {}: skipped, {}", e.source_line, e.mnemonic, n)?,
                (None, None) => writeln!(f, "line {} {}: skipped", e.source_line, e.mnemonic)?,
            }
        }
        Ok(())
    }
}

/// One rewrite pass: every flagged instruction receives at most one rule,
/// handled from the highest index down so pending indices stay valid.
pub fn fix_iteration(program: &Program, report: &TTestReport) -> (Program, Vec<LogEntry>) {
    let mut targets: BTreeMap<usize, (usize, String, Vec<Cause>)> = BTreeMap::new();
    for s in report.flagged() {
        let e = targets
            .entry(s.index)
            .or_insert_with(|| (s.source_line, s.mnemonic.clone(), Vec::new()));
        e.2.extend(s.causes.iter().copied());
    }
    let mut out = program.clone();
    let mut log = Vec::new();
    for (&index, (line, mnemonic, causes)) in targets.iter_mut().rev() {
        causes.sort();
        causes.dedup();
        let mut entry = LogEntry {
            index,
            source_line: *line,
            mnemonic: mnemonic.clone(),
            rule: None,
            inserted: 0,
            note: None,
        };
        let Some(ins) = out.text.get(index) else {
            entry.note = Some("report does not match the program".into());
            log.push(entry);
            continue;
        };
        if ins.source_line != *line || ins.mnemonic().name() != mnemonic {
            entry.note = Some("report does not match the program".into());
            log.push(entry);
            continue;
        }
        let Some(rule) = select_rule(causes, &ins.op) else {
            let names: Vec<&str> = causes.iter().map(|c| c.name()).collect();
            entry.note = Some(format!("no applicable rule for {}", names.join(";")));
            log.push(entry);
            continue;
        };
        if ins.provenance == crate::asm::Provenance::Inserted(rule) {
            entry.note = Some(format!("{rule} already applied"));
            log.push(entry);
            continue;
        }
        let before = out.len();
        match apply(&out, index, rule) {
            Ok(p) => {
                out = p;
                entry.rule = Some(rule);
                entry.inserted = out.len() - before;
            }
            Err(e) => entry.note = Some(e.to_string()),
        }
        log.push(entry);
    }
    (out, log)
}
