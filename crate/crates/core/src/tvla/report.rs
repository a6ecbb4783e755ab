use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::asm::Op;
use crate::leakage::{is_rotation, Component, N_COMPONENTS};

pub const DEFAULT_THRESHOLD: f64 = 4.5;

/// Classified source of a flagged leak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cause {
    OperandInteraction,
    RegisterOverwrite,
    Bus,
    MemoryOverwrite,
    StoreLatch,
    ByteAdjacency,
    RotationAlignment,
    None,
}

impl Cause {
    pub const ALL: [Cause; 8] = [
        Cause::OperandInteraction,
        Cause::RegisterOverwrite,
        Cause::Bus,
        Cause::MemoryOverwrite,
        Cause::StoreLatch,
        Cause::ByteAdjacency,
        Cause::RotationAlignment,
        Cause::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Cause::OperandInteraction => "operand-interaction",
            Cause::RegisterOverwrite => "register-overwrite",
            Cause::Bus => "bus",
            Cause::MemoryOverwrite => "memory-overwrite",
            Cause::StoreLatch => "store-latch",
            Cause::ByteAdjacency => "byte-adjacency",
            Cause::RotationAlignment => "rotation-alignment",
            Cause::None => "none",
        }
    }

    /// Attribution of a leaking component at an instruction.
    pub fn of_component(c: Component, op: &Op) -> Cause {
        match c {
            Component::T_DEST if is_rotation(op) => Cause::RotationAlignment,
            Component::T_DEST => Cause::RegisterOverwrite,
            Component::T_BUS => Cause::Bus,
            Component::T_MEMCELL => Cause::MemoryOverwrite,
            Component::T_LATCH => Cause::StoreLatch,
            Component::B_ADJ => Cause::ByteAdjacency,
            _ => Cause::OperandInteraction,
        }
    }
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown cause `{0}`")]
pub struct UnknownCause(pub String);

impl FromStr for Cause {
    type Err = UnknownCause;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Cause::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownCause(s.to_string()))
    }
}

/// Test statistics for one dynamic slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotReport {
    pub slot: usize,
    /// Static instruction index in the program text.
    pub index: usize,
    pub mnemonic: String,
    pub source_line: usize,
    pub t_total: f64,
    pub t_components: [f64; N_COMPONENTS],
    pub degenerate: bool,
    pub n_fixed: u64,
    pub n_random: u64,
    /// Primary cause: the component with the largest |t|.
    pub cause: Cause,
    /// Every cause whose component crosses the threshold.
    pub causes: Vec<Cause>,
}

impl SlotReport {
    pub fn max_abs_t(&self) -> f64 {
        self.t_components
            .iter()
            .fold(self.t_total.abs(), |m, t| m.max(t.abs()))
    }

    pub fn is_flagged(&self) -> bool {
        self.cause != Cause::None
    }

    pub fn t(&self, c: Component) -> f64 {
        self.t_components[c.index()]
    }

    /// Recomputes `cause` and `causes` from the statistics.
    pub fn classify(&mut self, op: &Op, threshold: f64) {
        let best = Component::all()
            .filter(|c| self.t(*c) != 0.0)
            .max_by(|a, b| self.t(*a).abs().total_cmp(&self.t(*b).abs()));
        if self.max_abs_t() < threshold {
            self.cause = Cause::None;
            self.causes.clear();
            return;
        }
        let mut causes: Vec<Cause> = Component::all()
            .filter(|c| self.t(*c).abs() >= threshold)
            .map(|c| Cause::of_component(c, op))
            .collect();
        self.cause = best.map_or(Cause::OperandInteraction, |c| Cause::of_component(c, op));
        causes.push(self.cause);
        causes.sort();
        causes.dedup();
        self.causes = causes;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestReport {
    pub threshold: f64,
    pub slots: Vec<SlotReport>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("reports disagree on slot count ({0} vs {1})")]
    SlotMismatch(usize, usize),
    #[error("no reports to aggregate")]
    Empty,
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TTestReport {
    pub fn flagged(&self) -> impl Iterator<Item = &SlotReport> {
        self.slots.iter().filter(|s| s.is_flagged())
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged().count()
    }

    pub fn max_abs_t(&self) -> f64 {
        self.slots.iter().map(|s| s.max_abs_t()).fold(0.0, f64::max)
    }

    /// Sorted, deduplicated causes over all flagged slots.
    pub fn causes(&self) -> Vec<Cause> {
        let mut all: Vec<Cause> = self.flagged().flat_map(|s| s.causes.iter().copied()).collect();
        all.sort();
        all.dedup();
        all
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        write!(out, "slot,mnemonic,source_line,t_total")?;
        for c in Component::all() {
            write!(out, ",t_{c}")?;
        }
        writeln!(out, ",cause,causes,index")?;
        for s in &self.slots {
            write!(out, "{},{},{},{}", s.slot, s.mnemonic, s.source_line, s.t_total)?;
            for t in s.t_components {
                write!(out, ",{t}")?;
            }
            let causes: Vec<&str> = s.causes.iter().map(|c| c.name()).collect();
            writeln!(out, ",{},{},{}", s.cause, causes.join(";"), s.index)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    pub fn read_csv(input: impl BufRead, threshold: f64) -> Result<Self, ReportError> {
        let mut slots = Vec::new();
        for (i, line) in input.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| ReportError::Csv {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + N_COMPONENTS + 3 {
                return Err(err("wrong column count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            let mut t_components = [0.0; N_COMPONENTS];
            for (k, t) in t_components.iter_mut().enumerate() {
                *t = num(f[4 + k])?;
            }
            let tail = 4 + N_COMPONENTS;
            let cause: Cause = f[tail].parse().map_err(|e: UnknownCause| err(&e.to_string()))?;
            let causes = f[tail + 1]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<Cause>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(&e.to_string()))?;
            let t_total = num(f[3])?;
            slots.push(SlotReport {
                slot: int(f[0])?,
                index: int(f[tail + 2])?,
                mnemonic: f[1].to_string(),
                source_line: int(f[2])?,
                t_total,
                degenerate: t_total.is_infinite() || t_components.iter().any(|t| t.is_infinite()),
                t_components,
                n_fixed: 0,
                n_random: 0,
                cause,
                causes,
            });
        }
        Ok(TTestReport { threshold, slots })
    }
}

fn pick_max(a: f64, b: f64) -> f64 {
    if b.abs() > a.abs() {
        b
    } else {
        a
    }
}

/// Per slot and component, keeps the statistic with the largest magnitude.
pub fn aggregate_max(reports: &[TTestReport], ops: &[Op]) -> Result<TTestReport, ReportError> {
    let first = reports.first().ok_or(ReportError::Empty)?;
    let mut out = first.clone();
    for r in &reports[1..] {
        if r.slots.len() != out.slots.len() {
            return Err(ReportError::SlotMismatch(out.slots.len(), r.slots.len()));
        }
        for (acc, s) in out.slots.iter_mut().zip(&r.slots) {
            acc.t_total = pick_max(acc.t_total, s.t_total);
            for k in 0..N_COMPONENTS {
                acc.t_components[k] = pick_max(acc.t_components[k], s.t_components[k]);
            }
            acc.degenerate |= s.degenerate;
            acc.n_fixed += s.n_fixed;
            acc.n_random += s.n_random;
        }
    }
    for s in &mut out.slots {
        s.classify(&ops[s.index], out.threshold);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{AluOp, Reg};

    fn eors() -> Op {
        Op::Alu {
            op: AluOp::Eors,
            rd: Reg::r(1),
            rm: Reg::r(2),
        }
    }

    fn report(t: f64) -> TTestReport {
        let mut s = SlotReport {
            slot: 0,
            index: 0,
            mnemonic: "eors".into(),
            source_line: 1,
            t_total: t,
            t_components: [0.0; N_COMPONENTS],
            degenerate: false,
            n_fixed: 10,
            n_random: 10,
            cause: Cause::None,
            causes: vec![],
        };
        s.t_components[Component::T_DEST.index()] = t;
        s.classify(&eors(), DEFAULT_THRESHOLD);
        TTestReport {
            threshold: DEFAULT_THRESHOLD,
            slots: vec![s],
        }
    }

    #[test]
    fn single_report_aggregates_to_itself() {
        let r = report(3.0);
        assert_eq!(aggregate_max(&[r.clone()], &[eors()]).unwrap().slots[0].t_total, 3.0);
    }

    #[test]
    fn largest_magnitude_wins() {
        let agg = aggregate_max(&[report(3.0), report(-5.0)], &[eors()]).unwrap();
        assert_eq!(agg.slots[0].t_total, -5.0);
        assert_eq!(agg.slots[0].cause, Cause::RegisterOverwrite);
        assert_eq!(agg.flagged_count(), 1);
    }

    #[test]
    fn mismatched_reports_rejected() {
        let mut r = report(1.0);
        r.slots.push(r.slots[0].clone());
        assert!(matches!(
            aggregate_max(&[report(1.0), r], &[eors()]),
            Err(ReportError::SlotMismatch(1, 2))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let r = report(-7.25);
        let back = TTestReport::read_csv(r.to_csv().as_bytes(), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(back.slots[0].t_total, -7.25);
        assert_eq!(back.slots[0].cause, Cause::RegisterOverwrite);
        assert_eq!(back.slots[0].causes, r.slots[0].causes);
    }

    #[test]
    fn rotation_overwrite_is_alignment() {
        let rors = Op::Alu {
            op: AluOp::Rors,
            rd: Reg::r(4),
            rm: Reg::r(5),
        };
        assert_eq!(Cause::of_component(Component::T_DEST, &rors), Cause::RotationAlignment);
        assert_eq!(Cause::of_component(Component::T_DEST, &eors()), Cause::RegisterOverwrite);
    }

    #[test]
    fn cause_names_parse() {
        for c in Cause::ALL {
            assert_eq!(c.name().parse::<Cause>().unwrap(), c);
        }
    }
}
