use std::collections::BTreeMap;
use std::fmt::{self, Write};

use super::{Op, Program, Provenance};

pub(super) fn write_op(f: &mut impl Write, op: &Op) -> fmt::Result {
    let name = op.mnemonic().name();
    match op {
        Op::Alu { rd, rm, .. } => write!(f, "{name} {rd}, {rm}"),
        Op::MovImm { rd, imm } => write!(f, "{name} {rd}, #{imm:#x}"),
        Op::AddImm { rd, rn, imm } | Op::SubImm { rd, rn, imm } => {
            if rd == rn {
                write!(f, "{name} {rd}, #{imm}")
            } else {
                write!(f, "{name} {rd}, {rn}, #{imm}")
            }
        }
        Op::CmpImm { rn, imm } => write!(f, "{name} {rn}, #{imm}"),
        Op::ShiftImm { rd, rm, imm, .. } => {
            if rd == rm {
                write!(f, "{name} {rd}, #{imm}")
            } else {
                write!(f, "{name} {rd}, {rm}, #{imm}")
            }
        }
        Op::Load {
            rd: r,
            base,
            offset,
            ..
        }
        | Op::Store {
            rs: r,
            base,
            offset,
            ..
        } => {
            if *offset == 0 {
                write!(f, "{name} {r}, [{base}]")
            } else {
                write!(f, "{name} {r}, [{base}, #{offset}]")
            }
        }
        Op::Push(r) | Op::Pop(r) => write!(f, "{name} {{{r}}}"),
        Op::Branch { target, .. } => write!(f, "{name} {target}"),
        Op::Nop => write!(f, "{name}"),
    }
}

/// Serializes a program back to the assembly dialect.
pub fn emit(program: &Program) -> String {
    let mut out = String::new();
    if program.uses_mask_register {
        out.push_str(".uses_mask_register\n");
    }
    for region in &program.data {
        let _ = writeln!(out, ".data {} {:#x}", region.name, region.base);
        for chunk in region.bytes.chunks(16) {
            let bytes: Vec<String> = chunk.iter().map(|b| format!("{b:#04x}")).collect();
            let _ = writeln!(out, "    .byte {}", bytes.join(", "));
        }
    }
    if !program.data.is_empty() && !program.text.is_empty() {
        out.push_str(".text\n");
    }

    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &program.labels {
        by_index.entry(idx).or_default().push(name);
    }
    for (i, ins) in program.text.iter().enumerate() {
        for label in by_index.get(&i).into_iter().flatten() {
            let _ = writeln!(out, "{label}:");
        }
        let mut line = String::new();
        let _ = write_op(&mut line, &ins.op);
        match ins.provenance {
            Provenance::Original => {
                let _ = writeln!(out, "    {line}");
            }
            Provenance::Inserted(rule) => {
                let _ = writeln!(out, "    {line:<24}; @inserted {rule}");
            }
        }
    }
    for label in by_index.get(&program.text.len()).into_iter().flatten() {
        let _ = writeln!(out, "{label}:");
    }
    out
}
