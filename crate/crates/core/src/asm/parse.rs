use std::collections::BTreeMap;

use thiserror::Error;

use super::{
    AluOp, Cond, DataRegion, Instruction, Op, Program, Provenance, Reg, RuleId, ShiftOp, Width,
    MASK_REG, SP,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: r7 is reserved as the mask register")]
    MaskRegisterReserved { line: usize },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: operand out of range: {msg}")]
    Range { line: usize, msg: String },
    #[error("data region `{name}`: {msg}")]
    Region { name: String, msg: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn range(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Range {
        line,
        msg: msg.into(),
    }
}

/// Parses assembly text into a validated [`Program`].
pub fn parse(source: &str) -> Result<Program, ParseError> {
    let mut program = Program::default();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    // active region and write cursor inside it
    let mut current_region: Option<(usize, usize)> = None;

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let (code, comment) = match raw.find(';') {
            Some(pos) => (&raw[..pos], Some(&raw[pos + 1..])),
            None => (raw, None),
        };
        let provenance = match comment.map(str::trim) {
            Some(c) if c.starts_with("@inserted") => {
                let name = c["@inserted".len()..].trim();
                let rule = RuleId::from_name(name)
                    .ok_or_else(|| syntax(line_no, format!("unknown rule `{name}`")))?;
                Provenance::Inserted(rule)
            }
            _ => Provenance::Original,
        };
        let mut code = code.trim();
        if code.is_empty() {
            continue;
        }

        if code.starts_with('.') {
            current_region = directive(code, line_no, &mut program, current_region)?;
            continue;
        }

        if let Some(colon) = code.find(':') {
            let name = code[..colon].trim();
            if !is_ident(name) {
                return Err(syntax(line_no, format!("bad label `{name}`")));
            }
            if labels.insert(name.to_string(), program.text.len()).is_some() {
                return Err(ParseError::DuplicateLabel {
                    line: line_no,
                    label: name.to_string(),
                });
            }
            code = code[colon + 1..].trim();
            if code.is_empty() {
                continue;
            }
        }

        for op in parse_instruction(code, line_no)? {
            if provenance == Provenance::Original
                && !program.uses_mask_register
                && op.registers().contains(&MASK_REG)
            {
                return Err(ParseError::MaskRegisterReserved { line: line_no });
            }
            program.text.push(Instruction {
                op,
                source_line: line_no,
                provenance,
            });
        }
    }

    program.labels = labels;
    program.validate()?;
    Ok(program)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn directive(
    code: &str,
    line: usize,
    program: &mut Program,
    current: Option<(usize, usize)>,
) -> Result<Option<(usize, usize)>, ParseError> {
    let mut parts = code.splitn(2, char::is_whitespace);
    let name = parts.next().unwrap_or_default();
    let rest = parts.next().unwrap_or("").trim();
    let args: Vec<&str> = rest
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    match name {
        ".text" => Ok(None),
        ".uses_mask_register" => {
            program.uses_mask_register = true;
            Ok(current)
        }
        ".data" => {
            if args.is_empty() || args.len() > 3 {
                return Err(syntax(line, ".data expects: name base [size]"));
            }
            if !is_ident(args[0]) {
                return Err(syntax(line, format!("bad region name `{}`", args[0])));
            }
            if program.region(args[0]).is_some() {
                return Err(syntax(line, format!("duplicate region `{}`", args[0])));
            }
            let base = parse_number(args.get(1).copied().unwrap_or(""), line)?;
            let size = match args.get(2) {
                Some(s) => parse_number(s, line)? as usize,
                None => 0,
            };
            program.data.push(DataRegion {
                name: args[0].to_string(),
                base,
                bytes: vec![0; size],
            });
            Ok(Some((program.data.len() - 1, 0)))
        }
        ".byte" | ".word" | ".space" => {
            let (region, mut cursor) = current
                .ok_or_else(|| syntax(line, format!("{name} outside a .data block")))?;
            let bytes = &mut program.data[region].bytes;
            let mut put = |chunk: &[u8], cursor: &mut usize| {
                let end = *cursor + chunk.len();
                if bytes.len() < end {
                    bytes.resize(end, 0);
                }
                bytes[*cursor..end].copy_from_slice(chunk);
                *cursor = end;
            };
            for a in &args {
                let v = parse_number(a, line)?;
                match name {
                    ".byte" => {
                        if v > 0xff {
                            return Err(range(line, format!("byte value {v:#x}")));
                        }
                        put(&[v as u8], &mut cursor);
                    }
                    ".word" => put(&v.to_le_bytes(), &mut cursor),
                    _ => put(&vec![0u8; v as usize], &mut cursor),
                }
            }
            Ok(Some((region, cursor)))
        }
        _ => Err(syntax(line, format!("unknown directive `{name}`"))),
    }
}

pub(crate) fn parse_number(tok: &str, line: usize) -> Result<u32, ParseError> {
    let t = tok.trim().trim_start_matches('#');
    let parsed = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u32::from_str_radix(h, 16)
    } else if let Some(b) = t.strip_prefix("0b") {
        u32::from_str_radix(b, 2)
    } else {
        t.parse::<u32>()
    };
    parsed.map_err(|_| syntax(line, format!("bad number `{tok}`")))
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, ParseError> {
    let t = tok.trim().to_ascii_lowercase();
    let idx = match t.as_str() {
        "sp" => 13,
        "lr" => 14,
        "pc" => 15,
        _ => t
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|&n| n <= 15)
            .ok_or_else(|| syntax(line, format!("expected register, found `{tok}`")))?,
    };
    Ok(Reg::r(idx))
}

fn is_imm(tok: &str) -> bool {
    let t = tok.trim();
    t.starts_with('#') || t.starts_with(|c: char| c.is_ascii_digit())
}

/// Splits operands on commas that are not inside brackets or braces.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ']' | '}' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_mem(tok: &str, line: usize) -> Result<(Reg, u32), ParseError> {
    let inner = tok
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("expected memory operand, found `{tok}`")))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [base] => Ok((parse_reg(base, line)?, 0)),
        [base, off] if is_imm(off) => Ok((parse_reg(base, line)?, parse_number(off, line)?)),
        _ => Err(syntax(line, format!("unsupported addressing mode `{tok}`"))),
    }
}

fn parse_reglist(tok: &str, line: usize) -> Result<Vec<Reg>, ParseError> {
    let t = tok.trim();
    let inner = t
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .unwrap_or(t);
    let regs = inner
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|r| parse_reg(r, line))
        .collect::<Result<Vec<_>, _>>()?;
    if regs.is_empty() {
        return Err(syntax(line, "empty register list"));
    }
    Ok(regs)
}

fn alu_op(name: &str) -> Option<AluOp> {
    AluOp::ALL.into_iter().find(|op| op.name() == name)
}

/// Parses one instruction. Multi-register push/pop expand to several
/// single-register operations.
fn parse_instruction(code: &str, line: usize) -> Result<Vec<Op>, ParseError> {
    let (mn, rest) = match code.find(char::is_whitespace) {
        Some(p) => (&code[..p], code[p..].trim()),
        None => (code, ""),
    };
    let mn = mn.to_ascii_lowercase();
    let ops = split_operands(rest);
    let n = ops.len();
    let expect = |k: usize| -> Result<(), ParseError> {
        if n == k {
            Ok(())
        } else {
            Err(syntax(line, format!("`{mn}` expects {k} operands, found {n}")))
        }
    };

    let op = match mn.as_str() {
        "nop" => {
            expect(0)?;
            Op::Nop
        }
        "b" | "beq" | "bne" => {
            expect(1)?;
            let cond = match mn.as_str() {
                "b" => Cond::Always,
                "beq" => Cond::Eq,
                _ => Cond::Ne,
            };
            if !is_ident(&ops[0]) {
                return Err(syntax(line, format!("bad branch target `{}`", ops[0])));
            }
            Op::Branch {
                cond,
                target: ops[0].clone(),
            }
        }
        "push" | "pop" => {
            if n == 0 {
                return Err(syntax(line, format!("`{mn}` expects a register list")));
            }
            let regs = parse_reglist(rest, line)?;
            return Ok(if mn == "push" {
                // the highest-numbered register lands at the highest address
                let mut sorted = regs;
                sorted.sort();
                sorted.into_iter().rev().map(Op::Push).collect()
            } else {
                let mut sorted = regs;
                sorted.sort();
                sorted.into_iter().map(Op::Pop).collect()
            });
        }
        "ldr" | "ldrb" | "ldrh" | "str" | "strb" | "strh" => {
            expect(2)?;
            let width = match mn.as_bytes().last() {
                Some(b'b') => Width::Byte,
                Some(b'h') => Width::Half,
                _ => Width::Word,
            };
            let r = parse_reg(&ops[0], line)?;
            let (base, offset) = parse_mem(&ops[1], line)?;
            if mn.starts_with("ldr") {
                Op::Load {
                    width,
                    rd: r,
                    base,
                    offset,
                }
            } else {
                Op::Store {
                    width,
                    rs: r,
                    base,
                    offset,
                }
            }
        }
        "cmp" | "cmps" if n == 2 && is_imm(&ops[1]) => Op::CmpImm {
            rn: parse_reg(&ops[0], line)?,
            imm: parse_number(&ops[1], line)?,
        },
        "cmp" => {
            expect(2)?;
            Op::Alu {
                op: AluOp::Cmps,
                rd: parse_reg(&ops[0], line)?,
                rm: parse_reg(&ops[1], line)?,
            }
        }
        "movs" | "mov" if n == 2 && is_imm(&ops[1]) => Op::MovImm {
            rd: parse_reg(&ops[0], line)?,
            imm: parse_number(&ops[1], line)?,
        },
        "adds" | "subs" if n >= 2 && is_imm(&ops[n - 1]) => {
            let rd = parse_reg(&ops[0], line)?;
            let rn = match n {
                2 => rd,
                3 => parse_reg(&ops[1], line)?,
                _ => return Err(syntax(line, format!("`{mn}` expects 2 or 3 operands"))),
            };
            let imm = parse_number(&ops[n - 1], line)?;
            if mn == "adds" {
                Op::AddImm { rd, rn, imm }
            } else {
                Op::SubImm { rd, rn, imm }
            }
        }
        "lsls" | "lsrs" if n >= 2 && is_imm(&ops[n - 1]) => {
            let rd = parse_reg(&ops[0], line)?;
            let rm = match n {
                2 => rd,
                3 => parse_reg(&ops[1], line)?,
                _ => return Err(syntax(line, format!("`{mn}` expects 2 or 3 operands"))),
            };
            Op::ShiftImm {
                op: if mn == "lsls" {
                    ShiftOp::Lsls
                } else {
                    ShiftOp::Lsrs
                },
                rd,
                rm,
                imm: parse_number(&ops[n - 1], line)?,
            }
        }
        other => {
            let name = if other == "mov" { "movs" } else { other };
            let Some(op) = alu_op(name) else {
                return Err(ParseError::UnknownMnemonic {
                    line,
                    mnemonic: mn.clone(),
                });
            };
            // `muls rd, rm, rd` is accepted as the unified form of `muls rd, rm`
            let (rd, rm) = match (op, n) {
                (_, 2) => (parse_reg(&ops[0], line)?, parse_reg(&ops[1], line)?),
                (AluOp::Muls, 3) if ops[0] == ops[2] => {
                    (parse_reg(&ops[0], line)?, parse_reg(&ops[1], line)?)
                }
                _ => return Err(syntax(line, format!("`{mn}` expects 2 operands, found {n}"))),
            };
            Op::Alu { op, rd, rm }
        }
    };
    check_operands(&op, line)?;
    Ok(vec![op])
}

/// Encodability and register-use constraints of a single operation.
pub(crate) fn check_operands(op: &Op, line: usize) -> Result<(), ParseError> {
    for r in op.registers() {
        if r.index() == 15 {
            return Err(range(line, "pc cannot be an explicit operand"));
        }
        if r == SP {
            return Err(range(line, "sp is only used implicitly by push/pop"));
        }
    }
    match op {
        Op::MovImm { imm, .. } | Op::CmpImm { imm, .. } if *imm > 0xff => {
            Err(range(line, format!("immediate {imm:#x} exceeds 8 bits")))
        }
        Op::AddImm { rd, rn, imm } | Op::SubImm { rd, rn, imm } => {
            let max = if rd == rn { 0xff } else { 7 };
            if *imm > max {
                Err(range(line, format!("immediate {imm} exceeds {max}")))
            } else {
                Ok(())
            }
        }
        Op::ShiftImm { imm, .. } if *imm > 31 => {
            Err(range(line, format!("shift amount {imm} exceeds 31")))
        }
        Op::Load { width, offset, .. } | Op::Store { width, offset, .. } => {
            if offset % width.bytes() != 0 || *offset > width.max_offset() {
                Err(range(
                    line,
                    format!("offset {offset} not encodable for a {}-byte access", width.bytes()),
                ))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

pub(crate) fn check_regions(regions: &[DataRegion]) -> Result<(), ParseError> {
    let region_err = |r: &DataRegion, msg: String| ParseError::Region {
        name: r.name.clone(),
        msg,
    };
    for r in regions {
        if r.base % 4 != 0 {
            return Err(region_err(r, format!("base {:#x} is not word-aligned", r.base)));
        }
        if (r.base as u64) + (r.bytes.len() as u64) > u32::MAX as u64 {
            return Err(region_err(r, "extends past the address space".into()));
        }
    }
    let mut sorted: Vec<&DataRegion> = regions.iter().collect();
    sorted.sort_by_key(|r| r.base);
    for pair in sorted.windows(2) {
        if pair[0].end() > pair[1].base {
            return Err(region_err(
                pair[1],
                format!("overlaps region `{}`", pair[0].name),
            ));
        }
    }
    Ok(())
}
