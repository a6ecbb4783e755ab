use crate::asm::Reg;
use crate::tvla::{Cause, Fill, MaskDecl, MaskKind, RegValue, RegionBinding, ShareOp};

use super::{CorpusError, OutputExpr, OutputOp, Term};

/// An entry as written in the manifest, before its program is loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub program: String,
    pub description: String,
    pub input_len: usize,
    pub masks: Vec<MaskDecl>,
    pub regions: Vec<RegionBinding>,
    pub regs: Vec<(Reg, RegValue)>,
    pub outputs: Vec<OutputExpr>,
    pub oracle: String,
    pub expected: Vec<Cause>,
}

fn num(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

/// `NAME[A..B]`
fn slice(s: &str) -> Option<(String, usize, usize)> {
    let (name, rest) = s.trim().split_once('[')?;
    let (a, b) = rest.strip_suffix(']')?.split_once("..")?;
    Some((name.trim().to_string(), num(a)? as usize, num(b)? as usize))
}

fn parse_fill(v: &str) -> Option<Fill> {
    let v = v.trim();
    if v == "random" {
        return Some(Fill::Random);
    }
    if let Some(m) = v.strip_prefix("mask ") {
        return Some(Fill::Mask(m.trim().to_string()));
    }
    let (src, op, mask) = if let Some((a, m)) = v.split_once('^') {
        (a, ShareOp::Xor, Some(m.trim().to_string()))
    } else if let Some((a, m)) = v.split_once(" - ") {
        (a, ShareOp::Sub, Some(m.trim().to_string()))
    } else {
        (v, ShareOp::Xor, None)
    };
    let (what, start, end) = slice(src)?;
    (what == "input").then_some(Fill::Input { start, end, mask, op })
}

fn parse_reg_value(v: &str) -> Option<RegValue> {
    let v = v.trim();
    if v == "random" {
        return Some(RegValue::Random);
    }
    if let Some(c) = v.strip_prefix("const ") {
        return Some(RegValue::Const(num(c)? as u32));
    }
    if let Some(m) = v.strip_prefix("mask ") {
        return Some(RegValue::MaskWord(m.trim().to_string()));
    }
    if let Some(a) = v.strip_prefix("addr ") {
        let (region, offset) = match a.split_once('+') {
            Some((r, o)) => (r, num(o)? as u32),
            None => (a, 0),
        };
        return Some(RegValue::Addr {
            region: region.trim().to_string(),
            offset,
        });
    }
    let (src, mask) = match v.split_once('^') {
        Some((a, m)) => (a, Some(m.trim().to_string())),
        None => (v, None),
    };
    let start = src.trim().strip_prefix("input[")?.strip_suffix(']')?;
    Some(RegValue::Input {
        start: num(start)? as usize,
        mask,
    })
}

/// `NAME[A..B]`, optionally `>>> BITS` on a single word.
fn term(t: &str) -> Option<Term> {
    let (t, rotate) = match t.split_once(">>>") {
        Some((t, r)) => (t, num(r)? as u32),
        None => (t, 0),
    };
    let (name, start, end) = slice(t)?;
    (rotate == 0 || (end == start + 4 && rotate < 32)).then_some(Term { name, start, end, rotate })
}

fn parse_output(v: &str) -> Option<OutputExpr> {
    let (op, sep) = if v.contains('+') { (OutputOp::Add, '+') } else { (OutputOp::Xor, '^') };
    let terms = v
        .split(sep)
        .map(term)
        .collect::<Option<Vec<_>>>()?;
    let len = terms[0].end.checked_sub(terms[0].start)?;
    let same = terms.iter().all(|t| t.end >= t.start && t.end - t.start == len);
    (same && len > 0 && (op == OutputOp::Xor || len % 4 == 0)).then_some(OutputExpr { op, terms })
}

fn parse_reg(s: &str) -> Option<Reg> {
    Reg::new(s.trim().strip_prefix('r')?.parse().ok()?)
}

pub fn parse_manifest(text: &str) -> Result<Vec<RawEntry>, CorpusError> {
    let mut entries: Vec<RawEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: &str| CorpusError::Manifest {
            line: line_no,
            msg: msg.to_string(),
        };
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            entries.push(RawEntry {
                name: name.trim().to_string(),
                ..RawEntry::default()
            });
            continue;
        }
        let entry = entries.last_mut().ok_or_else(|| err("key outside of an entry"))?;
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let mut words = key.split_whitespace();
        match (words.next(), words.next()) {
            (Some("program"), None) => entry.program = value.to_string(),
            (Some("describe"), None) => entry.description = value.to_string(),
            (Some("oracle"), None) => entry.oracle = value.to_string(),
            (Some("input"), None) => entry.input_len = num(value).ok_or_else(|| err("bad input length"))? as usize,
            (Some("mask"), Some(name)) => {
                let kind = match value {
                    "byte" => MaskKind::Byte,
                    "word" => MaskKind::Word,
                    "fresh" => MaskKind::Fresh,
                    _ => return Err(err("mask kind must be byte, word or fresh")),
                };
                entry.masks.push(MaskDecl {
                    name: name.to_string(),
                    kind,
                });
            }
            (Some("region"), Some(target)) => {
                let (region, offset) = match target.split_once('+') {
                    Some((r, o)) => (r, num(o).ok_or_else(|| err("bad region offset"))? as usize),
                    None => (target, 0),
                };
                let fill = parse_fill(value).ok_or_else(|| err("bad region fill"))?;
                entry.regions.push(RegionBinding {
                    region: region.to_string(),
                    offset,
                    fill,
                });
            }
            (Some("reg"), Some(r)) => {
                let reg = parse_reg(r).ok_or_else(|| err("bad register"))?;
                let v = parse_reg_value(value).ok_or_else(|| err("bad register value"))?;
                entry.regs.push((reg, v));
            }
            (Some("output"), None) => entry.outputs.push(parse_output(value).ok_or_else(|| err("bad output expression"))?),
            (Some("expect"), None) => {
                if value != "none" {
                    for c in value.split(',') {
                        entry.expected.push(c.trim().parse().map_err(|e: crate::tvla::UnknownCause| err(&e.to_string()))?);
                    }
                }
                entry.expected.sort();
                entry.expected.dedup();
            }
            _ => return Err(err(&format!("unknown key `{key}`"))),
        }
    }
    for e in &entries {
        if e.program.is_empty() || e.oracle.is_empty() || e.outputs.is_empty() {
            return Err(CorpusError::Incomplete(e.name.clone()));
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_value_form() {
        let text = "[k]
program = k.s
input = 8
mask m = word
region a = input[0..4] ^ m
region a+4 = input[4..8] - m
region b = mask m
region c = random
reg r1 = addr a + 4
reg r2 = const 0x10
reg r3 = input[4] ^ m
reg r4 = mask m
reg r5 = random
output = a[0..4] + b[0..4]
output = a[4..8] ^ b[4..8] >>> 8
oracle = identity
expect = bus, store-latch
";
        let e = &parse_manifest(text).unwrap()[0];
        assert_eq!(e.regions[1].offset, 4);
        assert_eq!(
            e.regions[1].fill,
            Fill::Input {
                start: 4,
                end: 8,
                mask: Some("m".into()),
                op: ShareOp::Sub
            }
        );
        assert_eq!(e.regs[0].1, RegValue::Addr { region: "a".into(), offset: 4 });
        assert_eq!(e.regs[1].1, RegValue::Const(16));
        assert_eq!(e.outputs[0].op, OutputOp::Add);
        assert_eq!(e.outputs[1].terms[1].rotate, 8);
        assert!(parse_manifest("[k]\nprogram = k.s\noracle = x\noutput = a[0..8] >>> 8\n").is_err());
        assert_eq!(e.expected, [Cause::Bus, Cause::StoreLatch]);
    }

    #[test]
    fn rejects_unknown_keys_and_causes() {
        assert!(parse_manifest("[k]\ncolour = red\n").is_err());
        assert!(parse_manifest("[k]\nexpect = glitch\n").is_err());
        assert!(parse_manifest("program = x.s\n").is_err());
        assert!(matches!(parse_manifest("[k]\nprogram = k.s\n"), Err(CorpusError::Incomplete(_))));
    }
}
