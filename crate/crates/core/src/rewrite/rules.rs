use crate::asm::{AluOp, Op, Reg, RuleId, ShiftOp, Width, MASK_REG};

use super::RewriteError;

const M: Reg = MASK_REG;
/// Scratch registers of the byte-split store sequence: byte selector and byte.
pub const SPLIT_SELECT: Reg = Reg::r(0);
pub const SPLIT_BYTE: Reg = Reg::r(6);

fn alu(op: AluOp, rd: Reg, rm: Reg) -> Op {
    Op::Alu { op, rd, rm }
}

fn shift(op: ShiftOp, rd: Reg, imm: u32) -> Op {
    Op::ShiftImm { op, rd, rm: rd, imm }
}

/// Whether the rule replaces the instruction rather than inserting before it.
pub fn replaces(rule: RuleId) -> bool {
    matches!(rule, RuleId::RotationMask | RuleId::ByteSplitStore)
}

/// Instructions the rule adds in front of `op`, or the sequence replacing it.
pub fn template(rule: RuleId, op: &Op, line: usize) -> Result<Vec<Op>, RewriteError> {
    let mismatch = || RewriteError::PatternMismatch {
        rule,
        line,
        instruction: super::show(op),
    };
    match rule {
        RuleId::OperandWipe => match op {
            Op::Branch { .. } | Op::Nop => Err(mismatch()),
            _ => Ok(vec![alu(AluOp::Movs, M, M)]),
        },
        RuleId::RegisterWipe => {
            let rd = op.dest().filter(|rd| *rd != M).ok_or_else(mismatch)?;
            if op.sources().contains(&rd) {
                return Err(RewriteError::SourceClobber { rule, line, reg: rd });
            }
            Ok(vec![alu(AluOp::Movs, rd, M)])
        }
        RuleId::RotationMask => match *op {
            Op::Alu { op: AluOp::Rors, rd, rm } if rd != M && rm != M && rd != rm => Ok(vec![
                alu(AluOp::Eors, rd, M),
                alu(AluOp::Rors, rd, rm),
                alu(AluOp::Rors, M, rm),
                alu(AluOp::Eors, rd, M),
            ]),
            _ => Err(mismatch()),
        },
        RuleId::LoadShadow => match *op {
            Op::Load { rd, base, .. } if rd != base && rd != M => Ok(vec![Op::Push(M), Op::Pop(rd)]),
            Op::Load { rd, .. } if rd != M => Err(RewriteError::SourceClobber { rule, line, reg: rd }),
            Op::Pop(rd) if rd != M => Ok(vec![Op::Push(M), Op::Pop(rd)]),
            _ => Err(mismatch()),
        },
        RuleId::StoreShadow => match *op {
            Op::Store { width, base, offset, .. } => Ok(vec![Op::Store {
                width,
                rs: M,
                base,
                offset,
            }]),
            Op::Push(_) => Ok(vec![Op::Push(M), Op::Pop(M)]),
            _ => Err(mismatch()),
        },
        RuleId::ByteSplitStore => match *op {
            Op::Store { width, rs, base, offset } if width != Width::Byte => {
                for r in [rs, base] {
                    if r == SPLIT_SELECT || r == SPLIT_BYTE || r == M {
                        return Err(RewriteError::RegisterCollision { line, reg: r });
                    }
                }
                if offset + width.bytes() - 1 > Width::Byte.max_offset() {
                    return Err(mismatch());
                }
                Ok(byte_split(rs, base, offset, width.bytes()))
            }
            _ => Err(mismatch()),
        },
        RuleId::LatchWipe => match op {
            Op::Alu { .. } | Op::MovImm { .. } | Op::AddImm { .. } | Op::SubImm { .. } | Op::ShiftImm { .. } => {
                Ok(vec![Op::Push(M), Op::Pop(M)])
            }
            _ => Err(mismatch()),
        },
    }
}

/// Stores `rs` one byte at a time; each byte slot first receives a byte of
/// the mask register, then the isolated data byte.
fn byte_split(rs: Reg, base: Reg, offset: u32, bytes: u32) -> Vec<Op> {
    let (sel, b) = (SPLIT_SELECT, SPLIT_BYTE);
    let mut out = vec![Op::Push(b), Op::Push(sel)];
    for k in 0..bytes {
        out.push(alu(AluOp::Movs, b, M));
        out.push(Op::MovImm { rd: sel, imm: 0xff });
        out.push(alu(AluOp::Movs, b, rs));
        if k > 0 {
            out.push(shift(ShiftOp::Lsls, sel, 8 * k));
        }
        out.push(alu(AluOp::Ands, M, M));
        out.push(alu(AluOp::Ands, b, sel));
        if k > 0 {
            out.push(shift(ShiftOp::Lsrs, sel, 8 * k));
            out.push(shift(ShiftOp::Lsrs, b, 8 * k));
        }
        let at = offset + k;
        out.push(Op::Store {
            width: Width::Byte,
            rs: M,
            base,
            offset: at,
        });
        out.push(Op::Store {
            width: Width::Byte,
            rs: b,
            base,
            offset: at,
        });
    }
    out.push(alu(AluOp::Movs, b, M));
    out.push(Op::Pop(sel));
    out.push(Op::Pop(b));
    out
}
