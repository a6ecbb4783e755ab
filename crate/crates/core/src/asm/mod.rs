//! The Thumb-subset assembly dialect: instructions, programs, parsing and
//! emission.
//!
//! The dialect is one instruction per line, `;` comments, `name:` labels and
//! `.data` blocks. Instructions added by the rewrite engine carry an
//! `; @inserted <rule>` annotation so that rewritten programs survive a
//! round trip through text.

mod emit;
mod parse;

pub use emit::emit;
pub use parse::{parse, ParseError};

use std::collections::BTreeMap;
use std::fmt;

/// Register reserved for the rewrite engine's random mask.
pub const MASK_REG: Reg = Reg(7);
/// Stack pointer.
pub const SP: Reg = Reg(13);

/// A general purpose register index in `0..=15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const fn new(index: u8) -> Option<Reg> {
        if index <= 15 {
            Some(Reg(index))
        } else {
            None
        }
    }

    /// Panics if `index > 15`; intended for constants and generated code.
    pub const fn r(index: u8) -> Reg {
        assert!(index <= 15);
        Reg(index)
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => write!(f, "sp"),
            14 => write!(f, "lr"),
            15 => write!(f, "pc"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Two-register data-processing operations (`op rd, rm`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Eors,
    Adds,
    Ands,
    Bics,
    Cmps,
    Movs,
    Orrs,
    Subs,
    Lsls,
    Lsrs,
    Rors,
    Muls,
}

impl AluOp {
    pub const ALL: [AluOp; 12] = [
        AluOp::Eors,
        AluOp::Adds,
        AluOp::Ands,
        AluOp::Bics,
        AluOp::Cmps,
        AluOp::Movs,
        AluOp::Orrs,
        AluOp::Subs,
        AluOp::Lsls,
        AluOp::Lsrs,
        AluOp::Rors,
        AluOp::Muls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AluOp::Eors => "eors",
            AluOp::Adds => "adds",
            AluOp::Ands => "ands",
            AluOp::Bics => "bics",
            AluOp::Cmps => "cmps",
            AluOp::Movs => "movs",
            AluOp::Orrs => "orrs",
            AluOp::Subs => "subs",
            AluOp::Lsls => "lsls",
            AluOp::Lsrs => "lsrs",
            AluOp::Rors => "rors",
            AluOp::Muls => "muls",
        }
    }

    /// Whether the operation reads its destination register.
    pub fn reads_dest(self) -> bool {
        !matches!(self, AluOp::Movs)
    }

    pub fn writes_dest(self) -> bool {
        !matches!(self, AluOp::Cmps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftOp {
    Lsls,
    Lsrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Byte,
    Half,
    Word,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::Byte => 1,
            Width::Half => 2,
            Width::Word => 4,
        }
    }

    /// Largest encodable immediate offset for this access width.
    pub fn max_offset(self) -> u32 {
        31 * self.bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Always,
    Eq,
    Ne,
}

/// The opcode universe, including immediate forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Alu(AluOp),
    MovsImm,
    AddsImm,
    SubsImm,
    CmpImm,
    ShiftImm(ShiftOp),
    Ldr(Width),
    Str(Width),
    Push,
    Pop,
    B(Cond),
    Nop,
}

impl Mnemonic {
    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Alu(op) => op.name(),
            Mnemonic::MovsImm => "movs",
            Mnemonic::AddsImm => "adds",
            Mnemonic::SubsImm => "subs",
            Mnemonic::CmpImm => "cmp",
            Mnemonic::ShiftImm(ShiftOp::Lsls) => "lsls",
            Mnemonic::ShiftImm(ShiftOp::Lsrs) => "lsrs",
            Mnemonic::Ldr(Width::Word) => "ldr",
            Mnemonic::Ldr(Width::Half) => "ldrh",
            Mnemonic::Ldr(Width::Byte) => "ldrb",
            Mnemonic::Str(Width::Word) => "str",
            Mnemonic::Str(Width::Half) => "strh",
            Mnemonic::Str(Width::Byte) => "strb",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::B(Cond::Always) => "b",
            Mnemonic::B(Cond::Eq) => "beq",
            Mnemonic::B(Cond::Ne) => "bne",
            Mnemonic::Nop => "nop",
        }
    }
}

/// A decoded instruction with its operands.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    /// `op rd, rm`
    Alu { op: AluOp, rd: Reg, rm: Reg },
    /// `movs rd, #imm8`
    MovImm { rd: Reg, imm: u32 },
    /// `adds rd, rn, #imm` (`adds rd, #imm8` when `rd == rn`)
    AddImm { rd: Reg, rn: Reg, imm: u32 },
    /// `subs rd, rn, #imm` (`subs rd, #imm8` when `rd == rn`)
    SubImm { rd: Reg, rn: Reg, imm: u32 },
    /// `cmp rn, #imm8`
    CmpImm { rn: Reg, imm: u32 },
    /// `lsls rd, rm, #imm5` (`lsls rd, #imm5` when `rd == rm`)
    ShiftImm { op: ShiftOp, rd: Reg, rm: Reg, imm: u32 },
    Load { width: Width, rd: Reg, base: Reg, offset: u32 },
    Store { width: Width, rs: Reg, base: Reg, offset: u32 },
    Push(Reg),
    Pop(Reg),
    Branch { cond: Cond, target: String },
    Nop,
}

impl Op {
    pub fn mnemonic(&self) -> Mnemonic {
        match self {
            Op::Alu { op, .. } => Mnemonic::Alu(*op),
            Op::MovImm { .. } => Mnemonic::MovsImm,
            Op::AddImm { .. } => Mnemonic::AddsImm,
            Op::SubImm { .. } => Mnemonic::SubsImm,
            Op::CmpImm { .. } => Mnemonic::CmpImm,
            Op::ShiftImm { op, .. } => Mnemonic::ShiftImm(*op),
            Op::Load { width, .. } => Mnemonic::Ldr(*width),
            Op::Store { width, .. } => Mnemonic::Str(*width),
            Op::Push(_) => Mnemonic::Push,
            Op::Pop(_) => Mnemonic::Pop,
            Op::Branch { cond, .. } => Mnemonic::B(*cond),
            Op::Nop => Mnemonic::Nop,
        }
    }

    /// Register written by the instruction, if any (sp updates of push/pop excluded).
    pub fn dest(&self) -> Option<Reg> {
        match self {
            Op::Alu { op, rd, .. } if op.writes_dest() => Some(*rd),
            Op::Alu { .. } => None,
            Op::MovImm { rd, .. }
            | Op::AddImm { rd, .. }
            | Op::SubImm { rd, .. }
            | Op::ShiftImm { rd, .. }
            | Op::Load { rd, .. }
            | Op::Pop(rd) => Some(*rd),
            _ => None,
        }
    }

    /// Registers read by the instruction (sp reads of push/pop excluded).
    pub fn sources(&self) -> Vec<Reg> {
        match self {
            Op::Alu { op, rd, rm } if op.reads_dest() => vec![*rd, *rm],
            Op::Alu { rm, .. } => vec![*rm],
            Op::AddImm { rn, .. } | Op::SubImm { rn, .. } | Op::CmpImm { rn, .. } => vec![*rn],
            Op::ShiftImm { rm, .. } => vec![*rm],
            Op::Load { base, .. } => vec![*base],
            Op::Store { rs, base, .. } => vec![*rs, *base],
            Op::Push(r) => vec![*r],
            _ => vec![],
        }
    }

    /// Every register named explicitly in the instruction text.
    pub fn registers(&self) -> Vec<Reg> {
        let mut regs = self.sources();
        if let Some(d) = self.dest() {
            regs.push(d);
        }
        match self {
            Op::Alu { rd, .. } => regs.push(*rd),
            Op::Pop(r) => regs.push(*r),
            _ => {}
        }
        regs.sort();
        regs.dedup();
        regs
    }

    /// Whether the instruction updates the N/Z flags.
    pub fn sets_flags(&self) -> bool {
        matches!(
            self,
            Op::Alu { .. }
                | Op::MovImm { .. }
                | Op::AddImm { .. }
                | Op::SubImm { .. }
                | Op::CmpImm { .. }
                | Op::ShiftImm { .. }
        )
    }

    pub fn reads_flags(&self) -> bool {
        matches!(
            self,
            Op::Branch {
                cond: Cond::Eq | Cond::Ne,
                ..
            }
        )
    }

    pub fn is_memory(&self) -> bool {
        matches!(
            self,
            Op::Load { .. } | Op::Store { .. } | Op::Push(_) | Op::Pop(_)
        )
    }
}

/// Identifiers of the rewrite rules, kept here so that provenance can be
/// parsed back from annotated assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleId {
    OperandWipe,
    RegisterWipe,
    RotationMask,
    LoadShadow,
    StoreShadow,
    ByteSplitStore,
    LatchWipe,
}

impl RuleId {
    pub const ALL: [RuleId; 7] = [
        RuleId::OperandWipe,
        RuleId::RegisterWipe,
        RuleId::RotationMask,
        RuleId::LoadShadow,
        RuleId::StoreShadow,
        RuleId::ByteSplitStore,
        RuleId::LatchWipe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleId::OperandWipe => "operand-wipe",
            RuleId::RegisterWipe => "register-wipe",
            RuleId::RotationMask => "rotation-mask",
            RuleId::LoadShadow => "load-shadow",
            RuleId::StoreShadow => "store-shadow",
            RuleId::ByteSplitStore => "byte-split-store",
            RuleId::LatchWipe => "latch-wipe",
        }
    }

    pub fn from_name(name: &str) -> Option<RuleId> {
        RuleId::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Inserted(RuleId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub op: Op,
    /// 1-based line in the source the instruction came from; inserted
    /// instructions inherit the line of the instruction they protect.
    pub source_line: usize,
    pub provenance: Provenance,
}

impl Instruction {
    pub fn new(op: Op, source_line: usize) -> Self {
        Instruction {
            op,
            source_line,
            provenance: Provenance::Original,
        }
    }

    pub fn inserted(op: Op, source_line: usize, rule: RuleId) -> Self {
        Instruction {
            op,
            source_line,
            provenance: Provenance::Inserted(rule),
        }
    }

    pub fn mnemonic(&self) -> Mnemonic {
        self.op.mnemonic()
    }

    pub fn is_inserted(&self) -> bool {
        matches!(self.provenance, Provenance::Inserted(_))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        emit::write_op(f, &self.op)
    }
}

/// A named, word-aligned block of initialized memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRegion {
    pub name: String,
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl DataRegion {
    pub fn end(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub text: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub data: Vec<DataRegion>,
    /// Lab programs (probe batteries, listing reproductions) may use the
    /// mask register directly.
    pub uses_mask_register: bool,
}

impl Program {
    pub fn reserved_mask_register(&self) -> Reg {
        MASK_REG
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn region(&self, name: &str) -> Option<&DataRegion> {
        self.data.iter().find(|r| r.name == name)
    }

    pub fn region_mut(&mut self, name: &str) -> Option<&mut DataRegion> {
        self.data.iter_mut().find(|r| r.name == name)
    }

    /// Builds a straight-line program from bare operations.
    pub fn from_ops(ops: impl IntoIterator<Item = Op>) -> Program {
        Program {
            text: ops
                .into_iter()
                .enumerate()
                .map(|(i, op)| Instruction::new(op, i + 1))
                .collect(),
            ..Program::default()
        }
    }

    /// Inserts instructions at `index`, shifting labels that point past it.
    pub fn insert(&mut self, index: usize, instrs: Vec<Instruction>) {
        let n = instrs.len();
        self.text.splice(index..index, instrs);
        for target in self.labels.values_mut() {
            if *target > index {
                *target += n;
            }
        }
    }

    /// Replaces the instruction at `index` with a sequence.
    pub fn replace(&mut self, index: usize, instrs: Vec<Instruction>) {
        let n = instrs.len();
        self.text.splice(index..index + 1, instrs);
        if n > 1 {
            for target in self.labels.values_mut() {
                if *target > index {
                    *target += n - 1;
                }
            }
        }
    }

    /// Equality ignoring source line numbers.
    pub fn same_structure(&self, other: &Program) -> bool {
        self.labels == other.labels
            && self.data == other.data
            && self.uses_mask_register == other.uses_mask_register
            && self.text.len() == other.text.len()
            && self
                .text
                .iter()
                .zip(&other.text)
                .all(|(a, b)| a.op == b.op && a.provenance == b.provenance)
    }

    /// Drops every rule-inserted instruction. Only meaningful for programs
    /// rewritten by insertion-only rules.
    pub fn strip_inserted(&self) -> Program {
        let mut out = self.clone();
        let mut keep = Vec::new();
        let mut remap = vec![0usize; self.text.len() + 1];
        for (i, ins) in self.text.iter().enumerate() {
            remap[i] = keep.len();
            if !ins.is_inserted() {
                keep.push(ins.clone());
            }
        }
        remap[self.text.len()] = keep.len();
        out.text = keep;
        for target in out.labels.values_mut() {
            *target = remap[*target];
        }
        out
    }

    /// Checks the structural invariants: label targets, branch targets,
    /// region layout and mask-register use.
    pub fn validate(&self) -> Result<(), ParseError> {
        for (name, &idx) in &self.labels {
            if idx > self.text.len() {
                return Err(ParseError::UnresolvedLabel {
                    line: 0,
                    label: name.clone(),
                });
            }
        }
        for ins in &self.text {
            if let Op::Branch { target, .. } = &ins.op {
                if !self.labels.contains_key(target) {
                    return Err(ParseError::UnresolvedLabel {
                        line: ins.source_line,
                        label: target.clone(),
                    });
                }
            }
            parse::check_operands(&ins.op, ins.source_line)?;
            if !self.uses_mask_register
                && !ins.is_inserted()
                && ins.op.registers().contains(&MASK_REG)
            {
                return Err(ParseError::MaskRegisterReserved {
                    line: ins.source_line,
                });
            }
        }
        parse::check_regions(&self.data)
    }
}
