//! Architectural semantics of the Thumb subset: registers, flags and a
//! little-endian, region-backed memory.

use thiserror::Error;

use crate::asm::{AluOp, Cond, Op, Program, ShiftOp, Width, SP};

/// Default stack placement. The stack grows down from `STACK_BASE + STACK_SIZE`.
pub const STACK_BASE: u32 = 0x2000_0000;
pub const STACK_SIZE: u32 = 0x400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("unaligned {width}-byte access at {addr:#010x}")]
    Unaligned { addr: u32, width: u32 },
    #[error("access to unmapped or uninitialized memory at {addr:#010x}")]
    Unmapped { addr: u32 },
    #[error("stack pointer {sp:#010x} left the stack region")]
    StackOverflow { sp: u32 },
    #[error("pc {pc} out of range")]
    PcOutOfRange { pc: usize },
    #[error("exceeded {max_steps} steps")]
    MaxSteps { max_steps: usize },
    #[error("slot {slot}: {source}")]
    AtSlot {
        slot: usize,
        #[source]
        source: Box<ExecError>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl Region {
    fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && (addr as u64 + len as u64) <= self.base as u64 + self.bytes.len() as u64
    }
}

/// Assembles a word from its four little-endian bytes. Every byte-lane
/// decision in the crate goes through this function and [`word_bytes`].
pub fn compose_word(bytes: [u8; 4]) -> u32 {
    u32::from_le_bytes(bytes)
}

pub fn word_bytes(word: u32) -> [u8; 4] {
    word.to_le_bytes()
}

/// Sparse memory made of disjoint initialized regions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<Region>,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    pub fn add_region(&mut self, name: impl Into<String>, base: u32, bytes: Vec<u8>) {
        self.regions.push(Region {
            name: name.into(),
            base,
            bytes,
        });
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn regions_mut(&mut self) -> impl Iterator<Item = &mut Region> {
        self.regions.iter_mut()
    }

    pub fn region_mut(&mut self, name: &str) -> Option<&mut Region> {
        self.regions.iter_mut().find(|r| r.name == name)
    }

    fn locate(&self, addr: u32, len: u32) -> Result<(usize, usize), ExecError> {
        self.regions
            .iter()
            .position(|r| r.contains(addr, len))
            .map(|i| (i, (addr - self.regions[i].base) as usize))
            .ok_or(ExecError::Unmapped { addr })
    }

    pub fn read(&self, addr: u32, width: Width) -> Result<u32, ExecError> {
        let n = width.bytes();
        if addr % n != 0 {
            return Err(ExecError::Unaligned { addr, width: n });
        }
        let (r, off) = self.locate(addr, n)?;
        let mut bytes = [0u8; 4];
        bytes[..n as usize].copy_from_slice(&self.regions[r].bytes[off..off + n as usize]);
        Ok(compose_word(bytes))
    }

    pub fn write(&mut self, addr: u32, width: Width, value: u32) -> Result<(), ExecError> {
        let n = width.bytes();
        if addr % n != 0 {
            return Err(ExecError::Unaligned { addr, width: n });
        }
        let (r, off) = self.locate(addr, n)?;
        let bytes = word_bytes(value);
        self.regions[r].bytes[off..off + n as usize].copy_from_slice(&bytes[..n as usize]);
        Ok(())
    }

    /// The aligned word containing `addr`, if all four bytes are mapped.
    pub fn aligned_word(&self, addr: u32) -> Result<u32, ExecError> {
        self.read(addr & !3, Width::Word)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub mem: Memory,
    pub pc: usize,
    pub cycle_count: u64,
    pub stack_base: u32,
    pub stack_top: u32,
}

impl MachineState {
    /// Zeroed registers, the program's data regions and an empty stack.
    pub fn for_program(program: &Program) -> Self {
        let mut mem = Memory::new();
        for region in &program.data {
            mem.add_region(region.name.clone(), region.base, region.bytes.clone());
        }
        mem.add_region("stack", STACK_BASE, vec![0; STACK_SIZE as usize]);
        let mut regs = [0u32; 16];
        regs[SP.index()] = STACK_BASE + STACK_SIZE;
        MachineState {
            regs,
            flags: Flags::default(),
            mem,
            pc: 0,
            cycle_count: 0,
            stack_base: STACK_BASE,
            stack_top: STACK_BASE + STACK_SIZE,
        }
    }

    pub fn sp(&self) -> u32 {
        self.regs[SP.index()]
    }
}

/// A memory access performed by one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemEffect {
    pub addr: u32,
    pub width: Width,
    pub is_store: bool,
    /// Value moved between register and memory, truncated to the access width.
    pub data: u32,
    /// Aligned word containing `addr`, before and after the access.
    pub old_word: u32,
    pub new_word: u32,
}

/// Everything one executed instruction read and wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRecord {
    /// Dynamic instruction index.
    pub slot: usize,
    /// Static index into the program text.
    pub index: usize,
    pub op1: u32,
    pub op2: u32,
    pub result: Option<u32>,
    pub dest_old: Option<u32>,
    pub mem: Option<MemEffect>,
    pub regs_before: [u32; 16],
}

fn nz(flags: &mut Flags, v: u32) {
    flags.n = (v as i32) < 0;
    flags.z = v == 0;
}

fn add_with_flags(flags: &mut Flags, a: u32, b: u32) -> u32 {
    let (r, carry) = a.overflowing_add(b);
    nz(flags, r);
    flags.c = carry;
    flags.v = (a as i32).overflowing_add(b as i32).1;
    r
}

fn sub_with_flags(flags: &mut Flags, a: u32, b: u32) -> u32 {
    let r = a.wrapping_sub(b);
    nz(flags, r);
    flags.c = a >= b;
    flags.v = (a as i32).overflowing_sub(b as i32).1;
    r
}

fn shift_left(flags: &mut Flags, v: u32, amount: u32) -> u32 {
    let r = match amount {
        0 => v,
        1..=31 => {
            flags.c = (v >> (32 - amount)) & 1 == 1;
            v << amount
        }
        32 => {
            flags.c = v & 1 == 1;
            0
        }
        _ => {
            flags.c = false;
            0
        }
    };
    nz(flags, r);
    r
}

fn shift_right(flags: &mut Flags, v: u32, amount: u32) -> u32 {
    let r = match amount {
        0 => v,
        1..=31 => {
            flags.c = (v >> (amount - 1)) & 1 == 1;
            v >> amount
        }
        32 => {
            flags.c = v >> 31 == 1;
            0
        }
        _ => {
            flags.c = false;
            0
        }
    };
    nz(flags, r);
    r
}

fn rotate_right(flags: &mut Flags, v: u32, amount: u32) -> u32 {
    let r = if amount == 0 {
        v
    } else {
        let r = v.rotate_right(amount & 31);
        flags.c = r >> 31 == 1;
        r
    };
    nz(flags, r);
    r
}

fn alu(op: AluOp, flags: &mut Flags, a: u32, b: u32) -> u32 {
    let r = match op {
        AluOp::Eors => a ^ b,
        AluOp::Ands => a & b,
        AluOp::Bics => a & !b,
        AluOp::Orrs => a | b,
        AluOp::Movs => b,
        AluOp::Muls => a.wrapping_mul(b),
        AluOp::Adds => return add_with_flags(flags, a, b),
        AluOp::Subs | AluOp::Cmps => return sub_with_flags(flags, a, b),
        AluOp::Lsls => return shift_left(flags, a, b & 0xff),
        AluOp::Lsrs => return shift_right(flags, a, b & 0xff),
        AluOp::Rors => return rotate_right(flags, a, b & 0xff),
    };
    nz(flags, r);
    r
}

fn check_sp(state: &MachineState, sp: u32) -> Result<(), ExecError> {
    if sp < state.stack_base || sp > state.stack_top {
        Err(ExecError::StackOverflow { sp })
    } else {
        Ok(())
    }
}

fn mem_access(
    state: &mut MachineState,
    addr: u32,
    width: Width,
    store: Option<u32>,
) -> Result<MemEffect, ExecError> {
    if addr % width.bytes() != 0 {
        return Err(ExecError::Unaligned {
            addr,
            width: width.bytes(),
        });
    }
    let old_word = state.mem.aligned_word(addr)?;
    let data = match store {
        Some(v) => {
            let mask = match width {
                Width::Byte => 0xff,
                Width::Half => 0xffff,
                Width::Word => u32::MAX,
            };
            state.mem.write(addr, width, v & mask)?;
            v & mask
        }
        None => state.mem.read(addr, width)?,
    };
    let new_word = state.mem.aligned_word(addr)?;
    Ok(MemEffect {
        addr,
        width,
        is_store: store.is_some(),
        data,
        old_word,
        new_word,
    })
}

/// Executes the instruction at `state.pc`.
pub fn step(state: &mut MachineState, program: &Program) -> Result<ExecRecord, ExecError> {
    let index = state.pc;
    let instr = program
        .text
        .get(index)
        .ok_or(ExecError::PcOutOfRange { pc: index })?;
    let regs_before = state.regs;
    let r = |reg: crate::asm::Reg| regs_before[reg.index()];
    let mut next_pc = index + 1;
    let mut rec = ExecRecord {
        slot: state.cycle_count as usize,
        index,
        op1: 0,
        op2: 0,
        result: None,
        dest_old: None,
        mem: None,
        regs_before,
    };
    let mut write: Option<(crate::asm::Reg, u32)> = None;
    let flags = &mut state.flags;

    match &instr.op {
        Op::Alu { op, rd, rm } => {
            rec.op1 = r(*rd);
            rec.op2 = r(*rm);
            let v = alu(*op, flags, rec.op1, rec.op2);
            if op.writes_dest() {
                write = Some((*rd, v));
            }
        }
        Op::MovImm { rd, imm } => {
            rec.op1 = r(*rd);
            rec.op2 = *imm;
            nz(flags, *imm);
            write = Some((*rd, *imm));
        }
        Op::AddImm { rd, rn, imm } => {
            rec.op1 = r(*rn);
            rec.op2 = *imm;
            write = Some((*rd, add_with_flags(flags, rec.op1, *imm)));
        }
        Op::SubImm { rd, rn, imm } => {
            rec.op1 = r(*rn);
            rec.op2 = *imm;
            write = Some((*rd, sub_with_flags(flags, rec.op1, *imm)));
        }
        Op::CmpImm { rn, imm } => {
            rec.op1 = r(*rn);
            rec.op2 = *imm;
            sub_with_flags(flags, rec.op1, *imm);
        }
        Op::ShiftImm { op, rd, rm, imm } => {
            rec.op1 = r(*rm);
            rec.op2 = *imm;
            let v = match op {
                ShiftOp::Lsls => shift_left(flags, rec.op1, *imm),
                ShiftOp::Lsrs => shift_right(flags, rec.op1, *imm),
            };
            write = Some((*rd, v));
        }
        Op::Load {
            width,
            rd,
            base,
            offset,
        } => {
            rec.op1 = r(*base);
            rec.op2 = *offset;
            let eff = mem_access(state, rec.op1.wrapping_add(*offset), *width, None)?;
            write = Some((*rd, eff.data));
            rec.mem = Some(eff);
        }
        Op::Store {
            width,
            rs,
            base,
            offset,
        } => {
            rec.op1 = r(*base);
            rec.op2 = *offset;
            let eff = mem_access(state, rec.op1.wrapping_add(*offset), *width, Some(r(*rs)))?;
            rec.mem = Some(eff);
        }
        Op::Push(reg) => {
            let sp = state.sp().wrapping_sub(4);
            check_sp(state, sp)?;
            rec.op1 = sp;
            rec.op2 = r(*reg);
            rec.mem = Some(mem_access(state, sp, Width::Word, Some(rec.op2))?);
            state.regs[SP.index()] = sp;
        }
        Op::Pop(reg) => {
            let sp = state.sp();
            check_sp(state, sp.wrapping_add(4))?;
            let eff = mem_access(state, sp, Width::Word, None)?;
            rec.op1 = sp;
            rec.op2 = eff.data;
            rec.mem = Some(eff);
            state.regs[SP.index()] = sp + 4;
            write = Some((*reg, eff.data));
        }
        Op::Branch { cond, target } => {
            let taken = match cond {
                Cond::Always => true,
                Cond::Eq => state.flags.z,
                Cond::Ne => !state.flags.z,
            };
            if taken {
                next_pc = *program
                    .labels
                    .get(target)
                    .ok_or(ExecError::PcOutOfRange { pc: usize::MAX })?;
            }
        }
        Op::Nop => {}
    }

    if let Some((reg, v)) = write {
        rec.dest_old = Some(state.regs[reg.index()]);
        rec.result = Some(v);
        state.regs[reg.index()] = v;
    }
    state.pc = next_pc;
    state.cycle_count += 1;
    Ok(rec)
}

/// Runs until execution falls off the end of the program.
pub fn run(
    program: &Program,
    init: MachineState,
    max_steps: usize,
) -> Result<(MachineState, Vec<ExecRecord>), ExecError> {
    let mut state = init;
    let mut records = Vec::with_capacity(program.len());
    while state.pc < program.len() {
        if records.len() >= max_steps {
            return Err(ExecError::MaxSteps { max_steps });
        }
        let slot = records.len();
        let rec = step(&mut state, program).map_err(|e| ExecError::AtSlot {
            slot,
            source: Box::new(e),
        })?;
        records.push(rec);
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    fn exec(src: &str, setup: impl FnOnce(&mut MachineState)) -> (MachineState, Vec<ExecRecord>) {
        let p = parse(src).unwrap();
        let mut s = MachineState::for_program(&p);
        setup(&mut s);
        run(&p, s, 1000).unwrap()
    }

    #[test]
    fn eors_combines_nibbles() {
        let (s, _) = exec("eors r3, r4", |s| {
            s.regs[3] = 0xF0;
            s.regs[4] = 0x0F;
        });
        assert_eq!(s.regs[3], 0xFF);
        assert!(!s.flags.z);
    }

    #[test]
    fn rors_by_eight_moves_low_byte_to_top() {
        let (s, _) = exec("rors r2, r3", |s| {
            s.regs[2] = 0x0000_00FF;
            s.regs[3] = 8;
        });
        assert_eq!(s.regs[2], 0xFF00_0000);
    }

    #[test]
    fn strb_writes_top_byte_of_little_endian_word() {
        let src = ".data w 0x300\n.word 0x11223344\n.text\nstrb r5, [r3]";
        let (s, recs) = exec(src, |s| {
            s.regs[3] = 0x303;
            s.regs[5] = 0xAB;
        });
        // independent composition: byte 3 is bits 31..24
        let expected = (0xABu32 << 24) | (0x11223344 & 0x00FF_FFFF);
        assert_eq!(s.mem.read(0x300, Width::Word).unwrap(), expected);
        assert_eq!(expected, 0xAB223344);
        let eff = recs[0].mem.unwrap();
        assert_eq!(eff.old_word, 0x11223344);
        assert_eq!(eff.new_word, 0xAB223344);
    }

    #[test]
    fn branch_skips_instruction() {
        let (s, recs) = exec("movs r1, #1\nb skip\nmovs r1, #2\nskip:\nmovs r2, #3", |_| {});
        assert_eq!(recs.len(), 3);
        assert_eq!(s.regs[1], 1);
        assert_eq!(s.cycle_count, 3);
        assert!(recs.iter().all(|r| r.index != 2));
    }

    #[test]
    fn bne_loop_counts_down() {
        let (s, recs) = exec("movs r1, #3\nloop:\nsubs r1, #1\nbne loop", |_| {});
        assert_eq!(s.regs[1], 0);
        assert_eq!(recs.len(), 1 + 3 * 2);
    }

    #[test]
    fn unaligned_word_load_is_an_error() {
        let p = parse(".data d 0x100\n.word 1, 2\n.text\nldr r1, [r2]").unwrap();
        let mut s = MachineState::for_program(&p);
        s.regs[2] = 0x102;
        let err = run(&p, s, 10).unwrap_err();
        assert!(matches!(
            err,
            ExecError::AtSlot { slot: 0, ref source } if matches!(**source, ExecError::Unaligned { .. })
        ));
    }

    #[test]
    fn uninitialized_memory_is_an_error() {
        let p = parse("ldr r1, [r2]").unwrap();
        let mut s = MachineState::for_program(&p);
        s.regs[2] = 0x8000;
        assert!(run(&p, s, 10).is_err());
    }

    #[test]
    fn max_steps_is_enforced() {
        let p = parse("loop:\nb loop").unwrap();
        let s = MachineState::for_program(&p);
        assert_eq!(run(&p, s, 5).unwrap_err(), ExecError::MaxSteps { max_steps: 5 });
    }

    #[test]
    fn push_pop_round_trip_restores_sp() {
        let (s, recs) = exec("push {r4}\npop {r5}", |s| s.regs[4] = 0xdead_beef);
        assert_eq!(s.regs[5], 0xdead_beef);
        assert_eq!(s.sp(), STACK_BASE + STACK_SIZE);
        assert_eq!(recs[0].mem.unwrap().addr, STACK_BASE + STACK_SIZE - 4);
    }

    #[test]
    fn multi_register_push_expands_in_order() {
        let (s, _) = exec("push {r4, r5}\npop {r1, r2}", |s| {
            s.regs[4] = 4;
            s.regs[5] = 5;
        });
        assert_eq!((s.regs[1], s.regs[2]), (4, 5));
    }

    #[test]
    fn stack_overflow_detected() {
        let p = parse("pop {r1}").unwrap();
        let s = MachineState::for_program(&p);
        assert!(run(&p, s, 10).is_err());
    }

    #[test]
    fn records_capture_overwritten_destination() {
        let (_, recs) = exec("movs r3, r4", |s| {
            s.regs[3] = 0x55;
            s.regs[4] = 0xAA;
        });
        assert_eq!(recs[0].dest_old, Some(0x55));
        assert_eq!(recs[0].result, Some(0xAA));
        assert_eq!((recs[0].op1, recs[0].op2), (0x55, 0xAA));
    }

    const SHIFTROWS: &str = "ldr  r4, [ r1, #4 ]
rors r4, r5
str  r4, [ r1, #4 ]
ldr  r4, [ r1, #8 ]
rors r4, r6
str  r4, [ r1, #8 ]
ldr  r4, [ r1, #12 ]
rors r4, r3
str  r4, [ r1, #12 ]
";

    #[test]
    fn shiftrows_rotates_rows() {
        let src = format!(".data state 0x1000\n.space 16\n.text\n{SHIFTROWS}");
        let state: Vec<u8> = (0u8..16).map(|i| i.wrapping_mul(37) ^ 0x5a).collect();
        let p = parse(&src).unwrap();
        let mut s = MachineState::for_program(&p);
        s.mem.region_mut("state").unwrap().bytes.copy_from_slice(&state);
        s.regs[1] = 0x1000;
        s.regs[5] = 8;
        s.regs[6] = 16;
        s.regs[3] = 24;
        let (end, recs) = run(&p, s, 100).unwrap();
        assert_eq!(recs.len(), 9);
        let out = &end.mem.region("state").unwrap().bytes;
        assert_eq!(&out[..4], &state[..4]);
        for (row, amount) in [(1usize, 1usize), (2, 2), (3, 3)] {
            for j in 0..4 {
                // rotating right by 8k moves byte j + k into lane j
                assert_eq!(out[4 * row + j], state[4 * row + (j + amount) % 4]);
            }
        }
    }

    fn reference_flags(a: u32, b: u32, sub: bool) -> (u32, Flags) {
        let (wide, signed) = if sub {
            (a as u64 + (!b) as u64 + 1, a as i32 as i64 - b as i32 as i64)
        } else {
            (a as u64 + b as u64, a as i32 as i64 + b as i32 as i64)
        };
        let r = wide as u32;
        let flags = Flags {
            n: r >> 31 == 1,
            z: r == 0,
            c: wide >> 32 != 0,
            v: signed != r as i32 as i64,
        };
        (r, flags)
    }

    #[test]
    fn add_sub_flags_match_wide_arithmetic() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(1);
        for i in 0..1_000_000u32 {
            let (a, b): (u32, u32) = match i % 4 {
                0 => (rng.random(), rng.random()),
                1 => (rng.random::<u32>() | 0x8000_0000, rng.random::<u32>() | 0x8000_0000),
                2 => (rng.random::<u32>() & 0x7fff_ffff, rng.random::<u32>() & 0x7fff_ffff),
                _ => {
                    let a = rng.random::<u32>();
                    (a, if rng.random() { a } else { a.wrapping_neg() })
                }
            };
            for sub in [false, true] {
                let mut f = Flags::default();
                let r = if sub { sub_with_flags(&mut f, a, b) } else { add_with_flags(&mut f, a, b) };
                assert_eq!((r, f), reference_flags(a, b, sub), "a={a:#x} b={b:#x} sub={sub}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn narrow_stores_touch_only_their_bytes(init in proptest::collection::vec(proptest::prelude::any::<u8>(), 16),
                                                lane in 0u32..16, v: u32, half: bool) {
            let (mnemonic, width) = if half { ("strh", 2u32) } else { ("strb", 1u32) };
            let addr = 0x200 + (lane & !(width - 1));
            let src = format!(".data d 0x200\n.space 16\n.text\n{mnemonic} r1, [r2]");
            let p = parse(&src).unwrap();
            let mut s = MachineState::for_program(&p);
            s.mem.region_mut("d").unwrap().bytes.copy_from_slice(&init);
            s.regs[1] = v;
            s.regs[2] = addr;
            let (end, _) = run(&p, s, 10).unwrap();
            let out = &end.mem.region("d").unwrap().bytes;
            for i in 0..16u32 {
                let off = i.wrapping_sub(addr - 0x200);
                let expect = if off < width { (v >> (8 * off)) as u8 } else { init[i as usize] };
                proptest::prop_assert_eq!(out[i as usize], expect);
            }
        }
    }
}
