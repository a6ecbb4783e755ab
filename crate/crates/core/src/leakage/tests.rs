use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::*;
use crate::asm::parse;

fn popcount_loop(mut x: u32) -> u32 {
    let mut n = 0;
    while x != 0 {
        n += x & 1;
        x >>= 1;
    }
    n
}

fn unit_config() -> ModelConfig {
    let mut cfg = ModelConfig::zero();
    for g in Group::MODELED {
        for c in Component::all() {
            cfg.set(g, c, 1.0);
        }
    }
    cfg
}

fn samples_for(src: &str, setup: impl FnOnce(&mut MachineState)) -> Vec<PowerSample> {
    let p = parse(src).unwrap();
    let mut s = MachineState::for_program(&p);
    setup(&mut s);
    emulate_power(&p, s, &ModelConfig::default(), 1).unwrap()
}

const LISTING1: &str = ".uses_mask_register
.data cell 0x100
.word 0
.text
str  r1, [r2]
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
movs r7, r7
eors r3, r4
";

const LISTING3: &str = ".uses_mask_register
.data lo 0x300
.word 0
.data hi 0x400
.word 0
.text
movs r7, r7
movs r7, r7
movs r7, r7
strb r5, [r3]
movs r7, r7
movs r7, r7
movs r7, r7
ldrb r6, [r4]
movs r7, r7
movs r7, r7
movs r7, r7
";

fn listing4(with_tail_spacers: bool) -> String {
    let mut s = String::from(
        ".uses_mask_register\n.data cell 0x100\n.word 0\n.text\n\
         str  r5, [r3]\nmovs r7, r7\nmovs r7, r7\nmovs r7, r7\nmovs r5, r2\n",
    );
    if with_tail_spacers {
        s.push_str("movs r7, r7\nmovs r7, r7\nmovs r7, r7\n");
    }
    s.push_str("eors r1, r4\n");
    s
}

#[test]
fn hamming_examples() {
    assert_eq!(hw(0), 0);
    assert_eq!(hw(0xFF), 8);
    assert_eq!(hw(u32::MAX), 32);
    assert_eq!(hd(0xABCD, 0xABCD), 0);
    assert_eq!(hd(0b1010, 0b0110), 2);
    assert_eq!(hd(0x1234_5678, 0x8765_4321), popcount_loop(0x9551_1559));
    assert_eq!(0x1234_5678u32 ^ 0x8765_4321, 0x9551_1559);
}

proptest! {
    #[test]
    fn hw_matches_bit_loop(x: u32, y: u32) {
        prop_assert_eq!(hw(x), popcount_loop(x));
        prop_assert_eq!(hd(x, y), popcount_loop(x ^ y));
    }
}

#[test]
fn listing1_latch_sees_stored_register() {
    let mut rng = StdRng::seed_from_u64(9);
    for _ in 0..200 {
        let (r1, r3, r4, r7): (u32, u32, u32, u32) = rng.random();
        let s = samples_for(LISTING1, |m| {
            m.regs[1] = r1;
            m.regs[2] = 0x100;
            m.regs[3] = r3;
            m.regs[4] = r4;
            m.regs[7] = r7;
        });
        assert_eq!(s.len(), 11);
        assert_eq!(s[10].components[Component::T_LATCH], popcount_loop(r1 ^ r4) as f64);
    }
}

#[test]
fn listing3_bus_interaction_between_words() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..200 {
        let (lo, hi, r5, r7): (u32, u32, u32, u32) = rng.random();
        let p = parse(LISTING3).unwrap();
        let mut m = MachineState::for_program(&p);
        m.mem.write(0x300, Width::Word, lo).unwrap();
        m.mem.write(0x400, Width::Word, hi).unwrap();
        m.regs[3] = 0x303;
        m.regs[4] = 0x402;
        m.regs[5] = r5;
        m.regs[7] = r7;
        let s = emulate_power(&p, m, &ModelConfig::default(), 0).unwrap();
        let after_store = (lo & 0x00FF_FFFF) | ((r5 & 0xFF) << 24);
        assert_eq!(s[7].components[Component::T_BUS], popcount_loop(after_store ^ hi) as f64);
    }
}

#[test]
fn repeated_mask_access_has_no_operand_transition() {
    let s = samples_for(".uses_mask_register\nmovs r7, r7\nmovs r7, r7", |m| m.regs[7] = 0xDEAD_BEEF);
    assert_eq!(s[1].components[Component::T_OP2], 0.0);
}

#[test]
fn listing4_latch_value_tracks_register_update_with_delay() {
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..200 {
        let (r1, r2, r4, r5, r7): (u32, u32, u32, u32, u32) = rng.random();
        let setup = |m: &mut MachineState| {
            m.regs[1] = r1;
            m.regs[2] = r2;
            m.regs[3] = 0x100;
            m.regs[4] = r4;
            m.regs[5] = r5;
            m.regs[7] = r7;
        };
        let full = samples_for(&listing4(true), setup);
        assert_eq!(full[8].components[Component::T_LATCH], popcount_loop(r2 ^ r4) as f64);
        let short = samples_for(&listing4(false), setup);
        assert_eq!(short[5].components[Component::T_LATCH], popcount_loop(r5 ^ r4) as f64);
    }
}

#[test]
fn one_sample_per_instruction() {
    assert_eq!(samples_for(LISTING1, |m| m.regs[2] = 0x100).len(), 11);
}

#[test]
fn zero_model_totals_are_noise_draws() {
    let p = parse(LISTING1).unwrap();
    let mut m = MachineState::for_program(&p);
    m.regs[2] = 0x100;
    let cfg = ModelConfig::zero().with_noise(1.5);
    let s = emulate_power(&p, m, &cfg, 77).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let normal = Normal::new(0.0, 1.5).unwrap();
    for x in &s {
        assert_eq!(x.total, normal.sample(&mut rng));
    }
}

#[test]
fn unit_model_single_movs_immediate() {
    let p = parse("movs r1, #255").unwrap();
    let s = emulate_power(&p, MachineState::for_program(&p), &unit_config(), 0).unwrap();
    // op1 = old r1 = 0, op2 = 255, result 255:
    // W_op2 8, T_op2 8, X_ops 8, T_dest 8, W_result 8
    assert_eq!(s[0].components[Component::W_RESULT], 8.0);
    assert_eq!(s[0].total, 40.0);
}

#[test]
fn block_boundary_drops_lookahead() {
    let p = parse("movs r1, #1\nb next\nnext:\nldr r2, [r3]").unwrap();
    let la = lookahead_groups(&p);
    assert_eq!(la, vec![Some(Group::Neutral), None, None]);
}

#[test]
fn latch_pointer_takes_effect_two_slots_later() {
    let p = parse(".data c 0x100\n.word 0\n.text\nstr r1, [r2]\neors r3, r4\neors r3, r4").unwrap();
    let mut m = MachineState::for_program(&p);
    m.regs[2] = 0x100;
    let (_, recs) = machine::run(&p, m, 10).unwrap();
    let mut ls = LeakState::default();
    let la = lookahead_groups(&p);
    components(&recs[0], &p.text[0].op, &mut ls, la[0]);
    assert_eq!(ls.store_latch_ref, None);
    assert_eq!(ls.store_latch_pending, Some(Reg::r(1)));
    let at1 = components(&recs[1], &p.text[1].op, &mut ls, la[1]);
    assert_eq!(at1[Component::T_LATCH], 0.0);
    assert_eq!(ls.store_latch_ref, Some(Reg::r(1)));
    assert_eq!(ls.store_latch_pending, None);
}

fn random_alu_program(ops: &[(u8, u8, u8)]) -> Program {
    use crate::asm::AluOp;
    let mut src = String::from(".data c 0x100\n.word 0\n.text\n");
    for &(k, a, b) in ops {
        let (a, b) = (a % 7, b % 7);
        let line = match k % 6 {
            0 => format!("str r{a}, [r{}]", if b == a { (a + 1) % 7 } else { b }),
            1 => format!("ldrb r{a}, [r{}]", if b == a { (a + 1) % 7 } else { b }),
            _ => format!("{} r{a}, r{b}", AluOp::ALL[(k as usize) % 11].name()),
        };
        src.push_str(&line);
        src.push('\n');
    }
    parse(&src).unwrap()
}

fn random_state(p: &Program, seed: u64) -> MachineState {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut m = MachineState::for_program(p);
    for r in 0..7 {
        m.regs[r] = rng.random();
    }
    m
}

fn base_addresses(p: &Program, m: &mut MachineState) {
    for ins in &p.text {
        if let Op::Load { base, .. } | Op::Store { base, .. } = ins.op {
            m.regs[base.index()] = 0x100;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_a_group_scales_its_samples(
        ops in proptest::collection::vec((0u8..12, 0u8..7, 0u8..7), 1..12),
        seed: u64,
        factor in -4.0f64..4.0,
    ) {
        let p = random_alu_program(&ops);
        // keep base registers pointing at the cell for every access
        prop_assume!(p.text.iter().all(|i| match &i.op {
            Op::Load { base, .. } | Op::Store { base, .. } => !p.text.iter().any(|j| j.op.dest() == Some(*base)),
            _ => true,
        }));
        let mut m = random_state(&p, seed);
        base_addresses(&p, &mut m);
        let base = emulate_power(&p, m.clone(), &ModelConfig::default(), 0).unwrap();
        let mut scaled_cfg = ModelConfig::default();
        scaled_cfg.scale_group(Group::Alu, factor);
        let scaled = emulate_power(&p, m, &scaled_cfg, 0).unwrap();
        for (i, (a, b)) in base.iter().zip(&scaled).enumerate() {
            let g = Group::of(&p.text[i].op);
            let expect = if g == Group::Alu { a.total * factor } else { a.total };
            prop_assert!((b.total - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn previous_operands_shift_through(
        ops in proptest::collection::vec((2u8..12, 0u8..7, 0u8..7), 1..16),
        seed: u64,
    ) {
        let alu_only: Vec<_> = ops.iter().map(|&(k, a, b)| (if k % 6 < 2 { k + 2 } else { k }, a, b)).collect();
        let p = random_alu_program(&alu_only);
        let m = random_state(&p, seed);
        let (_, recs) = machine::run(&p, m, 100).unwrap();
        let la = lookahead_groups(&p);
        let mut ls = LeakState::default();
        for (i, r) in recs.iter().enumerate() {
            if i > 0 {
                prop_assert_eq!(ls.prev_op1, recs[i - 1].op1);
                prop_assert_eq!(ls.prev_op2, recs[i - 1].op2);
            }
            components(r, &p.text[r.index].op, &mut ls, la[r.index]);
        }
    }

    #[test]
    fn bus_word_persists_across_alu_spacers(a: u32, b: u32, r7: u32, n in 9usize..14) {
        let mut src = String::from(".uses_mask_register\n.data c 0x100\n.word 0\n.text\nstr r1, [r2]\n");
        for _ in 0..n {
            src.push_str("movs r7, r7\neors r3, r4\n");
        }
        src.push_str("ldr r5, [r2]\n");
        let p = parse(&src).unwrap();
        let mut m = MachineState::for_program(&p);
        m.regs[1] = a;
        m.regs[2] = 0x100;
        m.regs[4] = b;
        m.regs[7] = r7;
        let (_, recs) = machine::run(&p, m, 100).unwrap();
        let la = lookahead_groups(&p);
        let mut ls = LeakState::default();
        for r in &recs {
            components(r, &p.text[r.index].op, &mut ls, la[r.index]);
            prop_assert_eq!(ls.bus_word, a);
        }
    }

    #[test]
    fn byte_store_widens_to_aligned_word(old: u32, v: u8, lane in 0u32..4) {
        let word = (old & !(0xFF << (8 * lane))) | ((v as u32) << (8 * lane));
        let t_bus = |src: &str, rs: u32, addr: u32| {
            let p = parse(src).unwrap();
            let mut m = MachineState::for_program(&p);
            m.mem.write(0x100, Width::Word, old).unwrap();
            m.regs[1] = rs;
            m.regs[2] = addr;
            emulate_power(&p, m, &ModelConfig::default(), 0).unwrap()[0].components[Component::T_BUS]
        };
        let narrow = t_bus(".data c 0x100\n.word 0\n.text\nstrb r1, [r2]", v as u32, 0x100 + lane);
        let wide = t_bus(".data c 0x100\n.word 0\n.text\nstr r1, [r2]", word, 0x100);
        prop_assert_eq!(narrow, wide);
    }

    #[test]
    fn latch_reference_needs_two_slots(gap in 0usize..6) {
        let mut src = String::from(".data c 0x100\n.word 0\n.text\nstr r1, [r2]\n");
        for _ in 0..gap + 1 {
            src.push_str("eors r3, r4\n");
        }
        let p = parse(&src).unwrap();
        let mut m = MachineState::for_program(&p);
        m.regs[2] = 0x100;
        let (_, recs) = machine::run(&p, m, 100).unwrap();
        let la = lookahead_groups(&p);
        let mut ls = LeakState::default();
        for (i, r) in recs.iter().enumerate() {
            let before = ls.store_latch_ref;
            components(r, &p.text[r.index].op, &mut ls, la[r.index]);
            if i <= 1 {
                prop_assert_eq!(before, None);
            } else {
                prop_assert_eq!(before, Some(Reg::r(1)));
            }
        }
    }
}
