use super::*;
use crate::asm::{parse, Reg};
use crate::leakage::{Component, ModelConfig};

fn word_mask() -> Vec<MaskDecl> {
    vec![MaskDecl {
        name: "m".into(),
        kind: MaskKind::Word,
    }]
}

fn reg_reuse_spec(mask_b: &str, kind_b: MaskKind) -> CampaignSpec {
    let program = parse(".uses_mask_register\nmovs r3, r1\nmovs r7, r7\nmovs r3, r2\n").unwrap();
    let mut masks = word_mask();
    if mask_b != "m" {
        masks.push(MaskDecl {
            name: mask_b.into(),
            kind: kind_b,
        });
    }
    let binding = InputBinding {
        input_len: 8,
        masks,
        regions: vec![],
        regs: vec![
            (Reg::r(1), RegValue::Input { start: 0, mask: Some("m".into()) }),
            (Reg::r(2), RegValue::Input { start: 4, mask: Some(mask_b.into()) }),
        ],
    };
    let mut spec = CampaignSpec::new(program, binding, random_inputs(8, 1, 5));
    spec.n_traces = 10_000;
    spec.seed = 11;
    spec
}

#[test]
fn shared_mask_register_reuse_is_flagged() {
    let spec = reg_reuse_spec("m", MaskKind::Word);
    let report = run_campaign(&spec, &ModelConfig::default()).unwrap();
    let slot = &report.slots[2];
    assert!(slot.t(Component::T_DEST).abs() > 4.5, "{}", slot.t(Component::T_DEST));
    assert_eq!(slot.cause, Cause::RegisterOverwrite);
    assert!(!report.slots[0].is_flagged());
    assert!(!report.slots[1].is_flagged());
    assert_eq!((slot.n_fixed, slot.n_random), (5_000, 5_000));
}

#[test]
fn independent_masks_do_not_leak() {
    let spec = reg_reuse_spec("m2", MaskKind::Word);
    let report = run_campaign(&spec, &ModelConfig::default()).unwrap();
    assert_eq!(report.flagged_count(), 0, "max |t| {}", report.max_abs_t());
}

#[test]
fn campaigns_are_deterministic() {
    let spec = reg_reuse_spec("m", MaskKind::Word);
    let a = run_campaign(&spec, &ModelConfig::default().with_noise(1.0)).unwrap();
    let b = run_campaign(&spec, &ModelConfig::default().with_noise(1.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn labels_are_balanced() {
    let l = class_labels(1000, 3, 0);
    assert_eq!(l.iter().filter(|&&x| x).count(), 500);
    assert_ne!(l, class_labels(1000, 4, 0));
}

#[test]
fn data_dependent_branch_is_rejected() {
    let program = parse("cmp r1, #0\nbeq done\nmovs r2, #1\ndone:\nnop").unwrap();
    let binding = InputBinding {
        input_len: 4,
        regs: vec![(Reg::r(1), RegValue::Input { start: 0, mask: None })],
        ..InputBinding::default()
    };
    let mut spec = CampaignSpec::new(program, binding, vec![vec![0; 4]]);
    spec.n_traces = 100;
    assert!(matches!(
        run_campaign(&spec, &ModelConfig::default()),
        Err(CampaignError::DivergentControlFlow { .. })
    ));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = reg_reuse_spec("m", MaskKind::Word);
    spec.n_traces = 101;
    assert!(matches!(spec.validate(), Err(CampaignError::InvalidSpec(_))));
    let mut spec = reg_reuse_spec("m", MaskKind::Word);
    spec.threshold = 0.0;
    assert!(spec.validate().is_err());
    let mut spec = reg_reuse_spec("m", MaskKind::Word);
    spec.binding.regs.push((Reg::r(7), RegValue::Const(1)));
    assert!(matches!(spec.validate(), Err(CampaignError::Binding(_))));
}

#[test]
fn aggregate_flags_union_of_inputs() {
    let mut spec = reg_reuse_spec("m", MaskKind::Word);
    spec.fixed_inputs = random_inputs(8, 3, 99);
    spec.n_traces = 2_000;
    let ops: Vec<_> = spec.program.text.iter().map(|i| i.op.clone()).collect();
    let singles: Vec<_> = (0..3).map(|k| run_single(&spec, &ModelConfig::default(), k).unwrap()).collect();
    let agg = aggregate_max(&singles, &ops).unwrap();
    for (i, s) in agg.slots.iter().enumerate() {
        assert_eq!(s.is_flagged(), singles.iter().any(|r| r.slots[i].is_flagged()));
    }
}
