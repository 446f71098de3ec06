use stopbound_core::conditions::{applicability, check_condition, CheckSettings, ConditionTag, Verdict};
use stopbound_core::examples::{build_example, default_region, ExampleId, ExampleName};

fn verdict(id: ExampleId, tag: ConditionTag) -> (Verdict, usize) {
    let ex = build_example(&id).unwrap();
    let r = check_condition(&ex.spec, tag, &default_region(&ex), &CheckSettings::default()).unwrap();
    (r.verdict, r.witnesses.len())
}

#[test]
fn example1_meets_the_one_dimensional_hypotheses() {
    for tag in [ConditionTag::A, ConditionTag::C, ConditionTag::D] {
        assert_eq!(verdict(ExampleId::new(ExampleName::Example1), tag), (Verdict::HoldsOnSample, 0), "{tag}");
    }
}

#[test]
fn free_terminal_cost_breaks_second_alternative() {
    let id = ExampleId::new(ExampleName::Example1).with("c2", 0.0);
    let (v, w) = verdict(id, ConditionTag::Cor32Ii);
    assert_eq!(v, Verdict::Violated);
    assert!(w > 0);
}

#[test]
fn multidimensional_examples_meet_their_structure_conditions() {
    assert_eq!(verdict(ExampleId::new(ExampleName::Example2a), ConditionTag::G), (Verdict::HoldsOnSample, 0));
    for tag in [ConditionTag::F, ConditionTag::G] {
        assert_eq!(verdict(ExampleId::new(ExampleName::Example2b), tag), (Verdict::HoldsOnSample, 0), "{tag}");
    }
}

#[test]
fn applicability_of_example1() {
    let ex = build_example(&ExampleId::new(ExampleName::Example1)).unwrap();
    let region = default_region(&ex);
    let reports: Vec<_> = ConditionTag::ALL
        .into_iter()
        .map(|t| check_condition(&ex.spec, t, &region, &CheckSettings::default()).unwrap())
        .collect();
    let a = applicability(1, true, &reports);
    assert!(a.lipschitz_1d && !a.custom_path);
}
