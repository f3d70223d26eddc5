use simnet_core::network::ParamGroup;
use simnet_core::selftest::{micro_input, micro_network};
use simnet_core::training::{grad_check, GradCheckOptions};

const GROUPS: [ParamGroup; 8] = [
    ParamGroup::Whiten,
    ParamGroup::Templates,
    ParamGroup::Weights,
    ParamGroup::Order,
    ParamGroup::PoolBeta,
    ParamGroup::ClassBeta,
    ParamGroup::Offsets,
    ParamGroup::GlobalBeta,
];

#[test]
fn micro_network_gradients_agree() {
    for seed in 0..3 {
        let report = grad_check(&micro_network(seed), &micro_input(seed), seed as usize % 3, &GradCheckOptions::default())
            .unwrap();
        assert!(report.passed(), "seed {seed}\n{}", report.render());
        for g in GROUPS {
            assert!(report.max_for(g).is_some(), "{g:?} not covered");
        }
    }
}

#[test]
fn corrupting_any_group_is_detected() {
    for g in GROUPS {
        let options = GradCheckOptions {
            corrupt: Some(g),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&micro_network(0), &micro_input(0), 1, &options).unwrap();
        assert!(!report.passed(), "{g:?}");
        assert!(report.failing().iter().all(|f| f.id.group == g), "{g:?}\n{}", report.render());
    }
}

#[test]
fn frozen_parameters_are_still_checked() {
    let mut spec = micro_network(1);
    spec.layers_mut()[0].order_trainable = false;
    spec.global_beta_trainable = false;
    let report = grad_check(&spec, &micro_input(1), 0, &GradCheckOptions::default()).unwrap();
    assert!(report.passed());
    assert!(report.max_for(ParamGroup::GlobalBeta).is_some());
}
