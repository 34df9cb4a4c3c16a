use augsearch::controller::{
    normalize_rewards, ppo_update, reinforce_update, ControllerArch, ControllerState, NUM_OPS,
};
use augsearch::nets::grad_check;
use augsearch::transform::OpKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> ControllerArch {
    ControllerArch {
        hidden: 4,
        embed: 5,
        resolution: 6,
        subpolicies: 2,
        ops_per_subpolicy: 2,
        ..ControllerArch::default()
    }
}

#[test]
fn initial_operation_choices_are_uniform() {
    let st = ControllerState::new(ControllerArch::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0u64; NUM_OPS];
    let mut n = 0u64;
    while n < 100_000 {
        let tr = st.sample(&mut rng);
        for t in (0..tr.tokens.len()).step_by(2) {
            counts[tr.tokens[t]] += 1;
            n += 1;
        }
    }
    let p = 0.1;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (op, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - n as f64 * p).abs();
        assert!(dev <= 5.0 * sigma, "op {op}: {c} of {n}");
    }
}

#[test]
fn log_prob_gradients_match_over_random_draws() {
    for draw in 0..10u64 {
        let mut st = ControllerState::new(mini(), draw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + draw);
        for p in st.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let tr = st.sample(&mut rng);
        let err = grad_check(
            |p| st.log_prob_grad_at(p, &tr.tokens).unwrap(),
            st.params(),
            1e-6,
            50,
            draw,
        );
        assert!(err < 1e-3, "draw {draw}: {err}");
    }
}

#[test]
fn same_seed_gives_same_policies_and_trajectory() {
    let run = || {
        let mut st = ControllerState::new(mini(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut policies = Vec::new();
        for _ in 0..5 {
            let batch = st.sample_policies(4, &mut rng).unwrap();
            let rewards: Vec<f64> = (0..4).map(|i| i as f64 * 0.1 + rng.random::<f64>()).collect();
            let traces: Vec<_> = batch.iter().map(|(_, t)| t.clone()).collect();
            reinforce_update(&mut st, &traces, &rewards).unwrap();
            policies.extend(batch.into_iter().map(|(p, _)| p.to_json()));
        }
        (policies, st.params().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn two_armed_bandit_with_ppo() {
    let arch = ControllerArch {
        subpolicies: 1,
        ops_per_subpolicy: 1,
        ops: vec![OpKind::Invert, OpKind::Equalize],
        ..ControllerArch::default()
    };
    let mut st = ControllerState::new(arch, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arm1 = OpKind::Invert.index();
    let p_arm1 = |st: &ControllerState| -> f64 { st.first_pair_distribution()[arm1].iter().sum() };
    let mut reached = false;
    for _ in 0..200 {
        let traces: Vec<_> = (0..6).map(|_| st.sample(&mut rng)).collect();
        let rewards: Vec<f64> = traces
            .iter()
            .map(|t| if t.tokens[0] == arm1 { 1.0 } else { 0.0 })
            .collect();
        ppo_update(&mut st, &traces, &rewards, 0.2).unwrap();
        if p_arm1(&st) > 0.9 {
            reached = true;
            break;
        }
    }
    assert!(reached, "p(arm 1) = {}", p_arm1(&st));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn normalized_rewards_are_standard(raw in prop::collection::vec(-1e3f64..1e3, 6)) {
        prop_assume!(raw.iter().any(|&r| r != raw[0]));
        let n = normalize_rewards(&raw).unwrap();
        let mean = n.iter().sum::<f64>() / 6.0;
        let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}
