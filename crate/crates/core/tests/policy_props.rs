mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::PI;
use taco::policy::{init_policy, DropoutMask, PolicyLibrary};

/// Mean action recomputed from the raw layer weights.
fn direct_mean(policy: &taco::policy::SubPolicy, s: &[f64]) -> Vec<f64> {
    let layers = policy.action.layers();
    let mut h = s.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let mut out = Vec::with_capacity(layer.outputs());
        for o in 0..layer.outputs() {
            let mut z = layer.bias.data()[o];
            for (p, hv) in h.iter().enumerate() {
                z += hv * layer.weight.get(p, o);
            }
            out.push(if i + 1 < layers.len() { z.tanh() } else { z });
        }
        h = out;
    }
    h
}

#[test]
fn action_density_matches_closed_form() {
    let mut r = stream(21, "density");
    for seed in 0..50 {
        let policy = init_policy(4, 2, &[7], seed).unwrap();
        let s: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let a: Vec<f64> = (0..2).map(|_| r.random_range(-3.0..3.0)).collect();
        let mu = direct_mean(&policy, &s);
        let want: f64 = mu
            .iter()
            .zip(&a)
            .map(|(m, x)| ((-(x - m) * (x - m) / 2.0).exp() / (2.0 * PI).sqrt()).ln())
            .sum();
        assert!((policy.action_log_prob(&s, &a) - want).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn inverted_dropout_is_consistent_on_average() {
    let policy = init_policy(3, 2, &[8], 5).unwrap();
    let mut r = stream(22, "dropout");
    let s = [0.4, -0.7, 1.1];
    let full = policy.stop_prob(&s, &policy.ones_mask()).unwrap();
    let n = 10_000;
    let mut total = 0.0;
    for _ in 0..n {
        let m = DropoutMask::sample(policy.stop.hidden_units(), 0.5, &mut r);
        total += policy.stop_prob(&s, &m).unwrap();
    }
    assert!((total / n as f64 - full).abs() <= 0.05);
}

#[test]
fn sampled_actions_have_unit_gaussian_moments() {
    let policy = init_policy(3, 2, &[6], 9).unwrap();
    let mut r = stream(23, "sample");
    let s = [0.2, 0.5, -0.3];
    let mu = policy.mean_action(&s);
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let a = policy.sample_action(&s, &mut r);
        for j in 0..2 {
            sum[j] += a[j];
            sq[j] += a[j] * a[j];
        }
    }
    for j in 0..2 {
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        assert!((mean - mu[j]).abs() <= 0.02, "dim {j} mean {mean} want {}", mu[j]);
        assert!((var - 1.0).abs() <= 0.05, "dim {j} var {var}");
    }
}

#[test]
fn perturbing_one_policy_leaves_others_bit_identical() {
    let mut lib = PolicyLibrary::init(3, 3, 2, &[5], 4).unwrap();
    let s = [0.3, -0.1, 0.8];
    let a = [0.5, -0.5];
    let before: Vec<(u64, u64)> = lib
        .policies()
        .iter()
        .map(|p| {
            (
                p.action_log_prob(&s, &a).to_bits(),
                p.stop_prob(&s, &p.ones_mask()).unwrap().to_bits(),
            )
        })
        .collect();
    for w in lib.policy_mut(1).unwrap().parameters_mut() {
        for v in w.data_mut() {
            *v += 0.25;
        }
    }
    for k in [0, 2] {
        let p = lib.policy(k).unwrap();
        assert_eq!(p.action_log_prob(&s, &a).to_bits(), before[k].0);
        assert_eq!(p.stop_prob(&s, &p.ones_mask()).unwrap().to_bits(), before[k].1);
    }
    let p = lib.policy(1).unwrap();
    assert_ne!(p.action_log_prob(&s, &a).to_bits(), before[1].0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stop_probability_strictly_inside_unit_interval(
        seed in 0u64..1000,
        s in prop::collection::vec(-1e6f64..1e6, 3),
        rate in 0.0f64..0.9,
    ) {
        let policy = init_policy(3, 2, &[10], seed).unwrap();
        let mut r = stream(seed, "stop-range");
        let m = DropoutMask::sample(policy.stop.hidden_units(), rate, &mut r);
        for mask in [policy.ones_mask(), m] {
            let p = policy.stop_prob(&s, &mask).unwrap();
            prop_assert!(p > 0.0 && p < 1.0, "{}", p);
        }
    }

    #[test]
    fn log_density_peaks_at_the_mean(seed in 0u64..1000, s in prop::collection::vec(-2.0f64..2.0, 3)) {
        let policy = init_policy(3, 2, &[6], seed).unwrap();
        let mu = policy.mean_action(&s);
        let best = policy.action_log_prob(&s, &mu);
        for dim in 0..2 {
            for i in -20..=20 {
                if i == 0 {
                    continue;
                }
                let mut a = mu.clone();
                a[dim] += i as f64 * 0.05;
                prop_assert!(policy.action_log_prob(&s, &a) < best);
            }
        }
    }
}
