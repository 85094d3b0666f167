use proptest::prelude::*;

use revnmr_core::chemdata::{synth_dataset, SpectrumCode, CODE_BITS};
use revnmr_core::eval::{cd_local, cd_prior, count_correlation, evaluate, PerturbationConfig};
use revnmr_core::invnet::{InvertibleNet, NetConfig};
use revnmr_core::loss::{distance_aware_bce, samples, Sample};
use revnmr_core::numeric::RngStream;

fn net() -> InvertibleNet {
    InvertibleNet::random(
        NetConfig {
            blocks_per_stage: 1,
            hidden_cap: 8,
        },
        &mut RngStream::new(21),
    )
}

fn set(n: usize) -> Vec<Sample> {
    samples(&synth_dataset(n, 2))
}

fn confident_at(k: usize) -> Vec<f64> {
    (0..CODE_BITS).map(|b| if b == k { 8.0 } else { -8.0 }).collect()
}

proptest! {
    #[test]
    fn bce_grows_with_distance_then_levels(i in 4usize..=123, left in any::<bool>()) {
        let target = SpectrumCode::from_positions([i]).unwrap();
        let at = |d: usize| if left { i - d } else { i + d };
        let loss: Vec<f64> = (0..=4).map(|d| distance_aware_bce(&confident_at(at(d)), &target).unwrap()).collect();
        prop_assert!(loss[0] < loss[1]);
        prop_assert!(loss[1] < loss[2]);
        prop_assert!(loss[2] < loss[3]);
        prop_assert!((loss[3] - loss[4]).abs() < 1e-12);
    }
}

#[test]
fn zero_epsilon_is_zero_and_distance_grows() {
    let net = net();
    let set = set(4);
    let at = |epsilon: f64| PerturbationConfig {
        epsilon,
        n_noise: 4,
        n_prior: 2,
        seed: 3,
    };
    assert_eq!(cd_local(&net, &set, &at(0.0)).unwrap().mean, 0.0);
    assert_eq!(cd_prior(&net, &set, &at(0.0)).unwrap().mean, 0.0);
    let mut last = 0.0;
    for eps in [0.01, 0.05, 0.1, 0.2, 0.5] {
        let local = cd_local(&net, &set, &at(eps)).unwrap().mean;
        assert!(local > last, "eps {eps}: {local} <= {last}");
        last = local;
    }
}

#[test]
fn doubling_draws_stays_within_error() {
    let net = net();
    let set = set(4);
    let cfg = PerturbationConfig {
        epsilon: 0.1,
        n_noise: 8,
        n_prior: 1,
        seed: 5,
    };
    let small = cd_local(&net, &set, &cfg).unwrap();
    let large = cd_local(&net, &set, &PerturbationConfig { n_noise: 16, ..cfg }).unwrap();
    assert_eq!(large.draws, 2 * small.draws);
    assert!((small.mean - large.mean).abs() <= small.std_error, "{small:?} {large:?}");
}

#[test]
fn row_order_does_not_change_metrics() {
    let net = net();
    let forward = set(6);
    let mut backward = forward.clone();
    backward.reverse();
    let rng = RngStream::new(4);
    assert_eq!(
        count_correlation(&net, &forward, &rng, None).ok(),
        count_correlation(&net, &backward, &rng, None).ok()
    );
    let cfg = PerturbationConfig {
        n_noise: 2,
        n_prior: 2,
        ..PerturbationConfig::default()
    };
    let a = evaluate(&net, &forward, &cfg).unwrap();
    let b = evaluate(&net, &backward, &cfg).unwrap();
    for ((name, x), (_, y)) in a.fields().iter().zip(b.fields()) {
        let same = (x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-9 * (1.0 + x.abs());
        assert!(same, "{name}: {x} vs {y}");
    }
}
