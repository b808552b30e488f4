use a2d_core::env::{generate_task, EnvConfig, PromptStyle};
use a2d_core::eval::*;
use a2d_core::par::Exec;
use a2d_core::policy::{init_params, PolicyShape, Sampling};
use a2d_core::rng::Streams;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;

/// Fraction of draws of `k` out of `n` (without replacement) that include
/// one of the first `c` items.
fn monte_carlo(n: usize, c: usize, k: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let hits = (0..trials).filter(|_| sample(&mut rng, n, k).iter().any(|i| i < c)).count();
    hits as f64 / trials as f64
}

proptest! {
    #[test]
    fn pass_at_k_is_monotone_and_bounded(n in 1usize..=16, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let c = (c_frac * n as f64).floor() as usize;
        let k = 1 + ((k_frac * (n - 1) as f64).floor() as usize);
        let p = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        if k < n {
            prop_assert!(p <= pass_at_k(n, c, k + 1).unwrap());
        }
        if c < n {
            prop_assert!(p <= pass_at_k(n, c + 1, k).unwrap());
        }
        if c == 0 {
            prop_assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn summary_brackets_its_mean(xs in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let s = Summary::of(&xs).unwrap();
        prop_assert!(s.min <= s.mean + 1e-12 && s.mean <= s.max + 1e-12);
        prop_assert!(s.std >= 0.0);
    }
}

#[test]
fn pass_at_k_agrees_with_sampling_on_a_few_triples() {
    for (i, &(n, c, k)) in [(8, 2, 4), (16, 1, 8), (5, 3, 2), (12, 0, 3)].iter().enumerate() {
        let mc = monte_carlo(n, c, k, 20_000, i as u64);
        assert!((pass_at_k(n, c, k).unwrap() - mc).abs() < 0.02, "({n},{c},{k})");
    }
}

#[test]
fn evaluation_is_reproducible_and_thread_independent() {
    let params = init_params(0, PolicyShape::default()).unwrap();
    let env = EnvConfig::default();
    let tasks: Vec<_> = (0..6).map(|i| generate_task(i, i, 2, 5)).collect();
    let spec = EvalSpec {
        suite: "t",
        style: PromptStyle::Vanilla,
        subq: None,
        n_samples: 4,
        k_list: &[1, 2, 4],
        sampling: Sampling::default(),
        max_len: 8,
        config_hash: "h",
    };
    let streams = Streams::new(4);
    let a = evaluate(&params, &tasks, &env, &spec, &streams, Exec::Sequential).unwrap();
    let b = evaluate(&params, &tasks, &env, &spec, &streams, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tasks.len(), 6);
    assert!(a.pass_at(1).unwrap() <= a.pass_at(4).unwrap());
    let bad = EvalSpec { k_list: &[5], ..spec.clone() };
    assert!(evaluate(&params, &tasks, &env, &bad, &streams, Exec::Sequential).is_err());
    let missing = EvalSpec { style: PromptStyle::WithSubQuestions, ..spec };
    assert!(evaluate(&params, &tasks, &env, &missing, &streams, Exec::Sequential).is_err());
}
