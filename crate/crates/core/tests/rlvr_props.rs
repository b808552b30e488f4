mod common;

use a2d_core::optim::AdamConfig;
use a2d_core::par::Exec;
use a2d_core::policy::{PolicyParams, Sampling};
use a2d_core::rlvr::*;
use a2d_core::rng::Streams;
use a2d_core::vocab::Token;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Groups sampled from `behavior` with random rewards and GRPO advantages.
fn sampled_groups(behavior: &PolicyParams, seed: u64, n_groups: usize, n: usize) -> Vec<RolloutGroup> {
    let mut r = rng(seed);
    let jobs: Vec<Job> = (0..n_groups)
        .map(|i| Job {
            task_id: i as u64,
            prompt: random_tokens(6, &mut r),
            guided: false,
        })
        .collect();
    let streams = Streams::new(seed);
    let mut groups = sample_groups(behavior, &jobs, n, &Sampling::default(), 5, &streams, "t", 0, Exec::Sequential, |j, i, _| {
        ((j * 7 + i * 5 + seed as usize) % 3 == 0) as u8 as f64
    })
    .unwrap();
    assign_advantages(&mut groups, Estimator::Grpo).unwrap();
    groups
}

/// `J` recomputed token by token from log-probs.
fn objective(params: &PolicyParams, reference: &PolicyParams, groups: &[RolloutGroup], cfg: &RlvrConfig) -> f64 {
    let mut j = 0.0;
    for g in groups {
        let adv = g.advantages.as_ref().unwrap();
        let mut per_group = 0.0;
        for (r, &a) in g.rollouts.iter().zip(adv) {
            let lp = params.logprob(&r.prompt, &r.tokens).unwrap();
            let rl = reference.logprob(&r.prompt, &r.tokens).unwrap();
            let mut s = 0.0;
            for t in 0..lp.len() {
                let ratio = (lp[t] - r.behavior_logprobs[t]).exp();
                let d = rl[t] - lp[t];
                s += surrogate_term(ratio, a, cfg.eps_low, cfg.eps_high) - cfg.beta * (d.exp() - d - 1.0);
            }
            per_group += s / lp.len() as f64;
        }
        j += per_group / g.rollouts.len() as f64;
    }
    j / groups.len() as f64
}

proptest! {
    #[test]
    fn grpo_advantages_are_standardized(rewards in prop::collection::vec(0.0f64..1.0, 2..32)) {
        prop_assume!(pop_std(&rewards) > 1e-6);
        let a = grpo_advantage(&rewards).unwrap();
        prop_assert!(mean(&a).abs() < 1e-12);
        prop_assert!((pop_std(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn binary_grpo_advantages_are_standardized(bits in prop::collection::vec(any::<bool>(), 2..32)) {
        let rewards: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let a = grpo_advantage(&rewards).unwrap();
        if bits.iter().all(|&b| b == bits[0]) {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!(mean(&a).abs() < 1e-12);
            prop_assert!((pop_std(&a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_rewards_give_zero_advantages(c in -5.0f64..5.0, n in 2usize..20) {
        let rewards = vec![c; n];
        for a in [grpo_advantage(&rewards), rloo_advantage(&rewards), reinforcepp_advantage(&rewards)] {
            prop_assert!(a.unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rloo_subtracts_the_leave_one_out_mean(rewards in prop::collection::vec(0.0f64..1.0, 2..16)) {
        let a = rloo_advantage(&rewards).unwrap();
        let n = rewards.len();
        for i in 0..n {
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| rewards[j]).sum::<f64>() / (n - 1) as f64;
            prop_assert!((a[i] - (rewards[i] - others)).abs() < 1e-12);
        }
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn surrogate_is_the_pessimistic_bound(ratio in 0.0f64..3.0, adv in -3.0f64..3.0) {
        let s = surrogate_term(ratio, adv, 0.2, 0.28);
        prop_assert!(s <= ratio * adv + 1e-15);
        if (0.8..=1.28).contains(&ratio) {
            prop_assert_eq!(s, ratio * adv);
            prop_assert!(!is_clipped(ratio, adv, 0.2, 0.28));
        }
    }

    #[test]
    fn kl_estimate_is_nonnegative_and_zero_on_equal_policies(xs in prop::collection::vec((-8.0f64..0.0, -8.0f64..0.0), 1..20)) {
        let (a, b): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        prop_assert!(kl_penalty(&a, &b).unwrap().iter().all(|&k| k >= 0.0));
        prop_assert!(kl_penalty(&a, &a).unwrap().iter().all(|&k| k == 0.0));
    }
}

#[test]
fn reinforcepp_normalizes_over_the_whole_batch() {
    let mut groups: Vec<RolloutGroup> = (0..3)
        .map(|g| {
            let rollouts = (0..4)
                .map(|i| a2d_core::policy::Rollout {
                    prompt: vec![],
                    tokens: vec![Token::EOS],
                    behavior_logprobs: vec![0.0],
                    logprobs: vec![0.0],
                    reward: ((g + i) % 3) as f64,
                    guided: false,
                })
                .collect();
            RolloutGroup::new(g as u64, rollouts)
        })
        .collect();
    assign_advantages(&mut groups, Estimator::Reinforcepp).unwrap();
    let all: Vec<f64> = groups.iter().flat_map(|g| g.advantages.clone().unwrap()).collect();
    assert!(mean(&all).abs() < 1e-12);
    assert!((pop_std(&all) - 1.0).abs() < 1e-9);
}

#[test]
fn on_policy_gradient_is_reinforce_with_baseline() {
    let mut r = rng(11);
    let params = random_params(small_shape(), 0.5, &mut r);
    let groups = sampled_groups(&params, 5, 3, 6);
    let cfg = RlvrConfig::default();
    let g = rlvr_gradient(&params, None, &groups, &cfg, Exec::Sequential).unwrap();
    assert_eq!(g.stats.clip_fraction, 0.0);

    let mut oracle = vec![0.0; params.len()];
    for grp in &groups {
        for (ro, &a) in grp.rollouts.iter().zip(grp.advantages.as_ref().unwrap()) {
            let w = -a / (groups.len() * grp.rollouts.len() * ro.tokens.len()) as f64;
            let b = params.backward(&ro.prompt, &ro.tokens, &vec![w; ro.tokens.len()]).unwrap();
            for (o, x) in oracle.iter_mut().zip(b) {
                *o += x;
            }
        }
    }
    let scale = oracle.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = g.grad.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff <= 1e-12 * scale.max(1.0), "max deviation {diff}");
}

#[test]
fn off_policy_gradient_with_kl_matches_finite_differences() {
    let mut r = rng(12);
    let behavior = random_params(small_shape(), 0.5, &mut r);
    let groups = sampled_groups(&behavior, 9, 2, 4);
    let mut params = behavior.clone();
    for v in params.values_mut() {
        *v += r.random_range(-0.05..0.05);
    }
    let mut reference = behavior.clone();
    for v in reference.values_mut() {
        *v += r.random_range(-0.05..0.05);
    }
    let cfg = RlvrConfig {
        beta: 0.3,
        ..RlvrConfig::default()
    };
    let g = rlvr_gradient(&params, Some(&reference), &groups, &cfg, Exec::Sequential).unwrap();
    let j = objective(&params, &reference, &groups, &cfg);
    assert!((g.stats.loss + j).abs() < 1e-12, "loss {} vs -J {}", g.stats.loss, -j);
    let err = max_fd_error(&params, &g.grad, 60, &mut r, |p| -objective(p, &reference, &groups, &cfg));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn sequential_and_parallel_gradients_agree_bitwise() {
    let mut r = rng(13);
    let params = random_params(small_shape(), 0.5, &mut r);
    let groups = sampled_groups(&params, 2, 4, 8);
    let cfg = RlvrConfig::default();
    let a = rlvr_gradient(&params, None, &groups, &cfg, Exec::Sequential).unwrap();
    let b = rlvr_gradient(&params, None, &groups, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.grad, b.grad);
    assert_eq!(a.stats, b.stats);
}

#[test]
fn updates_raise_the_rewarded_token_on_a_bandit() {
    let rewarded = Token::digit(3);
    for estimator in [Estimator::Grpo, Estimator::Rloo, Estimator::Reinforcepp] {
        let mut r = rng(21);
        let params = random_params(small_shape(), 0.02, &mut r);
        let prompt = random_tokens(4, &mut r);
        let cfg = RlvrConfig {
            estimator,
            n_rollout: 16,
            train_batch: 4,
            mini_batch: 4,
            max_len: 1,
            optimizer: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            ..RlvrConfig::default()
        };
        let jobs: Vec<Job> = (0..4)
            .map(|i| Job {
                task_id: i,
                prompt: prompt.clone(),
                guided: false,
            })
            .collect();
        let streams = Streams::new(1);
        let mut learner = Learner::new(params, cfg.clone(), Exec::Sequential).unwrap();
        for step in 0..200 {
            let mut groups = sample_groups(
                &learner.params,
                &jobs,
                cfg.n_rollout,
                &cfg.sampling(),
                1,
                &streams,
                "bandit",
                step,
                Exec::Sequential,
                |_, _, toks| (toks[0] == rewarded) as u8 as f64,
            )
            .unwrap();
            assign_advantages(&mut groups, estimator).unwrap();
            rlvr_step(&mut learner, &groups).unwrap();
        }
        let p = learner.params.next_logprobs(&prompt).unwrap()[rewarded.id()].exp();
        assert!(p > 0.9, "{estimator:?}: p = {p}");
    }
}
