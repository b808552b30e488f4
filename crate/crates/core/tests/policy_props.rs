mod common;

use a2d_core::policy::{Sampling, PolicyParams};
use a2d_core::vocab::{Token, VOCAB_SIZE};
use common::*;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn weighted_logprob(params: &PolicyParams, prompt: &[Token], tokens: &[Token], weights: &[f64]) -> f64 {
    let lp = params.logprob(prompt, tokens).unwrap();
    lp.iter().zip(weights).map(|(l, w)| l * w).sum()
}

/// Smoothed objective recomputed from full next-token distributions.
fn smoothed_objective(params: &PolicyParams, prompt: &[Token], tokens: &[Token], weights: &[f64], s: f64) -> f64 {
    let mut ctx = prompt.to_vec();
    let mut total = 0.0;
    for (&tok, &w) in tokens.iter().zip(weights) {
        let lp = params.next_logprobs(&ctx).unwrap();
        let uniform = lp.iter().sum::<f64>() / lp.len() as f64;
        total += w * ((1.0 - s) * lp[tok.id()] + s * uniform);
        ctx.push(tok);
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn next_token_distribution_sums_to_one(seed in any::<u64>(), len in 0usize..20) {
        let mut r = rng(seed);
        let params = random_params(small_shape(), 1.0, &mut r);
        let ctx = random_tokens(len, &mut r);
        let total: f64 = params.next_logprobs(&ctx).unwrap().iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "sum = {total}");
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), plen in 0usize..10, tlen in 1usize..6) {
        let mut r = rng(seed);
        let params = random_params(small_shape(), 0.5, &mut r);
        let prompt = random_tokens(plen, &mut r);
        let tokens = random_tokens(tlen, &mut r);
        let weights: Vec<f64> = (0..tlen).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
        let grad = params.backward(&prompt, &tokens, &weights).unwrap();
        let err = max_fd_error(&params, &grad, 30, &mut r, |p| weighted_logprob(p, &prompt, &tokens, &weights));
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn smoothed_backward_matches_finite_differences(seed in any::<u64>(), tlen in 1usize..5, s in 0.0f64..0.5) {
        let mut r = rng(seed);
        let params = random_params(small_shape(), 0.5, &mut r);
        let prompt = random_tokens(4, &mut r);
        let tokens = random_tokens(tlen, &mut r);
        let weights: Vec<f64> = (0..tlen).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
        let trace = params.trace(&prompt, &tokens).unwrap();
        let mut grad = vec![0.0; params.len()];
        params.accumulate_backward_smoothed(&trace, &weights, s, &mut grad).unwrap();
        let err = max_fd_error(&params, &grad, 30, &mut r, |p| smoothed_objective(p, &prompt, &tokens, &weights, s));
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sampling_records_the_rescored_logprobs(seed in any::<u64>(), plen in 0usize..8) {
        let mut r = rng(seed);
        let params = random_params(small_shape(), 1.0, &mut r);
        let prompt = random_tokens(plen, &mut r);
        let ro = params.sample(&prompt, &Sampling::default(), 12, &mut r).unwrap();
        prop_assert!(!ro.tokens.is_empty() && ro.tokens.len() <= 12);
        prop_assert!(ro.tokens[..ro.tokens.len() - 1].iter().all(|&t| t != Token::EOS));
        let rescored = params.logprob(&prompt, &ro.tokens).unwrap();
        for (a, b) in rescored.iter().zip(&ro.behavior_logprobs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn empirical_frequencies_fit_the_model_distribution() {
    let mut r = rng(7);
    let params = random_params(small_shape(), 1.5, &mut r);
    let prompt = random_tokens(5, &mut r);
    let probs: Vec<f64> = params.next_logprobs(&prompt).unwrap().iter().map(|l| l.exp()).collect();
    let n = 100_000usize;
    let mut counts = vec![0usize; VOCAB_SIZE];
    for _ in 0..n {
        let ro = params.sample(&prompt, &Sampling::default(), 1, &mut r).unwrap();
        counts[ro.tokens[0].id()] += 1;
    }
    // pool cells with small expected counts so the chi-square approximation holds
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for (p, &c) in probs.iter().zip(&counts) {
        let e = p * n as f64;
        if e < 5.0 {
            pool.0 += e;
            pool.1 += c as f64;
        } else {
            cells.push((e, c as f64));
        }
    }
    if pool.0 > 0.0 {
        cells.push(pool);
    }
    let stat: f64 = cells.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
    let dof = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p_value > 0.01, "chi-square {stat} on {dof} dof, p = {p_value}");
}

#[test]
fn checkpoint_hash_tracks_every_value() {
    let mut r = rng(3);
    let params = random_params(small_shape(), 1.0, &mut r);
    let mut bumped = params.clone();
    let i = params.len() - 1;
    bumped.values_mut()[i] = f64::from_bits(params.values()[i].to_bits() ^ 1);
    assert_ne!(params.hash(), bumped.hash());
    let mut buf = Vec::new();
    params.write_checkpoint(&mut buf, None).unwrap();
    let (back, _) = PolicyParams::read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.hash(), params.hash());
}
