mod common;

use common::{greedy_loop, sort_top_two, toks};
use mars_lab::models::greedy_decode;
use mars_lab::{
    decode, draft_chain, DecodeConfig, DraftMode, PerturbedDraft, PerturbedDraftConfig,
    ScoringModel, SyntheticTarget, SyntheticTargetConfig, TokenId, VerificationPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_context(rng: &mut ChaCha8Rng, v: u32) -> Vec<TokenId> {
    let len = rng.random_range(1..12);
    (0..len).map(|_| TokenId(rng.random_range(0..v))).collect()
}

#[test]
fn default_target_top1_is_positive_on_1000_contexts() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut positive = 0;
    for _ in 0..1000 {
        let ctx = random_context(&mut rng, 64);
        let values = target.score(&ctx).unwrap().values().to_vec();
        if sort_top_two(&values).0 .1 > 0.0 {
            positive += 1;
        }
    }
    assert_eq!(positive, 1000);
}

#[test]
fn scoring_twice_is_bit_identical() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(8)).unwrap();
    let draft = PerturbedDraft::new(&target, PerturbedDraftConfig::default()).unwrap();
    let ctx = toks(&[5, 6, 7, 8]);
    let bits = |m: &dyn ScoringModel| -> Vec<u64> {
        m.score(&ctx)
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&target), bits(&target));
    assert_eq!(bits(&draft), bits(&draft));
}

#[test]
fn alignment_is_non_increasing_in_sigma() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(21)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let suite: Vec<Vec<TokenId>> = (0..2000).map(|_| random_context(&mut rng, 64)).collect();
    let agreement = |sigma: f64| {
        let draft = PerturbedDraft::new(
            &target,
            PerturbedDraftConfig {
                noise_seed: 4,
                noise_scale: sigma,
            },
        )
        .unwrap();
        suite
            .iter()
            .filter(|ctx| target.score(ctx).unwrap().argmax() == draft.score(ctx).unwrap().argmax())
            .count()
    };
    let rates: Vec<usize> = [0.0, 0.3, 1.0, 3.0, 200.0]
        .iter()
        .map(|&s| agreement(s))
        .collect();
    assert_eq!(rates[0], 2000);
    assert!(rates.windows(2).all(|w| w[0] >= w[1]), "{rates:?}");
}

#[test]
fn aligned_greedy_chain_equals_target_continuation() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(5)).unwrap();
    let draft = PerturbedDraft::new(
        &target,
        PerturbedDraftConfig {
            noise_seed: 9,
            noise_scale: 0.0,
        },
    )
    .unwrap();
    for start in 0..10 {
        let prompt = toks(&[start, start * 3]);
        let chain = draft_chain(&draft, &prompt, 7, DraftMode::Greedy, 1.0, start as u64).unwrap();
        assert_eq!(chain, greedy_loop(&target, &prompt, 7));
        assert_eq!(chain, greedy_decode(&target, &prompt, 7).unwrap());
    }
}

#[test]
fn sampled_chains_depend_on_seed_and_temperature() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(5)).unwrap();
    let draft = PerturbedDraft::new(&target, PerturbedDraftConfig::default()).unwrap();
    let prompt = toks(&[1]);
    let a = draft_chain(&draft, &prompt, 32, DraftMode::Sampled, 1.0, 1).unwrap();
    let b = draft_chain(&draft, &prompt, 32, DraftMode::Sampled, 1.0, 2).unwrap();
    assert_ne!(a, b);
    // Very low temperature collapses sampling onto the argmax.
    let cold = draft_chain(&draft, &prompt, 32, DraftMode::Sampled, 1e-4, 1).unwrap();
    let greedy = draft_chain(&draft, &prompt, 32, DraftMode::Greedy, 1.0, 1).unwrap();
    assert_eq!(cold, greedy);
}

/// Strict acceptance with an overwhelmingly noisy drafter behaves like a
/// context-free uniform drafter. The oracle counts target-argmax matches of
/// uniform random proposals along the target's own greedy path.
#[test]
fn huge_noise_drafter_matches_uniform_random_drafter() {
    let cfg = SyntheticTargetConfig::with_seed(31);
    let spread = cfg.logit_spread;
    let target = SyntheticTarget::new(cfg).unwrap();
    let draft = PerturbedDraft::new(
        &target,
        PerturbedDraftConfig {
            noise_seed: 2,
            noise_scale: 100.0 * spread * 3.5,
        },
    )
    .unwrap();
    let config = DecodeConfig {
        k: 7,
        max_tokens: 1000,
        policy: VerificationPolicy::Strict,
        rng_seed: 6,
        ..Default::default()
    };
    let out = decode(&target, &draft, &config, &toks(&[1])).unwrap();
    assert!(out.metrics.cycles >= 900);
    let m = &out.metrics;
    let (hits, trials) = (m.exact_count, m.exact_count + m.rejected_count);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let path = greedy_loop(&target, &toks(&[1]), 3000);
    let (mut oracle_hits, mut oracle_trials) = (0usize, 0usize);
    for &next in &path {
        let proposal = TokenId(rng.random_range(0..64));
        oracle_trials += 1;
        if proposal == next {
            oracle_hits += 1;
        }
    }
    let p1 = hits as f64 / trials as f64;
    let p2 = oracle_hits as f64 / oracle_trials as f64;
    let pooled = (hits + oracle_hits) as f64 / (trials + oracle_trials) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / trials as f64 + 1.0 / oracle_trials as f64)).sqrt();
    assert!(
        (p1 - p2).abs() <= 4.0 * se,
        "decode rate {p1}, uniform oracle {p2}, se {se}"
    );
    assert!((p2 - 1.0 / 64.0).abs() < 0.01);
}
