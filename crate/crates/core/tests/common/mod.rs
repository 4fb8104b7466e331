//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's top-2, ratio or verification code.

#![allow(dead_code)]

use mars_lab::trace::TraceRecord;
use mars_lab::{ScoringModel, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Top-2 by fully sorting `(index, value)` pairs: descending value, ascending
/// index among equal values.
pub fn sort_top_two(values: &[f64]) -> ((u32, f64), (u32, f64)) {
    let mut pairs: Vec<(u32, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as u32, v))
        .collect();
    pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    (pairs[0], pairs[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleLabel {
    Exact,
    Relaxed,
    Rejected,
}

/// The three-branch rule applied literally to a full logit vector.
/// `theta = None` means strict verification.
pub fn oracle_decide(values: &[f64], draft: u32, theta: Option<f64>) -> (OracleLabel, u32) {
    let ((v1, z1), (v2, z2)) = sort_top_two(values);
    if draft == v1 {
        return (OracleLabel::Exact, draft);
    }
    if let Some(theta) = theta {
        if z1 > 0.0 && draft == v2 && z2 / z1 > theta {
            return (OracleLabel::Relaxed, draft);
        }
    }
    (OracleLabel::Rejected, v1)
}

/// Verifies a whole chain with the literal rule, returning labels and
/// committed tokens (bonus included).
pub fn oracle_chain(
    draft: &[u32],
    logits: &[Vec<f64>],
    theta: Option<f64>,
) -> (Vec<OracleLabel>, Vec<u32>) {
    let mut labels = Vec::new();
    let mut committed = Vec::new();
    for (i, &d) in draft.iter().enumerate() {
        let (label, emitted) = oracle_decide(&logits[i], d, theta);
        labels.push(label);
        committed.push(emitted);
        if label == OracleLabel::Rejected {
            return (labels, committed);
        }
    }
    committed.push(sort_top_two(&logits[draft.len()]).0 .0);
    (labels, committed)
}

/// Plain autoregressive greedy loop over a model.
pub fn greedy_loop<M: ScoringModel>(model: &M, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let values = model.score(&ctx).unwrap().values().to_vec();
        let next = TokenId(sort_top_two(&values).0 .0);
        out.push(next);
        ctx.push(next);
    }
    out
}

pub fn toks(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

pub const FUZZ_VOCAB: usize = 1000;

fn random_value(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..5) {
        0 => rng.random_range(-1e3..1e3),
        1 => f64::from_bits(rng.random_range(1..(1u64 << 52))),
        2 => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-300..300)),
        3 => f64::from(rng.random_range(-5i32..5)),
        _ => -0.0,
    }
}

/// Random valid trace records: mixed magnitudes, subnormals, signed zeros,
/// optional hashes and drafts, arbitrary positive temperatures.
pub fn fuzz_records(seed: u64, n: usize) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=12);
            let mut ids: Vec<u32> = Vec::with_capacity(len);
            while ids.len() < len {
                let id = rng.random_range(0..FUZZ_VOCAB as u32);
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            let mut top_k: Vec<(TokenId, f64)> = ids
                .into_iter()
                .map(|i| (TokenId(i), random_value(&mut rng)))
                .collect();
            top_k.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            TraceRecord {
                step: rng.random(),
                context_hash: rng.random_bool(0.8).then(|| rng.random()),
                top_k,
                chosen_draft: rng
                    .random_bool(0.7)
                    .then(|| TokenId(rng.random_range(0..FUZZ_VOCAB as u32))),
                temperature: f64::from_bits(rng.random_range(1..0x7fef_ffff_ffff_ffffu64)),
            }
        })
        .collect()
}
