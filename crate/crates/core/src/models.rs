//! Deterministic synthetic scoring models.
//!
//! The target is an order-`m` hash table model: every logit is a pure
//! function of `(seed, last m tokens, candidate)`. Per-candidate Gumbel noise
//! gives a realistic top-1/top-2 gap distribution, and a per-context scale
//! factor varies the global logit magnitude between steps without touching
//! the logit ratio. The draft is the target plus seeded Gaussian noise of
//! scale `sigma`, so `sigma` dials drafter/target alignment.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hash_words, mix64, unit_open};
use crate::logit::{softmax, LogitVector, TokenId};

const SCALE_SALT: u64 = 0x5ca1_e000_0000_0001;
const NOISE_SALT: u64 = 0x0015_e000_0000_0002;

/// A next-token scorer. Implementations must be pure: the same context
/// always yields the same vector.
pub trait ScoringModel {
    fn vocab_size(&self) -> usize;

    /// Number of trailing context tokens consulted.
    fn order(&self) -> usize;

    fn score(&self, context: &[TokenId]) -> Result<LogitVector>;
}

impl<M: ScoringModel + ?Sized> ScoringModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn order(&self) -> usize {
        (**self).order()
    }

    fn score(&self, context: &[TokenId]) -> Result<LogitVector> {
        (**self).score(context)
    }
}

pub(crate) fn check_context(context: &[TokenId], vocab_size: usize) -> Result<()> {
    match context.iter().find(|t| t.index() >= vocab_size) {
        Some(t) => Err(Error::invalid(format!(
            "token {t} is outside the vocabulary of size {vocab_size}"
        ))),
        None => Ok(()),
    }
}

/// Hash of the trailing `order` tokens and how many were available, plus the
/// absolute position when `positional`.
fn context_key(seed: u64, context: &[TokenId], order: usize, positional: bool) -> u64 {
    let tail = &context[context.len().saturating_sub(order)..];
    let position = if positional {
        context.len() as u64 + 1
    } else {
        0
    };
    hash_words(
        seed,
        [position, tail.len() as u64]
            .into_iter()
            .chain(tail.iter().map(|t| u64::from(t.0))),
    )
}

fn candidate_hash(key: u64, token: usize) -> u64 {
    mix64(key ^ mix64(token as u64 + 1))
}

/// Fixture parameters of the synthetic target.
///
/// Logit for candidate `v` under context `c` is
/// `scale(c) * (logit_offset + logit_spread * g(c, v))` with `g` a standard
/// Gumbel draw and `scale(c)` log-uniform in `[scale_min, scale_max]`.
/// With `positional` the hash also covers the absolute decode position;
/// without it a greedy decode over the `V^m` possible contexts falls into a
/// short cycle within a few dozen steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTargetConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub order: usize,
    pub logit_offset: f64,
    pub logit_spread: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub positional: bool,
}

impl Default for SyntheticTargetConfig {
    /// V=64, m=2. Top-1 logits land roughly in [4, 40] and about 30% of
    /// steps have `z2 / z1 > 0.9`.
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 64,
            order: 2,
            logit_offset: 0.0,
            logit_spread: 2.0,
            scale_min: 0.5,
            scale_max: 3.5,
            positional: true,
        }
    }
}

impl SyntheticTargetConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid(format!(
                "target.vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid(
                "target.vocab_size exceeds the token id range",
            ));
        }
        if self.order < 1 {
            return Err(Error::invalid("target.order must be at least 1"));
        }
        if !(self.logit_spread > 0.0 && self.logit_spread.is_finite()) {
            return Err(Error::invalid(format!(
                "target.logit_spread must be positive, got {}",
                self.logit_spread
            )));
        }
        if !self.logit_offset.is_finite() {
            return Err(Error::invalid("target.logit_offset must be finite"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return Err(Error::invalid(format!(
                "target scale range must satisfy 0 < scale_min <= scale_max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTarget {
    config: SyntheticTargetConfig,
}

impl SyntheticTarget {
    pub fn new(config: SyntheticTargetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SyntheticTargetConfig {
        &self.config
    }

    fn context_scale(&self, key: u64) -> f64 {
        let (lo, hi) = (self.config.scale_min.ln(), self.config.scale_max.ln());
        (lo + (hi - lo) * unit_open(mix64(key ^ SCALE_SALT))).exp()
    }
}

impl ScoringModel for SyntheticTarget {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn order(&self) -> usize {
        self.config.order
    }

    fn score(&self, context: &[TokenId]) -> Result<LogitVector> {
        check_context(context, self.config.vocab_size)?;
        let key = context_key(
            self.config.seed,
            context,
            self.config.order,
            self.config.positional,
        );
        let scale = self.context_scale(key);
        let values = (0..self.config.vocab_size)
            .map(|v| {
                let gumbel = -(-unit_open(candidate_hash(key, v)).ln()).ln();
                scale * (self.config.logit_offset + self.config.logit_spread * gumbel)
            })
            .collect();
        LogitVector::new(context.len(), values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbedDraftConfig {
    pub noise_seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_scale: f64,
}

impl Default for PerturbedDraftConfig {
    fn default() -> Self {
        Self {
            noise_seed: 1,
            noise_scale: 1.0,
        }
    }
}

impl PerturbedDraftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "draft.noise_scale must be non-negative, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Draft model: the wrapped target's logits plus seeded Gaussian noise.
#[derive(Debug, Clone)]
pub struct PerturbedDraft<M> {
    target: M,
    config: PerturbedDraftConfig,
}

impl<M: ScoringModel> PerturbedDraft<M> {
    pub fn new(target: M, config: PerturbedDraftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { target, config })
    }

    pub fn config(&self) -> &PerturbedDraftConfig {
        &self.config
    }
}

impl<M: ScoringModel> ScoringModel for PerturbedDraft<M> {
    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    fn order(&self) -> usize {
        self.target.order()
    }

    fn score(&self, context: &[TokenId]) -> Result<LogitVector> {
        let base = self.target.score(context)?;
        if self.config.noise_scale == 0.0 {
            return Ok(base);
        }
        let key = context_key(
            self.config.noise_seed ^ NOISE_SALT,
            context,
            self.order(),
            true,
        );
        let values = base
            .values()
            .iter()
            .enumerate()
            .map(|(v, &z)| {
                let h = candidate_hash(key, v);
                // Box-Muller from two independent uniforms.
                let (u1, u2) = (unit_open(h), unit_open(mix64(h)));
                let normal = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                z + self.config.noise_scale * normal
            })
            .collect();
        LogitVector::new(base.step(), values)
    }
}

/// Negated target logits: its argmax is the target's lowest-ranked token,
/// so for V >= 3 (and no ties) every proposal falls outside the target top-2.
#[derive(Debug, Clone)]
pub struct AdversarialDraft<M> {
    target: M,
}

impl<M: ScoringModel> AdversarialDraft<M> {
    pub fn new(target: M) -> Self {
        Self { target }
    }
}

impl<M: ScoringModel> ScoringModel for AdversarialDraft<M> {
    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    fn order(&self) -> usize {
        self.target.order()
    }

    fn score(&self, context: &[TokenId]) -> Result<LogitVector> {
        let base = self.target.score(context)?;
        LogitVector::new(base.step(), base.values().iter().map(|z| -z).collect())
    }
}

/// How the drafter turns logits into a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DraftMode {
    #[default]
    Greedy,
    /// Categorical sampling from `softmax(logits / temperature)`.
    Sampled,
}

/// Proposes `k` tokens autoregressively from `draft`.
pub fn draft_chain<M: ScoringModel + ?Sized>(
    draft: &M,
    context: &[TokenId],
    k: usize,
    mode: DraftMode,
    temperature: f64,
    rng_seed: u64,
) -> Result<Vec<TokenId>> {
    if k < 1 {
        return Err(Error::invalid("draft length K must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut extended = context.to_vec();
    let mut chain = Vec::with_capacity(k);
    for _ in 0..k {
        let logits = draft.score(&extended)?;
        let token = match mode {
            DraftMode::Greedy => logits.argmax(),
            DraftMode::Sampled => {
                let probs = softmax(&logits, temperature)?;
                let dist = WeightedIndex::new(probs.values())
                    .map_err(|e| Error::invalid(format!("cannot sample draft token: {e}")))?;
                TokenId(dist.sample(&mut rng) as u32)
            }
        };
        chain.push(token);
        extended.push(token);
    }
    Ok(chain)
}

/// Greedy autoregressive continuation of `model` alone.
pub fn greedy_decode<M: ScoringModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(max_tokens);
    for _ in 0..max_tokens {
        let next = model.score(&context)?.argmax();
        out.push(next);
        context.push(next);
    }
    Ok(out)
}
