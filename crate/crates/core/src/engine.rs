//! Draft-verify decode loop, cycle accounting and the analytic cost model.
//!
//! Each cycle drafts K tokens, scores the target at K+1 positions (billed as
//! a single parallel target pass), verifies, and commits the result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hash_words, mix64};
use crate::logit::{LogitVector, TokenId};
use crate::models::{check_context, draft_chain, greedy_decode, DraftMode, ScoringModel};
use crate::trace::{TraceRecord, DEFAULT_TOP_K};
use crate::verify::{
    verify_chain, verify_tree, CycleResult, Decision, TokenTree, TreeNode, VerificationPolicy,
};

/// Per-pass costs replacing wall-clock measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Cost of one parallel target verification pass.
    pub c_target: f64,
    /// Cost of one draft forward step.
    pub c_draft: f64,
}

impl Default for CostModel {
    /// Draft step at 5% of a target pass.
    fn default() -> Self {
        Self {
            c_target: 1.0,
            c_draft: 0.05,
        }
    }
}

impl CostModel {
    /// `c_target = 1`, `c_draft = ratio`.
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        let cost = Self {
            c_target: 1.0,
            c_draft: ratio,
        };
        cost.validate()?;
        Ok(cost)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_target > 0.0 && self.c_target.is_finite()) {
            return Err(Error::invalid(format!(
                "cost.c_target must be positive, got {}",
                self.c_target
            )));
        }
        if !(self.c_draft >= 0.0 && self.c_draft.is_finite()) {
            return Err(Error::invalid(format!(
                "cost.c_draft must be non-negative, got {}",
                self.c_draft
            )));
        }
        Ok(())
    }
}

/// Speedup of speculative decoding over vanilla decoding under `cost`:
/// `committed * c_target / (cycles * (c_target + k * c_draft))`.
pub fn simulated_speedup(
    total_committed: usize,
    cycles: usize,
    cost: &CostModel,
    k: usize,
) -> Result<f64> {
    if cycles == 0 {
        return Err(Error::UndefinedMetric(
            "speedup needs at least one completed cycle".into(),
        ));
    }
    cost.validate()?;
    let vanilla = total_committed as f64 * cost.c_target;
    let speculative = cycles as f64 * (cost.c_target + k as f64 * cost.c_draft);
    Ok(vanilla / speculative)
}

/// Fraction of positions with equal tokens, over the shorter length.
pub fn agreement_rate(a: &[TokenId], b: &[TokenId]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(
            "agreement rate needs two non-empty sequences",
        ));
    }
    let n = a.len().min(b.len());
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Chain,
    /// Draft tree of depth K: along the drafted path every level also offers
    /// the drafter's next `top_k - 1` candidates as leaf alternatives.
    Tree { top_k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub k: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub policy: VerificationPolicy,
    pub draft_mode: DraftMode,
    pub rng_seed: u64,
    pub stop_token: Option<TokenId>,
    pub mode: DecodeMode,
    pub cost: CostModel,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 7,
            max_tokens: 256,
            temperature: 1.0,
            policy: VerificationPolicy::default(),
            draft_mode: DraftMode::Greedy,
            rng_seed: 0,
            stop_token: None,
            mode: DecodeMode::Chain,
            cost: CostModel::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.max_tokens < 1 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let DecodeMode::Tree { top_k } = self.mode {
            if top_k < 1 {
                return Err(Error::invalid("tree top_k must be at least 1"));
            }
        }
        self.policy.validate()?;
        self.cost.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeMetrics {
    pub cycles: usize,
    pub total_committed: usize,
    pub tau: f64,
    pub exact_count: usize,
    pub relaxed_count: usize,
    pub rejected_count: usize,
    pub bonus_count: usize,
    pub target_passes: usize,
    pub draft_steps: usize,
    pub simulated_speedup: f64,
    pub agreement_rate: Option<f64>,
}

/// Running totals over cycles; shared by live decoding and trace replay.
#[derive(Debug, Clone, Default)]
pub(crate) struct CycleTally {
    cycles: usize,
    committed: usize,
    exact: usize,
    relaxed: usize,
    rejected: usize,
    bonus: usize,
    draft_steps: usize,
}

impl CycleTally {
    pub(crate) fn add(&mut self, cycle: &CycleResult, draft_steps: usize) {
        self.cycles += 1;
        self.committed += cycle.committed.len();
        self.exact += cycle.count(Decision::ExactMatch);
        self.relaxed += cycle.count(Decision::Relaxed);
        self.rejected += cycle.count(Decision::Rejected);
        self.bonus += usize::from(cycle.bonus.is_some());
        self.draft_steps += draft_steps;
    }

    pub(crate) fn finish(
        &self,
        k: usize,
        cost: &CostModel,
        agreement_rate: Option<f64>,
    ) -> Result<DecodeMetrics> {
        let simulated_speedup = simulated_speedup(self.committed, self.cycles, cost, k)?;
        Ok(DecodeMetrics {
            cycles: self.cycles,
            total_committed: self.committed,
            tau: self.committed as f64 / self.cycles as f64,
            exact_count: self.exact,
            relaxed_count: self.relaxed,
            rejected_count: self.rejected,
            bonus_count: self.bonus,
            target_passes: self.cycles,
            draft_steps: self.draft_steps,
            simulated_speedup,
            agreement_rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    /// Generated tokens, excluding the prompt, cut at `max_tokens` or just
    /// after the stop token.
    pub tokens: Vec<TokenId>,
    pub metrics: DecodeMetrics,
    pub cycles: Vec<CycleResult>,
}

/// Runs speculative decoding of `target` with `draft` proposals.
pub fn decode<T, D>(
    target: &T,
    draft: &D,
    config: &DecodeConfig,
    prompt: &[TokenId],
) -> Result<DecodeOutcome>
where
    T: ScoringModel + ?Sized,
    D: ScoringModel + ?Sized,
{
    run(target, draft, config, prompt, None)
}

/// Like [`decode`], additionally returning one trace record per scored
/// target position (K draft positions plus the bonus position per cycle).
/// Chain mode only.
pub fn decode_recorded<T, D>(
    target: &T,
    draft: &D,
    config: &DecodeConfig,
    prompt: &[TokenId],
) -> Result<(DecodeOutcome, Vec<TraceRecord>)>
where
    T: ScoringModel + ?Sized,
    D: ScoringModel + ?Sized,
{
    if config.mode != DecodeMode::Chain {
        return Err(Error::invalid("trace recording supports chain mode only"));
    }
    let mut records = Vec::new();
    let outcome = run(target, draft, config, prompt, Some(&mut records))?;
    Ok((outcome, records))
}

fn cycle_seed(rng_seed: u64, cycle: usize) -> u64 {
    mix64(rng_seed ^ mix64(cycle as u64))
}

fn run<T, D>(
    target: &T,
    draft: &D,
    config: &DecodeConfig,
    prompt: &[TokenId],
    mut recorder: Option<&mut Vec<TraceRecord>>,
) -> Result<DecodeOutcome>
where
    T: ScoringModel + ?Sized,
    D: ScoringModel + ?Sized,
{
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    if draft.vocab_size() != target.vocab_size() {
        return Err(Error::invalid(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            draft.vocab_size(),
            target.vocab_size()
        )));
    }
    check_context(prompt, target.vocab_size())?;

    let mut context = prompt.to_vec();
    let mut tokens = Vec::with_capacity(config.max_tokens + config.k + 1);
    let mut cycles = Vec::new();
    let mut tally = CycleTally::default();
    let mut stopped = false;

    while !stopped && tokens.len() < config.max_tokens {
        let seed = cycle_seed(config.rng_seed, cycles.len());
        let cycle = match config.mode {
            DecodeMode::Chain => {
                let proposal = draft_chain(
                    draft,
                    &context,
                    config.k,
                    config.draft_mode,
                    config.temperature,
                    seed,
                )?;
                let mut extended = context.clone();
                let mut logits = Vec::with_capacity(config.k + 1);
                for i in 0..=config.k {
                    let scored = target.score(&extended)?;
                    if let Some(records) = recorder.as_deref_mut() {
                        records.push(trace_record(
                            &extended,
                            &scored,
                            proposal.get(i).copied(),
                            config.temperature,
                        ));
                    }
                    logits.push(scored);
                    if let Some(&t) = proposal.get(i) {
                        extended.push(t);
                    }
                }
                verify_chain(&proposal, &logits, config.policy)?
            }
            DecodeMode::Tree { top_k } => {
                let tree = draft_tree(draft, &context, config, top_k, seed)?;
                verify_tree(&tree, target, &context, config.policy)?
            }
        };
        tally.add(&cycle, config.k);
        for &t in &cycle.committed {
            context.push(t);
            tokens.push(t);
            if config.stop_token == Some(t) {
                stopped = true;
                break;
            }
        }
        cycles.push(cycle);
    }
    tokens.truncate(config.max_tokens);

    let reference = greedy_decode(target, prompt, tokens.len())?;
    let agreement = agreement_rate(&tokens, &reference)?;
    let metrics = tally.finish(config.k, &config.cost, Some(agreement))?;
    Ok(DecodeOutcome {
        tokens,
        metrics,
        cycles,
    })
}

fn trace_record(
    context: &[TokenId],
    logits: &LogitVector,
    chosen_draft: Option<TokenId>,
    temperature: f64,
) -> TraceRecord {
    TraceRecord {
        step: context.len() as u64,
        context_hash: Some(hash_words(0, context.iter().map(|t| u64::from(t.0)))),
        top_k: logits.top_k(DEFAULT_TOP_K),
        chosen_draft,
        temperature,
    }
}

/// Builds the draft tree: the drafted token at each level carries the next
/// level, its `top_k - 1` strongest alternatives are leaves.
fn draft_tree<D: ScoringModel + ?Sized>(
    draft: &D,
    context: &[TokenId],
    config: &DecodeConfig,
    top_k: usize,
    seed: u64,
) -> Result<TokenTree> {
    let path = draft_chain(
        draft,
        context,
        config.k,
        config.draft_mode,
        config.temperature,
        seed,
    )?;
    let mut extended = context.to_vec();
    let mut levels = Vec::with_capacity(path.len());
    for &chosen in &path {
        let logits = draft.score(&extended)?;
        let siblings: Vec<TokenId> = logits
            .top_k(top_k)
            .into_iter()
            .map(|(t, _)| t)
            .filter(|&t| t != chosen)
            .take(top_k - 1)
            .collect();
        levels.push((chosen, siblings));
        extended.push(chosen);
    }
    let mut next: Vec<TreeNode> = Vec::new();
    for (chosen, siblings) in levels.into_iter().rev() {
        let mut level = vec![TreeNode {
            token: chosen,
            children: next,
        }];
        level.extend(siblings.into_iter().map(TreeNode::leaf));
        next = level;
    }
    TokenTree::new(next, top_k, config.k, draft.vocab_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SyntheticTarget, SyntheticTargetConfig};

    #[test]
    fn speedup_reductions() {
        let free = CostModel {
            c_target: 1.0,
            c_draft: 0.0,
        };
        assert_eq!(simulated_speedup(80, 10, &free, 7).unwrap(), 8.0);
        let even = CostModel::from_ratio(1.0).unwrap();
        assert_eq!(simulated_speedup(80, 10, &even, 7).unwrap(), 1.0);
        assert!(matches!(
            simulated_speedup(0, 0, &even, 7),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn speedup_increases_with_tau() {
        let cost = CostModel::default();
        let mut prev = f64::NEG_INFINITY;
        for committed in 10..=80 {
            let s = simulated_speedup(committed, 10, &cost, 7).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn agreement_cases() {
        let a: Vec<TokenId> = [1, 2, 3].map(TokenId).to_vec();
        let b: Vec<TokenId> = [4, 5, 6].map(TokenId).to_vec();
        assert_eq!(agreement_rate(&a, &a).unwrap(), 1.0);
        assert_eq!(agreement_rate(&a, &b).unwrap(), 0.0);
        assert_eq!(agreement_rate(&a, &a[..2]).unwrap(), 1.0);
        assert!(agreement_rate(&a, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DecodeConfig::default();
        assert!(c.validate().is_ok());
        c.k = 0;
        assert!(c.validate().is_err());
        c = DecodeConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = DecodeConfig {
            cost: CostModel {
                c_target: 0.0,
                c_draft: 0.1,
            },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn decode_rejects_bad_prompt() {
        let t = SyntheticTarget::new(SyntheticTargetConfig::default()).unwrap();
        let cfg = DecodeConfig::default();
        assert!(decode(&t, &t, &cfg, &[]).is_err());
        assert!(decode(&t, &t, &cfg, &[TokenId(64)]).is_err());
    }

    #[test]
    fn stop_token_ends_decode() {
        let t = SyntheticTarget::new(SyntheticTargetConfig::default()).unwrap();
        let prompt = [TokenId(1)];
        let greedy = greedy_decode(&t, &prompt, 20).unwrap();
        let stop = greedy[5];
        let first = greedy.iter().position(|&x| x == stop).unwrap();
        let cfg = DecodeConfig {
            stop_token: Some(stop),
            policy: VerificationPolicy::Strict,
            max_tokens: 20,
            ..Default::default()
        };
        let out = decode(&t, &t, &cfg, &prompt).unwrap();
        assert_eq!(out.tokens, greedy[..=first].to_vec());
    }
}
