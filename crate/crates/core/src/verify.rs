//! Verification policies.
//!
//! Each draft position is classified by one three-branch rule:
//!
//! 1. draft equals the target's top-1 token: exact match, keep it;
//! 2. draft equals the target's top-2 token and `z2 / z1 > theta`
//!    (margin-aware policy only): relaxed accept, keep it;
//! 3. otherwise: reject, emit the target's top-1 token and stop.
//!
//! When every position is accepted a bonus token, the target's top-1 at the
//! position after the last draft, is appended.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit::{top_two, LogitVector, TokenId, TopTwo};
use crate::models::ScoringModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VerificationPolicy {
    /// Exact-match verification; output is identical to greedy decoding of
    /// the target.
    Strict,
    /// Also accepts the runner-up token when the logit ratio exceeds `theta`.
    MarginAware { theta: f64 },
}

impl VerificationPolicy {
    pub const DEFAULT_THETA: f64 = 0.9;

    pub fn margin_aware(theta: f64) -> Result<Self> {
        let policy = VerificationPolicy::MarginAware { theta };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            VerificationPolicy::Strict => Ok(()),
            VerificationPolicy::MarginAware { theta } if theta > 0.0 && theta <= 1.0 => Ok(()),
            VerificationPolicy::MarginAware { theta } => Err(Error::invalid(format!(
                "theta must lie in (0, 1], got {theta}"
            ))),
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            VerificationPolicy::Strict => None,
            VerificationPolicy::MarginAware { theta } => Some(theta),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VerificationPolicy::Strict => "strict",
            VerificationPolicy::MarginAware { .. } => "margin-aware",
        }
    }

    /// Whether a top-2 draft would be accepted at this position.
    fn relaxes(&self, top: &TopTwo) -> bool {
        match *self {
            VerificationPolicy::Strict => false,
            VerificationPolicy::MarginAware { theta } => top.ratio_exceeds(theta),
        }
    }

    /// Classifies a single draft token against the target's top-2.
    pub fn decide(&self, draft: TokenId, top: &TopTwo) -> PositionDecision {
        let label = if draft == top.v1 {
            Decision::ExactMatch
        } else if draft == top.v2 && self.relaxes(top) {
            Decision::Relaxed
        } else {
            Decision::Rejected
        };
        PositionDecision {
            label,
            draft_token: draft,
            emitted_token: if label == Decision::Rejected {
                top.v1
            } else {
                draft
            },
            ratio: top.ratio,
        }
    }
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        VerificationPolicy::MarginAware {
            theta: Self::DEFAULT_THETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    ExactMatch,
    Relaxed,
    Rejected,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        self != Decision::Rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionDecision {
    pub label: Decision,
    pub draft_token: TokenId,
    pub emitted_token: TokenId,
    pub ratio: Option<f64>,
}

/// Outcome of one draft-verify cycle. `committed` ends with the correction
/// token on rejection, or with the bonus token on full acceptance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleResult {
    pub decisions: Vec<PositionDecision>,
    pub committed: Vec<TokenId>,
    pub bonus: Option<TokenId>,
    pub accepted: usize,
}

impl CycleResult {
    pub fn rejected(&self) -> bool {
        self.decisions
            .last()
            .is_some_and(|d| d.label == Decision::Rejected)
    }

    pub fn count(&self, label: Decision) -> usize {
        self.decisions.iter().filter(|d| d.label == label).count()
    }

    fn push(&mut self, decision: PositionDecision) {
        if decision.label.is_accept() {
            self.accepted += 1;
        }
        self.committed.push(decision.emitted_token);
        self.decisions.push(decision);
    }

    fn push_bonus(&mut self, token: TokenId) {
        self.bonus = Some(token);
        self.committed.push(token);
    }
}

/// Verifies a draft against precomputed top-2 statistics.
///
/// `positions[i]` describes the target at the context extended by
/// `draft[..i]`. `bonus` is the target's top-1 after the whole draft; it is
/// appended only on full acceptance.
pub fn verify_positions(
    draft: &[TokenId],
    positions: &[TopTwo],
    bonus: Option<TokenId>,
    policy: VerificationPolicy,
) -> Result<CycleResult> {
    policy.validate()?;
    if draft.len() != positions.len() {
        return Err(Error::invalid(format!(
            "draft has {} tokens but {} target positions were supplied",
            draft.len(),
            positions.len()
        )));
    }
    let mut result = CycleResult::default();
    for (&token, top) in draft.iter().zip(positions) {
        let decision = policy.decide(token, top);
        result.push(decision);
        if decision.label == Decision::Rejected {
            return Ok(result);
        }
    }
    if let Some(token) = bonus {
        result.push_bonus(token);
    }
    Ok(result)
}

/// Verifies a K-token draft chain.
///
/// `target_logits` holds K+1 vectors: one per draft position, conditioned on
/// the context plus the preceding drafts, and one after the last draft that
/// supplies the bonus token.
pub fn verify_chain(
    draft: &[TokenId],
    target_logits: &[LogitVector],
    policy: VerificationPolicy,
) -> Result<CycleResult> {
    if draft.is_empty() {
        return Err(Error::invalid("draft chain is empty"));
    }
    if target_logits.len() != draft.len() + 1 {
        return Err(Error::invalid(format!(
            "a {}-token draft needs {} target logit vectors, got {}",
            draft.len(),
            draft.len() + 1,
            target_logits.len()
        )));
    }
    let (scored, bonus) = target_logits.split_at(draft.len());
    let positions = scored.iter().map(top_two).collect::<Result<Vec<_>>>()?;
    verify_positions(draft, &positions, Some(bonus[0].argmax()), policy)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub token: TokenId,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(token: TokenId) -> Self {
        Self {
            token,
            children: Vec::new(),
        }
    }
}

/// Candidate continuations; `roots` are the alternatives for the first
/// draft position. Child order is the drafter's preference order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTree {
    roots: Vec<TreeNode>,
}

impl TokenTree {
    /// Validates branching, depth and vocabulary bounds.
    pub fn new(
        roots: Vec<TreeNode>,
        max_branching: usize,
        max_depth: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if roots.is_empty() {
            return Err(Error::invalid("token tree is empty"));
        }
        fn check(
            level: &[TreeNode],
            depth: usize,
            max_branching: usize,
            max_depth: usize,
            vocab_size: usize,
        ) -> Result<()> {
            if depth > max_depth {
                return Err(Error::invalid(format!(
                    "token tree exceeds maximum depth {max_depth}"
                )));
            }
            if level.len() > max_branching {
                return Err(Error::invalid(format!(
                    "child set of {} nodes at depth {depth} exceeds branching {max_branching}",
                    level.len()
                )));
            }
            for node in level {
                if node.token.index() >= vocab_size {
                    return Err(Error::invalid(format!(
                        "tree token {} at depth {depth} is outside the vocabulary of size {vocab_size}",
                        node.token
                    )));
                }
                if !node.children.is_empty() {
                    check(
                        &node.children,
                        depth + 1,
                        max_branching,
                        max_depth,
                        vocab_size,
                    )?;
                }
            }
            Ok(())
        }
        check(&roots, 1, max_branching, max_depth, vocab_size)?;
        Ok(Self { roots })
    }

    /// Branching-1 tree holding a single chain.
    pub fn chain(tokens: &[TokenId], vocab_size: usize) -> Result<Self> {
        let node = tokens
            .iter()
            .rev()
            .fold(None, |child: Option<TreeNode>, &t| {
                Some(TreeNode {
                    token: t,
                    children: child.into_iter().collect(),
                })
            });
        let roots = node.into_iter().collect();
        Self::new(roots, 1, tokens.len(), vocab_size)
    }

    pub fn roots(&self) -> &[TreeNode] {
        &self.roots
    }

    /// Path through the first child at every level.
    pub fn greedy_path(&self) -> Vec<TokenId> {
        let mut path = Vec::new();
        let mut level = &self.roots;
        while let Some(first) = level.first() {
            path.push(first.token);
            level = &first.children;
        }
        path
    }

    pub fn node_count(&self) -> usize {
        fn count(level: &[TreeNode]) -> usize {
            level.iter().map(|n| 1 + count(&n.children)).sum()
        }
        count(&self.roots)
    }
}

/// Walks a token tree against the target.
///
/// At each depth the first child equal to the target's top-1 is followed;
/// failing that, under the margin-aware policy, the first child equal to the
/// top-2 token when the ratio exceeds theta. When no child qualifies the
/// top-1 token is emitted as correction (the first child is recorded as the
/// rejected draft). Reaching a leaf appends a bonus token.
pub fn verify_tree<M: ScoringModel + ?Sized>(
    tree: &TokenTree,
    target: &M,
    context: &[TokenId],
    policy: VerificationPolicy,
) -> Result<CycleResult> {
    policy.validate()?;
    let mut ctx = context.to_vec();
    let mut level: &[TreeNode] = tree.roots();
    let mut result = CycleResult::default();
    loop {
        let top = top_two(&target.score(&ctx)?)?;
        if level.is_empty() {
            result.push_bonus(top.v1);
            return Ok(result);
        }
        let exact = level.iter().find(|n| n.token == top.v1);
        let chosen = exact.or_else(|| {
            level
                .iter()
                .find(|n| n.token == top.v2)
                .filter(|_| policy.relaxes(&top))
        });
        match chosen {
            Some(node) => {
                result.push(policy.decide(node.token, &top));
                ctx.push(node.token);
                level = &node.children;
            }
            None => {
                result.push(policy.decide(level[0].token, &top));
                return Ok(result);
            }
        }
    }
}
