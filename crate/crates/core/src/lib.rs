//! Speculative-decoding verification lab.
//!
//! Implements strict exact-match verification and margin-aware verification
//! (accepting the target's runner-up token when the top-2 logit ratio exceeds
//! a threshold), drives both over deterministic synthetic target/draft pairs
//! or replayed logit traces, and reports acceptance length, relaxation counts
//! and cost-model speedup.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod error;
mod hash;
pub mod logit;
pub mod models;
pub mod trace;
pub mod verify;

pub use engine::{
    agreement_rate, decode, simulated_speedup, CostModel, DecodeConfig, DecodeMetrics, DecodeMode,
    DecodeOutcome,
};
pub use error::{Error, Result};
pub use logit::{
    adaptive_margin_check, logit_ratio, softmax, top_two, LogitVector, ProbabilityVector, TokenId,
    TopTwo,
};
pub use models::{
    draft_chain, AdversarialDraft, DraftMode, PerturbedDraft, PerturbedDraftConfig, ScoringModel,
    SyntheticTarget, SyntheticTargetConfig,
};
pub use verify::{
    verify_chain, verify_tree, CycleResult, Decision, PositionDecision, TokenTree, TreeNode,
    VerificationPolicy,
};
