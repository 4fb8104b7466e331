//! Experiment specification: a TOML file plus command-line overrides.
//!
//! ```toml
//! seed = 7              # root seed; per-repetition seeds derive from it
//! repetitions = 1
//! prompt = [1, 2]
//!
//! [target]              # synthetic target model
//! vocab_size = 64
//! order = 2
//! logit_offset = 0.0
//! logit_spread = 2.0
//! scale_min = 0.5
//! scale_max = 3.5
//! positional = true     # hash the decode position too
//!
//! [draft]
//! noise_scale = 1.0     # sigma of the draft perturbation
//! mode = "greedy"       # or "sampled"
//!
//! [decode]
//! policy = "margin-aware"   # or "strict"
//! theta = [0.9]
//! k = [7]
//! temperature = [1.0]
//! max_tokens = 256
//! # stop_token = 0
//! # tree_top_k = 4      # verify a draft tree instead of a chain
//!
//! [cost]
//! c_target = 1.0
//! c_draft = 0.05
//!
//! [output]
//! # csv = "results.csv"
//! ```
//!
//! Every key is optional; omitted keys take the defaults shown.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::engine::{CostModel, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::hash::hash_words;
use crate::logit::TokenId;
use crate::models::{DraftMode, PerturbedDraftConfig, SyntheticTargetConfig};
use crate::verify::VerificationPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Strict,
    #[default]
    #[value(alias = "mars")]
    MarginAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub vocab_size: usize,
    pub order: usize,
    pub logit_offset: f64,
    pub logit_spread: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub positional: bool,
}

impl Default for TargetSpec {
    fn default() -> Self {
        let d = SyntheticTargetConfig::default();
        Self {
            vocab_size: d.vocab_size,
            order: d.order,
            logit_offset: d.logit_offset,
            logit_spread: d.logit_spread,
            scale_min: d.scale_min,
            scale_max: d.scale_max,
            positional: d.positional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DraftSpec {
    pub noise_scale: f64,
    pub mode: DraftMode,
}

impl Default for DraftSpec {
    fn default() -> Self {
        Self {
            noise_scale: PerturbedDraftConfig::default().noise_scale,
            mode: DraftMode::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSpec {
    pub policy: PolicyKind,
    pub theta: Vec<f64>,
    pub k: Vec<usize>,
    pub temperature: Vec<f64>,
    pub max_tokens: usize,
    pub stop_token: Option<u32>,
    pub tree_top_k: Option<usize>,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        Self {
            policy: PolicyKind::MarginAware,
            theta: vec![VerificationPolicy::DEFAULT_THETA],
            k: vec![7],
            temperature: vec![1.0],
            max_tokens: 256,
            stop_token: None,
            tree_top_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub repetitions: usize,
    pub prompt: Vec<u32>,
    pub target: TargetSpec,
    pub draft: DraftSpec,
    pub decode: DecodeSpec,
    pub cost: CostModel,
    pub output: OutputSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 1,
            prompt: vec![1],
            target: TargetSpec::default(),
            draft: DraftSpec::default(),
            decode: DecodeSpec::default(),
            cost: CostModel::default(),
            output: OutputSpec::default(),
        }
    }
}

/// Seeds of one repetition, shared by every grid point so that grid points
/// form paired comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub target: u64,
    pub noise: u64,
    pub rng: u64,
}

impl RunSeeds {
    pub fn derive(root: u64, repetition: usize) -> Self {
        let h = |salt: u64| hash_words(root, [repetition as u64, salt]);
        Self {
            target: h(1),
            noise: h(2),
            rng: h(3),
        }
    }
}

/// One row of an experiment: a grid point at one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub theta: Option<f64>,
    pub k: usize,
    pub temperature: f64,
    pub repetition: usize,
    pub seeds: RunSeeds,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("spec file: {}", e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decode;
        if self.repetitions < 1 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        if self.prompt.is_empty() {
            return Err(Error::invalid("prompt must be non-empty"));
        }
        if d.k.is_empty() {
            return Err(Error::invalid("decode.k grid is empty"));
        }
        if d.temperature.is_empty() {
            return Err(Error::invalid("decode.temperature grid is empty"));
        }
        if d.policy == PolicyKind::MarginAware && d.theta.is_empty() {
            return Err(Error::invalid("decode.theta grid is empty"));
        }
        if let Some(&theta) = d.theta.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::invalid(format!(
                "decode.theta value {theta} is outside (0, 1]"
            )));
        }
        if let Some(&k) = d.k.iter().find(|&&k| k < 1) {
            return Err(Error::invalid(format!(
                "decode.k value {k} must be at least 1"
            )));
        }
        if let Some(&t) = d.temperature.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::invalid(format!(
                "decode.temperature value {t} must be positive"
            )));
        }
        if d.max_tokens < 1 {
            return Err(Error::invalid("decode.max_tokens must be at least 1"));
        }
        if d.tree_top_k == Some(0) {
            return Err(Error::invalid("decode.tree_top_k must be at least 1"));
        }
        self.target_config(0).validate()?;
        self.draft_config(0).validate()?;
        if let Some(&t) = self
            .prompt
            .iter()
            .find(|&&t| t as usize >= self.target.vocab_size)
        {
            return Err(Error::invalid(format!(
                "prompt token {t} is outside target.vocab_size {}",
                self.target.vocab_size
            )));
        }
        if let Some(t) = d
            .stop_token
            .filter(|&t| t as usize >= self.target.vocab_size)
        {
            return Err(Error::invalid(format!(
                "decode.stop_token {t} is outside target.vocab_size {}",
                self.target.vocab_size
            )));
        }
        self.cost.validate()
    }

    /// Rejects grids with more than one point (used by `run` and `record`).
    pub fn require_single_point(&self) -> Result<()> {
        let d = &self.decode;
        let theta_points = if d.policy == PolicyKind::Strict {
            1
        } else {
            d.theta.len()
        };
        for (field, n) in [
            ("decode.theta", theta_points),
            ("decode.k", d.k.len()),
            ("decode.temperature", d.temperature.len()),
        ] {
            if n != 1 {
                return Err(Error::invalid(format!(
                    "{field} has {n} values; this command runs a single grid point (use sweep)"
                )));
            }
        }
        Ok(())
    }

    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        self.prompt.iter().copied().map(TokenId).collect()
    }

    pub fn target_config(&self, seed: u64) -> SyntheticTargetConfig {
        let t = &self.target;
        SyntheticTargetConfig {
            seed,
            vocab_size: t.vocab_size,
            order: t.order,
            logit_offset: t.logit_offset,
            logit_spread: t.logit_spread,
            scale_min: t.scale_min,
            scale_max: t.scale_max,
            positional: t.positional,
        }
    }

    pub fn draft_config(&self, noise_seed: u64) -> PerturbedDraftConfig {
        PerturbedDraftConfig {
            noise_seed,
            noise_scale: self.draft.noise_scale,
        }
    }

    /// Grid rows in output order: theta, then k, then temperature (each in
    /// file order), then repetition. Strict runs have a single theta-less
    /// point on the theta axis.
    pub fn jobs(&self) -> Vec<Job> {
        let d = &self.decode;
        let thetas: Vec<Option<f64>> = match d.policy {
            PolicyKind::Strict => vec![None],
            PolicyKind::MarginAware => d.theta.iter().copied().map(Some).collect(),
        };
        let mut jobs = Vec::new();
        for &theta in &thetas {
            for &k in &d.k {
                for &temperature in &d.temperature {
                    for repetition in 0..self.repetitions {
                        jobs.push(Job {
                            theta,
                            k,
                            temperature,
                            repetition,
                            seeds: RunSeeds::derive(self.seed, repetition),
                        });
                    }
                }
            }
        }
        jobs
    }

    pub fn decode_config(&self, job: &Job) -> DecodeConfig {
        let policy = match job.theta {
            None => VerificationPolicy::Strict,
            Some(theta) => VerificationPolicy::MarginAware { theta },
        };
        DecodeConfig {
            k: job.k,
            max_tokens: self.decode.max_tokens,
            temperature: job.temperature,
            policy,
            draft_mode: self.draft.mode,
            rng_seed: job.seeds.rng,
            stop_token: self.decode.stop_token.map(TokenId),
            mode: match self.decode.tree_top_k {
                Some(top_k) => DecodeMode::Tree { top_k },
                None => DecodeMode::Chain,
            },
            cost: self.cost,
        }
    }
}
