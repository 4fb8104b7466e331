//! Logit value types and the pure numeric operations verification is built on:
//! top-2 extraction, the logit ratio `r = z2 / z1`, the equivalent adaptive
//! margin test `z1 - z2 < (1 - theta) * z1`, and temperature softmax.

use std::fmt;

use crate::error::{Error, Result};

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

/// Unnormalized scores over the vocabulary at one decode position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    step: usize,
    values: Vec<f64>,
}

impl LogitVector {
    /// Rejects empty vectors and non-finite entries.
    pub fn new(step: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("logit vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "logit for token {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { step, values })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, token: TokenId) -> Option<f64> {
        self.values.get(token.index()).copied()
    }

    /// Argmax with smallest-id tie-break.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.values)
    }

    /// The `k` highest-scoring tokens, descending by logit with ascending
    /// id among equal logits.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut ranked: Vec<(TokenId, f64)> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &z)| (TokenId(i as u32), z))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

pub(crate) fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// Normalized distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Top-1 and top-2 candidates of one position with their ratio and margin.
///
/// `ratio` is `None` when `z1 <= 0`; relaxation is disabled for such steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopTwo {
    pub v1: TokenId,
    pub v2: TokenId,
    pub z1: f64,
    pub z2: f64,
    pub ratio: Option<f64>,
    pub margin: f64,
}

impl TopTwo {
    /// Builds the statistics from an already-ranked pair.
    pub fn from_ranked(v1: TokenId, z1: f64, v2: TokenId, z2: f64) -> Result<Self> {
        if v1 == v2 {
            return Err(Error::invalid(format!("top-1 and top-2 share token {v1}")));
        }
        if !(z1.is_finite() && z2.is_finite()) {
            return Err(Error::invalid("top-2 logits must be finite"));
        }
        if z1 < z2 {
            return Err(Error::invalid(format!(
                "top-1 logit {z1} is below top-2 logit {z2}"
            )));
        }
        Ok(Self {
            v1,
            v2,
            z1,
            z2,
            ratio: logit_ratio(z1, z2),
            margin: z1 - z2,
        })
    }

    /// True when the ratio is defined and strictly above `theta`.
    pub fn ratio_exceeds(&self, theta: f64) -> bool {
        matches!(self.ratio, Some(r) if r > theta)
    }
}

/// Extracts the top-2 tokens; ties go to the smallest id.
pub fn top_two(logits: &LogitVector) -> Result<TopTwo> {
    let values = logits.values();
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "top-2 needs a vocabulary of at least 2, got {}",
            values.len()
        )));
    }
    let (mut i1, mut i2) = if values[1] > values[0] {
        (1, 0)
    } else {
        (0, 1)
    };
    for (i, &v) in values.iter().enumerate().skip(2) {
        if v > values[i1] {
            i2 = i1;
            i1 = i;
        } else if v > values[i2] {
            i2 = i;
        }
    }
    TopTwo::from_ranked(
        TokenId(i1 as u32),
        values[i1],
        TokenId(i2 as u32),
        values[i2],
    )
}

/// `z2 / z1`, or `None` outside the positive domain `z1 > 0`.
///
/// When `z2 <= 0 < z1` the raw (non-positive) ratio is returned and simply
/// fails any threshold in `(0, 1]`.
pub fn logit_ratio(z1: f64, z2: f64) -> Option<f64> {
    (z1 > 0.0).then(|| z2 / z1)
}

/// Margin form of the relaxation test: `margin < (1 - theta) * z1`.
///
/// Verification decides with [`TopTwo::ratio_exceeds`]; this form exists as
/// an independent cross-check. Returns false when `z1 <= 0`.
pub fn adaptive_margin_check(top: &TopTwo, theta: f64) -> bool {
    top.z1 > 0.0 && top.margin < (1.0 - theta) * top.z1
}

/// Softmax of `logits / temperature` with max-subtraction.
pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<ProbabilityVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let values = logits.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = values
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    for p in &mut exps {
        *p /= total;
    }
    Ok(ProbabilityVector(exps))
}
