//! Distributional statistics over a trace: top-1 logits, logit ratios
//! `z2 / z1`, probability ratios `p2 / p1`, and the fraction of steps inside
//! the relaxation zone `z2 / z1 > theta`.
//!
//! Probabilities are softmax values at the record's temperature, normalized
//! over the recorded top-k list only (the rest of the vocabulary is not in the
//! trace). `p2 / p1 = exp((z2 - z1) / T)` does not depend on that choice.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::logit::{softmax, LogitVector};
use crate::trace::TraceFile;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub label: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    /// Equal-width bins over `[lower, upper]`, last bin closed. Values
    /// outside the range are clamped into the edge bins.
    fn uniform(lower: f64, upper: f64, bins: usize, values: impl Iterator<Item = f64>) -> Self {
        let width = (upper - lower) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in values {
            let idx = ((v - lower) / width).floor();
            let idx = if idx.is_nan() {
                0
            } else {
                (idx.max(0.0) as usize).min(bins - 1)
            };
            counts[idx] += 1;
        }
        let bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| {
                let lo = lower + width * i as f64;
                let hi = if i + 1 == bins {
                    upper
                } else {
                    lower + width * (i + 1) as f64
                };
                HistogramBin {
                    label: format!("bin{i:02}"),
                    lower: Some(lo),
                    upper: Some(hi),
                    count,
                }
            })
            .collect();
        Histogram { bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Per-record tuple for scatter plots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub step: u64,
    pub z1: f64,
    pub z2: f64,
    pub p1: f64,
    pub p2: f64,
    pub ratio: Option<f64>,
    pub prob_ratio: f64,
    pub in_zone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub theta: f64,
    pub record_count: usize,
    pub zone_count: usize,
    pub zone_fraction: f64,
    pub top1_logits: Histogram,
    pub logit_ratios: Histogram,
    pub prob_ratios: Histogram,
    pub scatter: Vec<ScatterPoint>,
}

impl AnalysisReport {
    /// Smallest and largest `p2 / p1` among in-zone records.
    pub fn zone_prob_ratio_range(&self) -> Option<(f64, f64)> {
        self.scatter
            .iter()
            .filter(|p| p.in_zone)
            .map(|p| p.prob_ratio)
            .fold(None, |acc, r| match acc {
                None => Some((r, r)),
                Some((lo, hi)) => Some((lo.min(r), hi.max(r))),
            })
    }

    /// `log10(max / min)` of in-zone probability ratios.
    pub fn zone_prob_ratio_decades(&self) -> Option<f64> {
        self.zone_prob_ratio_range()
            .map(|(lo, hi)| (hi / lo).log10())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "records: {}\nrelaxation zone (z2/z1 > {}): {} of {} = {:.6}\n",
            self.record_count, self.theta, self.zone_count, self.record_count, self.zone_fraction
        );
        if let Some((lo, hi)) = self.zone_prob_ratio_range() {
            s.push_str(&format!(
                "in-zone p2/p1 range: [{lo:.6e}, {hi:.6e}] ({:.3} decades)\n",
                (hi / lo).log10()
            ));
        }
        s
    }

    /// Writes `top1_histogram.csv`, `ratio_histogram.csv`,
    /// `prob_ratio_histogram.csv` and `scatter.csv` into `dir`.
    pub fn write_csv_set(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, hist) in [
            ("top1_histogram.csv", &self.top1_logits),
            ("ratio_histogram.csv", &self.logit_ratios),
            ("prob_ratio_histogram.csv", &self.prob_ratios),
        ] {
            write_rows(&dir.join(name), &hist.bins)?;
        }
        write_rows(&dir.join("scatter.csv"), &self.scatter)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for row in rows {
        w.serialize(row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn analyze(trace: &TraceFile, theta: f64) -> Result<AnalysisReport> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid(format!(
            "theta must lie in (0, 1], got {theta}"
        )));
    }
    let mut scatter = Vec::with_capacity(trace.records.len());
    for record in &trace.records {
        let top = record.top_two()?;
        let logits = LogitVector::new(
            record.step as usize,
            record.top_k.iter().map(|&(_, z)| z).collect(),
        )?;
        let probs = softmax(&logits, record.temperature)?;
        let (p1, p2) = (probs.values()[0], probs.values()[1]);
        scatter.push(ScatterPoint {
            step: record.step,
            z1: top.z1,
            z2: top.z2,
            p1,
            p2,
            ratio: top.ratio,
            prob_ratio: ((top.z2 - top.z1) / record.temperature).exp(),
            in_zone: top.ratio_exceeds(theta),
        });
    }

    let record_count = scatter.len();
    let zone_count = scatter.iter().filter(|p| p.in_zone).count();
    let zone_fraction = if record_count == 0 {
        0.0
    } else {
        zone_count as f64 / record_count as f64
    };

    let (lo, hi) = scatter
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.z1), hi.max(p.z1))
        });
    let (lo, hi) = if record_count == 0 {
        (0.0, 1.0)
    } else {
        let (lo, hi) = (lo.floor(), hi.ceil());
        if hi > lo {
            (lo, hi)
        } else {
            (lo, lo + 1.0)
        }
    };
    let top1_logits = Histogram::uniform(lo, hi, HISTOGRAM_BINS, scatter.iter().map(|p| p.z1));

    let mut logit_ratios = Histogram::uniform(
        0.0,
        1.0,
        HISTOGRAM_BINS,
        scatter.iter().filter_map(|p| p.ratio.filter(|&r| r >= 0.0)),
    );
    logit_ratios.bins.insert(
        0,
        HistogramBin {
            label: "negative".into(),
            lower: None,
            upper: Some(0.0),
            count: scatter
                .iter()
                .filter(|p| p.ratio.is_some_and(|r| r < 0.0))
                .count(),
        },
    );
    logit_ratios.bins.push(HistogramBin {
        label: "undefined".into(),
        lower: None,
        upper: None,
        count: scatter.iter().filter(|p| p.ratio.is_none()).count(),
    });

    let prob_ratios = Histogram::uniform(
        0.0,
        1.0,
        HISTOGRAM_BINS,
        scatter.iter().map(|p| p.prob_ratio),
    );

    Ok(AnalysisReport {
        theta,
        record_count,
        zone_count,
        zone_fraction,
        top1_logits,
        logit_ratios,
        prob_ratios,
        scatter,
    })
}
