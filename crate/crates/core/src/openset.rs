//! Open-set decision layer: temperature-scaled softmax, maximum-probability
//! thresholding, the open-set accuracy report, and the (temperature,
//! threshold) grid sweep over cached logits.
//!
//! A sample is accepted as its argmax class when `p_max ≥ τ` and flagged
//! `Illegal` otherwise; the boundary case is inclusive. Ties in the
//! argmax break to the lowest class index. Everything here is a pure
//! function of its inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OpensetError {
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("threshold must be in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("empty logit vector")]
    EmptyLogits,
    #[error("decision count {decisions} does not match label count {labels}")]
    CountMismatch { decisions: usize, labels: usize },
    #[error("class index {class} out of range for {classes} known classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty sweep grid")]
    EmptyGrid,
}

/// Decision parameters: softmax temperature and acceptance threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub temperature: f64,
    pub threshold: f64,
}

impl DecisionConfig {
    pub fn new(temperature: f64, threshold: f64) -> Result<Self, OpensetError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(OpensetError::BadTemperature(temperature));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(OpensetError::BadThreshold(threshold));
        }
        Ok(Self {
            temperature,
            threshold,
        })
    }
}

/// A sample's ground truth in the open-set protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    Known(usize),
    Illegal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Legal(usize),
    Illegal,
}

/// Open-set verdict with the evidence behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub verdict: Verdict,
    pub p_max: f64,
    pub probabilities: Vec<f64>,
}

/// `p_k = exp(z_k/T) / Σ_j exp(z_j/T)`, computed with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>, OpensetError> {
    if logits.is_empty() {
        return Err(OpensetError::EmptyLogits);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(OpensetError::BadTemperature(temperature));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(probs)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Applies the threshold rule: `Legal(argmax)` iff `p_max ≥ τ`.
pub fn decide(logits: &[f64], config: &DecisionConfig) -> Result<Decision, OpensetError> {
    let probabilities = softmax_with_temperature(logits, config.temperature)?;
    let best = argmax(&probabilities);
    let p_max = probabilities[best];
    let verdict = if p_max >= config.threshold {
        Verdict::Legal(best)
    } else {
        Verdict::Illegal
    };
    Ok(Decision {
        verdict,
        p_max,
        probabilities,
    })
}

/// Counts and the `(K+1)×(K+1)` confusion matrix for one evaluation;
/// the last row/column stands for `Illegal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_legal: usize,
    pub n_illegal: usize,
    pub n_correct_legal: usize,
    pub n_correct_illegal: usize,
    pub open_accuracy: f64,
    /// Row = ground truth, column = verdict, index K = Illegal.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores verdicts against ground truth. A legal sample counts as
/// correct only when accepted into its own class; an illegal sample
/// only when rejected.
pub fn open_accuracy(
    decisions: &[Verdict],
    truth: &[GroundTruth],
    n_classes: usize,
) -> Result<EvalReport, OpensetError> {
    if decisions.len() != truth.len() {
        return Err(OpensetError::CountMismatch {
            decisions: decisions.len(),
            labels: truth.len(),
        });
    }
    let mut report = EvalReport {
        n: truth.len(),
        n_legal: 0,
        n_illegal: 0,
        n_correct_legal: 0,
        n_correct_illegal: 0,
        open_accuracy: 0.0,
        confusion: vec![vec![0; n_classes + 1]; n_classes + 1],
    };
    for (verdict, gt) in decisions.iter().zip(truth) {
        let row = match gt {
            GroundTruth::Known(k) => {
                if *k >= n_classes {
                    return Err(OpensetError::ClassOutOfRange {
                        class: *k,
                        classes: n_classes,
                    });
                }
                report.n_legal += 1;
                *k
            }
            GroundTruth::Illegal => {
                report.n_illegal += 1;
                n_classes
            }
        };
        let col = match verdict {
            Verdict::Legal(k) => {
                if *k >= n_classes {
                    return Err(OpensetError::ClassOutOfRange {
                        class: *k,
                        classes: n_classes,
                    });
                }
                *k
            }
            Verdict::Illegal => n_classes,
        };
        report.confusion[row][col] += 1;
        match (gt, verdict) {
            (GroundTruth::Known(k), Verdict::Legal(v)) if k == v => report.n_correct_legal += 1,
            (GroundTruth::Illegal, Verdict::Illegal) => report.n_correct_illegal += 1,
            _ => {}
        }
    }
    if report.n > 0 {
        report.open_accuracy =
            (report.n_correct_legal + report.n_correct_illegal) as f64 / report.n as f64;
    }
    Ok(report)
}

/// One sweep cell: the accuracy of a `(T, τ)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub temperature: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub n_correct_legal: usize,
    pub n_correct_illegal: usize,
}

/// Full sweep output: every cell (temperature-major order) plus the best.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
}

/// Inclusive float grid `start, start+step, …` up to `end` (with a half-step
/// tolerance so binary rounding does not drop the endpoint).
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let mut points = Vec::new();
    let mut i = 0u64;
    loop {
        let v = start + i as f64 * step;
        if v > end + step * 0.5 {
            break;
        }
        points.push(v.min(end));
        i += 1;
    }
    points
}

/// Evaluates `open_accuracy` for every `(T, τ)` pair over cached logits.
///
/// Logits are provided once; per temperature the softmax is computed
/// once per row, then every threshold reuses the cached `(argmax,
/// p_max)` pair. The best cell is the highest accuracy, ties broken
/// toward the earlier grid position.
pub fn sweep(
    logit_rows: &[Vec<f64>],
    truth: &[GroundTruth],
    n_classes: usize,
    temperatures: &[f64],
    thresholds: &[f64],
) -> Result<SweepResult, OpensetError> {
    if temperatures.is_empty() || thresholds.is_empty() {
        return Err(OpensetError::EmptyGrid);
    }
    if logit_rows.len() != truth.len() {
        return Err(OpensetError::CountMismatch {
            decisions: logit_rows.len(),
            labels: truth.len(),
        });
    }
    let n = truth.len();
    let mut cells = Vec::with_capacity(temperatures.len() * thresholds.len());
    for &t in temperatures {
        // cache (argmax, p_max, truth row) per sample at this temperature
        let mut cached = Vec::with_capacity(n);
        for (row, gt) in logit_rows.iter().zip(truth) {
            let probs = softmax_with_temperature(row, t)?;
            let best = argmax(&probs);
            cached.push((best, probs[best], *gt));
        }
        for &tau in thresholds {
            let mut correct_legal = 0;
            let mut correct_illegal = 0;
            for &(best, p_max, gt) in &cached {
                let legal = p_max >= tau;
                match gt {
                    GroundTruth::Known(k) => {
                        if legal && best == k {
                            correct_legal += 1;
                        }
                    }
                    GroundTruth::Illegal => {
                        if !legal {
                            correct_illegal += 1;
                        }
                    }
                }
            }
            cells.push(SweepCell {
                temperature: t,
                threshold: tau,
                accuracy: if n > 0 {
                    (correct_legal + correct_illegal) as f64 / n as f64
                } else {
                    0.0
                },
                n_correct_legal: correct_legal,
                n_correct_illegal: correct_illegal,
            });
        }
    }
    let best = cells
        .iter()
        .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
        .expect("non-empty grid")
        .clone();
    let _ = n_classes;
    Ok(SweepResult { cells, best })
}
