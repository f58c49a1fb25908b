//! Saliency-map evaluation: f1 against ground truth and top-k ablation.

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::explainer::SaliencyMap;
use crate::masking::{Baseline, MaskedInput};
use crate::oracle::{evaluate_checked, CharacteristicOracle, OracleError};
use crate::partition::Region;
use crate::tensor::Tensor;

/// Threshold at which saliency maps are binarized for f1.
pub const F1_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: map has {map} entries, reference has {reference}")]
    LengthMismatch { map: usize, reference: usize },
    #[error("ablation sizes must be ascending and at most {max}, got {ks:?}")]
    InvalidKs { ks: Vec<usize>, max: usize },
    #[error("baseline shape does not match the input")]
    BaselineShape,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Binarizes `phi` at `> threshold` and scores it against `truth`.
///
/// Undefined precision or recall (nothing predicted, nothing true) counts as
/// 0, and f1 is 0 whenever both are 0.
pub fn f1_score(phi: &[f64], truth: &[bool], threshold: f64) -> Result<F1Score, MetricsError> {
    if phi.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { map: phi.len(), reference: truth.len() });
    }
    let (mut tp, mut predicted, mut actual) = (0usize, 0usize, 0usize);
    for (&v, &t) in phi.iter().zip(truth) {
        let p = v > threshold;
        predicted += usize::from(p);
        actual += usize::from(t);
        tp += usize::from(p && t);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, actual);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(F1Score { f1, precision, recall })
}

/// Per-image evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub evaluations_used: u64,
    pub visited_nodes: u64,
    #[serde(serialize_with = "as_millis")]
    pub wall_time: Duration,
}

fn as_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e3)
}

impl EvalReport {
    pub fn new(map: &SaliencyMap, truth: &[bool]) -> Result<Self, MetricsError> {
        let score = f1_score(&map.phi, truth, F1_THRESHOLD)?;
        Ok(Self {
            f1: score.f1,
            precision: score.precision,
            recall: score.recall,
            evaluations_used: map.evaluations_used,
            visited_nodes: map.visited_nodes,
            wall_time: map.wall_time,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCurve {
    pub ks: Vec<usize>,
    pub scores: Vec<f64>,
}

impl AblationCurve {
    /// `k,score` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,score\n");
        for (k, s) in self.ks.iter().zip(&self.scores) {
            out.push_str(&format!("{k},{s}\n"));
        }
        out
    }
}

/// Feature indices sorted by descending attribution, ties by ascending index.
pub fn ranking(phi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    order
}

/// Maximal horizontal runs of kept features, as 1-row regions.
fn kept_runs(removed: &[bool], width: usize) -> Vec<Region> {
    let mut out = Vec::new();
    for (row, line) in removed.chunks(width).enumerate() {
        let mut c = 0;
        while c < width {
            if line[c] {
                c += 1;
                continue;
            }
            let start = c;
            while c < width && !line[c] {
                c += 1;
            }
            out.push(Region::new(row, row + 1, start, c));
        }
    }
    out
}

/// Removes the `k` highest-attributed features (setting them to the
/// baseline) for each `k` in `ks` and records the model score.
pub fn ablate_topk<O: CharacteristicOracle + ?Sized>(
    input: &Tensor,
    phi: &[f64],
    oracle: &O,
    baseline: &Baseline,
    ks: &[usize],
    head: usize,
) -> Result<AblationCurve, MetricsError> {
    let shape = input.shape();
    let n = shape.features();
    if phi.len() != n {
        return Err(MetricsError::LengthMismatch { map: phi.len(), reference: n });
    }
    if baseline.shape() != shape {
        return Err(MetricsError::BaselineShape);
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) || ks.last().is_some_and(|&k| k > n) {
        return Err(MetricsError::InvalidKs { ks: ks.to_vec(), max: n });
    }
    let order = ranking(phi);
    let mut removed = vec![false; n];
    let mut done = 0;
    let mut batch = Vec::with_capacity(ks.len());
    for &k in ks {
        for &i in &order[done..k] {
            removed[i] = true;
        }
        done = k;
        batch.push(MaskedInput::new_unchecked(input, baseline, kept_runs(&removed, shape.width)));
    }
    let scores = evaluate_checked(oracle, &batch, head)?;
    Ok(AblationCurve { ks: ks.to_vec(), scores })
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub f1: f64,
    pub evals: u64,
    pub wall_time: f64,
}

/// `method,f1,evals,wall_time` rows with a header line; wall time in seconds.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("method,f1,evals,wall_time\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.method, r.f1, r.evals, r.wall_time));
    }
    out
}
