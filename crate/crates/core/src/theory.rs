//! Closed-form cost and accuracy bounds, and Monte Carlo checks of them
//! against the explainer itself.
//!
//! Under the multiple-instance model each feature is important independently
//! with probability `ρ`, and the model scores 1 iff a kept feature is
//! important. With `τ = 0` and `s = 1` the explorer visits exactly the root
//! plus every node containing an important feature, which gives the
//! recursion in [`expected_visited_nodes`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bench::PixelMilOracle;
use crate::explainer::{explain_depth_first, ExplainError, ExplainerConfig};
use crate::masking::Baseline;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

/// Parameters of the Bernoulli importance model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MilParams {
    /// Number of features.
    pub n: usize,
    pub gamma: usize,
    /// Probability that a feature is important.
    pub rho: f64,
    /// Minimal feature size.
    pub s: usize,
}

impl MilParams {
    pub fn new(n: usize, gamma: usize, rho: f64) -> Self {
        Self { n, gamma, rho, s: 1 }
    }

    pub fn with_feature_size(mut self, s: usize) -> Self {
        self.s = s;
        self
    }

    fn validate(&self) -> Result<(), TheoryError> {
        if self.n == 0 {
            return Err(TheoryError::InvalidParams("n must be at least 1".into()));
        }
        if self.gamma != 2 && self.gamma != 4 {
            return Err(TheoryError::InvalidParams(format!("gamma must be 2 or 4, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(TheoryError::InvalidParams(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.s == 0 {
            return Err(TheoryError::InvalidParams("s must be at least 1".into()));
        }
        Ok(())
    }

    /// Input layout used by the simulation: a vector for `γ = 2`, a square
    /// image for `γ = 4`.
    fn shape(&self) -> Result<Shape, TheoryError> {
        if self.gamma == 2 {
            return Ok(Shape::vector(self.n));
        }
        let side = (self.n as f64).sqrt().round() as usize;
        if side * side != self.n || side < 2 {
            return Err(TheoryError::InvalidParams(format!(
                "gamma = 4 needs a square image, {} is not a perfect square",
                self.n
            )));
        }
        Ok(Shape::image(1, side, side))
    }
}

/// Probability that a child of the root holds no important feature:
/// `(1 - ρ)^(|S| / γ)`.
fn root_child_empty(size: f64, gamma: f64, rho: f64) -> f64 {
    (1.0 - rho).powf(size / gamma)
}

/// Probability that a child of a node known to hold an important feature
/// holds none itself:
/// `(1 - ρ)^(|S|/γ) · (1 - (1 - ρ)^(|S|(γ-1)/γ)) / (1 - (1 - ρ)^|S|)`.
fn conditional_child_empty(size: f64, gamma: f64, rho: f64) -> f64 {
    let keep = 1.0 - rho;
    keep.powf(size / gamma) * (1.0 - keep.powf(size * (gamma - 1.0) / gamma)) / (1.0 - keep.powf(size))
}

/// Expected nodes of a subtree of `size` features conditioned on holding at
/// least one important feature. Single-feature nodes count 1.
fn conditioned_subtree(size: f64, gamma: f64, rho: f64) -> f64 {
    if size <= 1.0 + 1e-9 {
        return 1.0;
    }
    let advance = 1.0 - conditional_child_empty(size, gamma, rho);
    1.0 + gamma * advance * conditioned_subtree(size / gamma, gamma, rho)
}

/// Expected number of visited nodes for `τ = 0`, `s = 1`:
/// `E|T_0| = 1 + γ (1 - p(S_0)) E|T_1|`.
///
/// `n` need not be a power of `γ`; node sizes are then carried as reals.
pub fn expected_visited_nodes(params: &MilParams) -> Result<f64, TheoryError> {
    params.validate()?;
    if params.s != 1 {
        return Err(TheoryError::InvalidParams("the visited-node recursion assumes s = 1".into()));
    }
    let (n, gamma, rho) = (params.n as f64, params.gamma as f64, params.rho);
    if params.n == 1 {
        return Ok(1.0);
    }
    let advance = 1.0 - root_child_empty(n, gamma, rho);
    if advance == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 + gamma * advance * conditioned_subtree(n / gamma, gamma, rho))
}

/// Empirical mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, trials: n }
    }
}

/// Random generator for trial `trial` of a run seeded with `seed`: one
/// ChaCha stream per trial, so trials are independent and reproducible in
/// any execution order.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Draws i.i.d. Bernoulli(ρ) importance indicators.
pub fn sample_importance<R: Rng>(rng: &mut R, n: usize, rho: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < rho).collect()
}

/// Runs the depth-first explainer with `τ = 0` on `trials` random
/// multiple-instance inputs and reports the visited-node count.
pub fn simulate_visited_nodes(params: &MilParams, trials: usize, seed: u64) -> Result<Estimate, TheoryError> {
    params.validate()?;
    if trials == 0 {
        return Err(TheoryError::InvalidParams("trials must be at least 1".into()));
    }
    let shape = params.shape()?;
    let input = Tensor::zeros(shape);
    let baseline = Baseline::zeros(shape);
    let cfg = ExplainerConfig::new(params.gamma, params.s);
    let counts: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let importance = sample_importance(&mut rng, params.n, params.rho);
            let oracle = PixelMilOracle::for_shape(shape, &importance);
            explain_depth_first(&input, &oracle, &baseline, &cfg).map(|e| e.map.visited_nodes as f64)
        })
        .collect::<Result<_, _>>()?;
    Ok(Estimate::from_samples(&counts))
}

/// `max(1/√s, √(k/n))`, the lower bound on the cosine similarity between the
/// exact map and the map computed with minimal feature size `s`.
pub fn similarity_lower_bound(s: usize, k: usize, n: usize) -> Result<f64, TheoryError> {
    if s == 0 || s > n {
        return Err(TheoryError::InvalidParams(format!("need 1 <= s <= n, got s = {s}, n = {n}")));
    }
    if k == 0 || k > n {
        return Err(TheoryError::InvalidParams(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    Ok((1.0 / (s as f64).sqrt()).max((k as f64 / n as f64).sqrt()))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, TheoryError> {
    if a.len() != b.len() {
        return Err(TheoryError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TheoryError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// The exact Shapley map of a multiple-instance model: `1/k` on each of the
/// `k` important features, 0 elsewhere.
pub fn exact_mil_map(importance: &[bool]) -> Vec<f64> {
    let k = importance.iter().filter(|&&a| a).count();
    if k == 0 {
        return vec![0.0; importance.len()];
    }
    let v = 1.0 / k as f64;
    importance.iter().map(|&a| if a { v } else { 0.0 }).collect()
}
