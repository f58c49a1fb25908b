//! The characteristic-function contract: `v(C) = f(X_C)`.

use thiserror::Error;

use crate::bridge::BridgeError;
use crate::masking::MaskedInput;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("score head {head} out of range for a model with {outputs} outputs")]
    HeadOutOfRange { head: usize, outputs: usize },
    #[error("oracle returned {got} scores for a batch of {expected}")]
    BatchLength { expected: usize, got: usize },
    #[error("oracle returned a non-finite score {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("{0}")]
    Failed(String),
}

/// A model scored on masked inputs.
///
/// `evaluate` receives a batch of masked inputs and returns one score per
/// input, taken from output `head`. Implementations must be deterministic for
/// the duration of an explanation.
pub trait CharacteristicOracle {
    fn evaluate(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, OracleError>;

    /// Number of output heads the model exposes.
    fn outputs(&self) -> usize {
        1
    }

    /// Whether batches may be issued from several threads at once.
    fn concurrent(&self) -> bool {
        false
    }
}

impl<O: CharacteristicOracle + ?Sized> CharacteristicOracle for &O {
    fn evaluate(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, OracleError> {
        (**self).evaluate(batch, head)
    }
    fn outputs(&self) -> usize {
        (**self).outputs()
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

impl<O: CharacteristicOracle + ?Sized> CharacteristicOracle for Box<O> {
    fn evaluate(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, OracleError> {
        (**self).evaluate(batch, head)
    }
    fn outputs(&self) -> usize {
        (**self).outputs()
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

pub(crate) fn check_head(head: usize, outputs: usize) -> Result<(), OracleError> {
    if head < outputs {
        Ok(())
    } else {
        Err(OracleError::HeadOutOfRange { head, outputs })
    }
}

/// Evaluates `batch` and validates the reply length and finiteness.
pub(crate) fn evaluate_checked<O: CharacteristicOracle + ?Sized>(
    oracle: &O,
    batch: &[MaskedInput<'_>],
    head: usize,
) -> Result<Vec<f64>, OracleError> {
    let scores = oracle.evaluate(batch, head)?;
    if scores.len() != batch.len() {
        return Err(OracleError::BatchLength { expected: batch.len(), got: scores.len() });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(OracleError::NonFinite(bad));
    }
    Ok(scores)
}

type ScoreFn = dyn Fn(&MaskedInput<'_>) -> Vec<f64> + Send + Sync;

/// Oracle backed by a closure, handy for analytic test models.
pub struct FnOracle {
    outputs: usize,
    score: Box<ScoreFn>,
}

impl FnOracle {
    /// A single-output model.
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&MaskedInput<'_>) -> f64 + Send + Sync + 'static,
    {
        Self { outputs: 1, score: Box::new(move |m| vec![f(m)]) }
    }

    /// A model with `outputs` heads; `f` returns all of them.
    pub fn multi<F>(outputs: usize, f: F) -> Self
    where
        F: Fn(&MaskedInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        Self { outputs, score: Box::new(f) }
    }
}

impl CharacteristicOracle for FnOracle {
    fn evaluate(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, OracleError> {
        check_head(head, self.outputs)?;
        batch
            .iter()
            .map(|m| {
                let scores = (self.score)(m);
                scores.get(head).copied().ok_or(OracleError::HeadOutOfRange {
                    head,
                    outputs: scores.len(),
                })
            })
            .collect()
    }

    fn outputs(&self) -> usize {
        self.outputs
    }

    fn concurrent(&self) -> bool {
        true
    }
}

impl std::fmt::Debug for FnOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnOracle").field("outputs", &self.outputs).finish_non_exhaustive()
    }
}
