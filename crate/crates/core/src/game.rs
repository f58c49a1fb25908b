//! Exact Shapley values of small cooperative games whose players are feature
//! groups and whose characteristic function is a masked model score.

use thiserror::Error;

use crate::masking::{Baseline, MaskedInput};
use crate::oracle::{evaluate_checked, CharacteristicOracle, OracleError};
use crate::partition::Region;
use crate::tensor::Tensor;

/// Largest game the brute-force solver accepts.
pub const MAX_BRUTE_FORCE_PLAYERS: usize = 20;
/// Largest player set a [`Coalition`] bit pattern can describe.
pub const MAX_PLAYERS: usize = 30;

const BATCH_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("brute-force Shapley is limited to {MAX_BRUTE_FORCE_PLAYERS} players, got {0}")]
    PlayerLimitExceeded(usize),
    #[error("a game needs between 1 and {MAX_PLAYERS} players, got {0}")]
    InvalidPlayerCount(usize),
    #[error("node games have 2 or 4 players, got {0}")]
    InvalidNodeGame(usize),
    #[error("players {0} and {1} overlap")]
    OverlappingPlayers(Region, Region),
    #[error("player {0} is empty or outside the input")]
    InvalidPlayer(Region),
    #[error("baseline shape does not match the input")]
    BaselineShape,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Subset of the players of a game, bit `i` set when player `i` is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(pub u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(players: usize) -> Self {
        debug_assert!(players <= MAX_PLAYERS);
        Coalition(((1u64 << players) - 1) as u32)
    }

    pub fn contains(self, player: usize) -> bool {
        self.0 >> player & 1 == 1
    }

    pub fn with(self, player: usize) -> Self {
        Coalition(self.0 | 1 << player)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..MAX_PLAYERS).filter(move |&i| self.contains(i))
    }

    /// Regions of the member players, in player order.
    pub fn kept(self, players: &[Region]) -> Vec<Region> {
        players
            .iter()
            .enumerate()
            .filter(|(i, _)| self.contains(*i))
            .map(|(_, r)| *r)
            .collect()
    }
}

/// A game whose players are disjoint feature groups of `input` and whose
/// value for a coalition is the oracle's score on the input with every other
/// feature replaced by the baseline.
#[derive(Debug, Clone)]
pub struct GameSpec<'a, O: ?Sized> {
    players: Vec<Region>,
    oracle: &'a O,
    input: &'a Tensor,
    baseline: &'a Baseline,
    head: usize,
}

impl<'a, O: CharacteristicOracle + ?Sized> GameSpec<'a, O> {
    pub fn new(
        players: Vec<Region>,
        oracle: &'a O,
        input: &'a Tensor,
        baseline: &'a Baseline,
    ) -> Result<Self, GameError> {
        if players.is_empty() || players.len() > MAX_PLAYERS {
            return Err(GameError::InvalidPlayerCount(players.len()));
        }
        if baseline.shape() != input.shape() {
            return Err(GameError::BaselineShape);
        }
        for (i, a) in players.iter().enumerate() {
            if a.is_empty() || !a.within(input.shape()) {
                return Err(GameError::InvalidPlayer(*a));
            }
            if let Some(b) = players[i + 1..].iter().find(|b| a.intersects(b)) {
                return Err(GameError::OverlappingPlayers(*a, *b));
            }
        }
        Ok(Self { players, oracle, input, baseline, head: 0 })
    }

    /// Built by the explainer from partition children, which are disjoint
    /// and in bounds by construction.
    pub(crate) fn from_partition(
        players: Vec<Region>,
        oracle: &'a O,
        input: &'a Tensor,
        baseline: &'a Baseline,
        head: usize,
    ) -> Self {
        Self { players, oracle, input, baseline, head }
    }

    /// Selects which model output is explained.
    pub fn with_head(mut self, head: usize) -> Self {
        self.head = head;
        self
    }

    pub fn players(&self) -> &[Region] {
        &self.players
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Masked inputs for every coalition, in ascending bit-pattern order.
    pub(crate) fn coalition_inputs(&self, range: std::ops::Range<u32>) -> Vec<MaskedInput<'a>> {
        range
            .map(|bits| {
                MaskedInput::new_unchecked(self.input, self.baseline, Coalition(bits).kept(&self.players))
            })
            .collect()
    }

    fn value_table(&self) -> Result<Vec<f64>, GameError> {
        let total = 1u32 << self.players.len();
        let mut values = Vec::with_capacity(total as usize);
        let mut start = 0u32;
        while start < total {
            let end = total.min(start + BATCH_CHUNK as u32);
            let batch = self.coalition_inputs(start..end);
            values.extend(evaluate_checked(self.oracle, &batch, self.head)?);
            start = end;
        }
        Ok(values)
    }
}

/// Shapley values and the number of model evaluations spent on them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyVector {
    pub values: Vec<f64>,
    pub evaluations_used: u64,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// `|C|! (p - |C| - 1)! / p!` for each coalition size `|C|`, computed as the
/// exact integer `p * C(p-1, |C|)` and inverted once.
fn shapley_weights(players: usize) -> Vec<f64> {
    let p = players as u64;
    (0..p).map(|c| 1.0 / (p * binomial(p - 1, c)) as f64).collect()
}

/// Shapley values from a complete table `values[bits] = v(C)`.
///
/// The table length must be a power of two. Coalitions are visited in
/// ascending bit order, so results are reproducible to the last bit.
pub fn shapley_from_values(values: &[f64]) -> Vec<f64> {
    assert!(values.len().is_power_of_two(), "value table must cover every coalition");
    let players = values.len().trailing_zeros() as usize;
    let weights = shapley_weights(players);
    (0..players)
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0.0;
            for c in 0..values.len() {
                if c & bit == 0 {
                    acc += weights[c.count_ones() as usize] * (values[c | bit] - values[c]);
                }
            }
            acc
        })
        .collect()
}

/// Exact Shapley values by enumerating all `2^p` coalitions, each evaluated
/// exactly once.
pub fn brute_force_shapley<O: CharacteristicOracle + ?Sized>(
    game: &GameSpec<'_, O>,
) -> Result<ShapleyVector, GameError> {
    let p = game.players.len();
    if p > MAX_BRUTE_FORCE_PLAYERS {
        return Err(GameError::PlayerLimitExceeded(p));
    }
    let values = game.value_table()?;
    Ok(ShapleyVector { evaluations_used: values.len() as u64, values: shapley_from_values(&values) })
}

/// Solves the γ-player game at one tree node. All `2^γ` masked inputs go to
/// the oracle as a single batch and every child's coefficient is derived from
/// that one table.
pub fn node_shapley<O: CharacteristicOracle + ?Sized>(
    game: &GameSpec<'_, O>,
) -> Result<ShapleyVector, GameError> {
    let p = game.players.len();
    if p != 2 && p != 4 {
        return Err(GameError::InvalidNodeGame(p));
    }
    let batch = game.coalition_inputs(0..1 << p);
    let values = evaluate_checked(game.oracle, &batch, game.head)?;
    Ok(ShapleyVector { evaluations_used: values.len() as u64, values: shapley_from_values(&values) })
}
