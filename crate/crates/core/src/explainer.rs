//! Hierarchical exploration of the partition tree.
//!
//! Starting from the root, each visited node plays a γ-player game among its
//! children. A child whose coefficient exceeds the tolerance is expanded, or
//! collected as a relevant leaf once its area reaches the minimal feature
//! size. The final map is uniform over the collected leaves.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::game::{node_shapley, shapley_from_values, GameError, GameSpec};
use crate::masking::{Baseline, MaskedInput};
use crate::oracle::{evaluate_checked, CharacteristicOracle};
use crate::partition::{PartitionError, PartitionTree, Region};
use crate::tensor::{Shape, Tensor};

/// Coefficients closer to zero than this are treated as exactly zero.
pub const ZERO_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid explainer configuration: {0}")]
    Config(String),
    #[error("baseline shape {baseline:?} does not match input shape {input:?}")]
    BaselineShape { input: Shape, baseline: Shape },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Relevance tolerance τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// A fixed threshold, `τ >= 0`.
    Absolute(f64),
    /// The `q`-th percentile (nearest rank) of the coefficients pooled over a
    /// tree level. Breadth-first only.
    RelativePercentile(f64),
}

impl Tolerance {
    pub fn validate(&self) -> Result<(), ExplainError> {
        match *self {
            Tolerance::Absolute(t) if !(t >= 0.0 && t.is_finite()) => {
                Err(ExplainError::Config(format!("absolute tolerance must be >= 0, got {t}")))
            }
            Tolerance::RelativePercentile(q) if !(0.0..=100.0).contains(&q) => {
                Err(ExplainError::Config(format!("percentile must lie in [0, 100], got {q}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traversal {
    DepthFirst,
    BreadthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainerConfig {
    pub gamma: usize,
    /// Minimal feature size `s`, as an area in features.
    pub min_feature_size: usize,
    pub tolerance: Tolerance,
    pub traversal: Traversal,
    pub score_head: usize,
    /// Breadth-first only: advance children with `φ >= τ` instead of `φ > τ`.
    pub inclusive_threshold: bool,
}

impl ExplainerConfig {
    /// Depth-first, `τ = 0`, output head 0.
    pub fn new(gamma: usize, min_feature_size: usize) -> Self {
        Self {
            gamma,
            min_feature_size,
            tolerance: Tolerance::Absolute(0.0),
            traversal: Traversal::DepthFirst,
            score_head: 0,
            inclusive_threshold: false,
        }
    }

    pub fn with_tolerance(mut self, tolerance: Tolerance) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_traversal(mut self, traversal: Traversal) -> Self {
        self.traversal = traversal;
        self
    }

    pub fn with_score_head(mut self, head: usize) -> Self {
        self.score_head = head;
        self
    }

    pub fn with_inclusive_threshold(mut self, inclusive: bool) -> Self {
        self.inclusive_threshold = inclusive;
        self
    }

    pub fn validate(&self) -> Result<(), ExplainError> {
        self.tolerance.validate()?;
        if self.traversal == Traversal::DepthFirst {
            if let Tolerance::RelativePercentile(_) = self.tolerance {
                return Err(ExplainError::Config(
                    "depth-first traversal requires an absolute tolerance".into(),
                ));
            }
            if self.inclusive_threshold {
                return Err(ExplainError::Config(
                    "the inclusive threshold only applies to breadth-first traversal".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The normalized saliency map and run telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub shape: Shape,
    /// One value per feature, row-major.
    pub phi: Vec<f64>,
    /// Relevant leaves, in discovery order.
    pub leaves: Vec<Region>,
    pub evaluations_used: u64,
    pub visited_nodes: u64,
    pub wall_time: Duration,
}

impl SaliencyMap {
    /// Total number of features covered by the relevant leaves.
    pub fn covered_features(&self) -> usize {
        self.leaves.iter().map(Region::area).sum()
    }

    /// Leaves sorted by position, for order-independent comparison.
    pub fn sorted_leaves(&self) -> Vec<Region> {
        let mut l = self.leaves.clone();
        l.sort();
        l
    }
}

/// Coefficients of one solved node game, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScore {
    pub region: Region,
    pub children: Vec<Region>,
    pub coefficients: Vec<f64>,
}

/// Every solved node game, in the order it was solved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawNodeScores(pub Vec<NodeScore>);

impl RawNodeScores {
    pub fn nodes(&self) -> &[NodeScore] {
        &self.0
    }

    /// Paints each child's coefficient onto its region. Deeper nodes are
    /// solved after their ancestors, so the finest available score wins.
    pub fn paint(&self, shape: Shape) -> Vec<f64> {
        let mut out = vec![0.0; shape.features()];
        for node in &self.0 {
            for (child, &value) in node.children.iter().zip(&node.coefficients) {
                for i in child.feature_indices(shape.width) {
                    out[i] = value;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub map: SaliencyMap,
    pub raw: RawNodeScores,
}

/// Uniform map over the union of `leaves`: `1 / |L|` on covered features,
/// where `|L|` counts features, and 0 elsewhere.
pub fn assemble_map(leaves: &[Region], shape: Shape) -> Vec<f64> {
    let mut phi = vec![0.0; shape.features()];
    let covered: usize = leaves.iter().map(Region::area).sum();
    if covered == 0 {
        return phi;
    }
    let value = 1.0 / covered as f64;
    for leaf in leaves {
        for i in leaf.feature_indices(shape.width) {
            phi[i] = value;
        }
    }
    phi
}

/// Upper bound `2^γ · k · log_γ(n)` on model evaluations for `k` relevant
/// leaves. `None` unless `n` is a power of `γ`.
pub fn evaluation_budget(k: u64, n: u64, gamma: u64) -> Option<u64> {
    if gamma < 2 || n == 0 {
        return None;
    }
    let mut depth = 0u64;
    let mut m = n;
    while m > 1 {
        if !m.is_multiple_of(gamma) {
            return None;
        }
        m /= gamma;
        depth += 1;
    }
    Some((1u64 << gamma) * k * depth)
}

fn clamp(phi: f64) -> f64 {
    if phi.abs() < ZERO_CLAMP {
        0.0
    } else {
        phi
    }
}

/// Nearest-rank percentile of `values`.
pub(crate) fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Run<'a, O: ?Sized> {
    input: &'a Tensor,
    baseline: &'a Baseline,
    oracle: &'a O,
    tree: PartitionTree,
    cfg: ExplainerConfig,
    leaves: Vec<Region>,
    raw: Vec<NodeScore>,
    evaluations: u64,
    visited: u64,
}

impl<'a, O: CharacteristicOracle + ?Sized> Run<'a, O> {
    fn new(
        input: &'a Tensor,
        oracle: &'a O,
        baseline: &'a Baseline,
        cfg: &ExplainerConfig,
    ) -> Result<Self, ExplainError> {
        cfg.validate()?;
        if baseline.shape() != input.shape() {
            return Err(ExplainError::BaselineShape { input: input.shape(), baseline: baseline.shape() });
        }
        let tree = PartitionTree::new(input.shape(), cfg.gamma, cfg.min_feature_size)?;
        Ok(Self {
            input,
            baseline,
            oracle,
            tree,
            cfg: *cfg,
            leaves: Vec::new(),
            raw: Vec::new(),
            evaluations: 0,
            visited: 1,
        })
    }

    fn passes(&self, phi: f64, tau: f64) -> bool {
        if self.cfg.inclusive_threshold {
            phi >= tau
        } else {
            phi > tau
        }
    }

    /// A root that is already a leaf plays a one-player game:
    /// `φ = v(root) - v(∅)`.
    fn solve_root_leaf(&mut self) -> Result<(), ExplainError> {
        let root = self.tree.root();
        let game = GameSpec::from_partition(vec![root], self.oracle, self.input, self.baseline, self.cfg.score_head);
        let batch = game.coalition_inputs(0..2);
        let values = evaluate_checked(self.oracle, &batch, self.cfg.score_head).map_err(GameError::from)?;
        self.evaluations += 2;
        let phi = clamp(shapley_from_values(&values)[0]);
        self.raw.push(NodeScore { region: root, children: vec![root], coefficients: vec![phi] });
        let tau = match self.cfg.tolerance {
            Tolerance::Absolute(t) => t,
            Tolerance::RelativePercentile(q) => nearest_rank(&[phi], q),
        };
        if self.passes(phi, tau) {
            self.leaves.push(root);
        }
        Ok(())
    }

    fn depth_first(&mut self, node: Region, tau: f64) -> Result<(), ExplainError> {
        let children = self.tree.children(&node).expect("expanded nodes are internal");
        let game = GameSpec::from_partition(children, self.oracle, self.input, self.baseline, self.cfg.score_head);
        let solved = node_shapley(&game)?;
        self.evaluations += solved.evaluations_used;
        let children = game.players().to_vec();
        let coefficients: Vec<f64> = solved.values.into_iter().map(clamp).collect();
        self.raw.push(NodeScore { region: node, children: children.clone(), coefficients: coefficients.clone() });

        for (child, phi) in children.into_iter().zip(coefficients) {
            if phi > tau {
                self.visited += 1;
                if self.tree.is_leaf(&child) {
                    self.leaves.push(child);
                } else {
                    self.depth_first(child, tau)?;
                }
            }
        }
        Ok(())
    }

    fn breadth_first(&mut self) -> Result<(), ExplainError> {
        let head = self.cfg.score_head;
        let mut level = vec![self.tree.root()];
        while !level.is_empty() {
            // one oracle call per level
            let games: Vec<Vec<Region>> = level
                .iter()
                .map(|n| self.tree.children(n).expect("queued nodes are internal"))
                .collect();
            let mut batch: Vec<MaskedInput<'_>> = Vec::new();
            for players in &games {
                let game = GameSpec::from_partition(players.clone(), self.oracle, self.input, self.baseline, head);
                batch.extend(game.coalition_inputs(0..1 << players.len()));
            }
            let values = evaluate_checked(self.oracle, &batch, head).map_err(GameError::from)?;
            self.evaluations += values.len() as u64;

            let mut offset = 0;
            let mut pooled = Vec::new();
            let mut candidates = Vec::new();
            for (node, players) in level.iter().zip(games) {
                let size = 1 << players.len();
                let coefficients: Vec<f64> =
                    shapley_from_values(&values[offset..offset + size]).into_iter().map(clamp).collect();
                offset += size;
                pooled.extend_from_slice(&coefficients);
                candidates.extend(players.iter().copied().zip(coefficients.iter().copied()));
                self.raw.push(NodeScore { region: *node, children: players, coefficients });
            }

            let tau = match self.cfg.tolerance {
                Tolerance::Absolute(t) => t,
                Tolerance::RelativePercentile(q) => nearest_rank(&pooled, q),
            };
            let mut next = Vec::new();
            for (child, phi) in candidates {
                if self.passes(phi, tau) {
                    self.visited += 1;
                    if self.tree.is_leaf(&child) {
                        self.leaves.push(child);
                    } else {
                        next.push(child);
                    }
                }
            }
            level = next;
        }
        Ok(())
    }

    fn finish(self, started: Instant) -> Explanation {
        let shape = self.input.shape();
        let phi = assemble_map(&self.leaves, shape);
        Explanation {
            map: SaliencyMap {
                shape,
                phi,
                leaves: self.leaves,
                evaluations_used: self.evaluations,
                visited_nodes: self.visited,
                wall_time: started.elapsed(),
            },
            raw: RawNodeScores(self.raw),
        }
    }
}

/// Depth-first explanation. Requires an absolute tolerance; children are expanded
/// iff `φ > τ`, and every qualifying sibling subtree is explored.
pub fn explain_depth_first<O: CharacteristicOracle + ?Sized>(
    input: &Tensor,
    oracle: &O,
    baseline: &Baseline,
    cfg: &ExplainerConfig,
) -> Result<Explanation, ExplainError> {
    let started = Instant::now();
    let cfg = ExplainerConfig { traversal: Traversal::DepthFirst, ..*cfg };
    let mut run = Run::new(input, oracle, baseline, &cfg)?;
    let tau = match cfg.tolerance {
        Tolerance::Absolute(t) => t,
        Tolerance::RelativePercentile(_) => unreachable!("rejected by validate"),
    };
    let root = run.tree.root();
    if run.tree.is_leaf(&root) {
        run.solve_root_leaf()?;
    } else {
        run.depth_first(root, tau)?;
    }
    Ok(run.finish(started))
}

/// Breadth-first explanation: all games of a level are solved in one oracle batch,
/// their coefficients pooled, and the level threshold taken from the pool.
pub fn explain_breadth_first<O: CharacteristicOracle + ?Sized>(
    input: &Tensor,
    oracle: &O,
    baseline: &Baseline,
    cfg: &ExplainerConfig,
) -> Result<Explanation, ExplainError> {
    let started = Instant::now();
    let cfg = ExplainerConfig { traversal: Traversal::BreadthFirst, ..*cfg };
    let mut run = Run::new(input, oracle, baseline, &cfg)?;
    let root = run.tree.root();
    if run.tree.is_leaf(&root) {
        run.solve_root_leaf()?;
    } else {
        run.breadth_first()?;
    }
    Ok(run.finish(started))
}

/// Dispatches on `cfg.traversal`.
pub fn explain<O: CharacteristicOracle + ?Sized>(
    input: &Tensor,
    oracle: &O,
    baseline: &Baseline,
    cfg: &ExplainerConfig,
) -> Result<Explanation, ExplainError> {
    match cfg.traversal {
        Traversal::DepthFirst => explain_depth_first(input, oracle, baseline, cfg),
        Traversal::BreadthFirst => explain_breadth_first(input, oracle, baseline, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FnOracle;

    fn mil_vector(important: Vec<usize>) -> FnOracle {
        FnOracle::new(move |m| if important.iter().any(|&i| m.is_kept(0, i)) { 1.0 } else { 0.0 })
    }

    #[test]
    fn two_important_features_in_a_vector() {
        let x = Tensor::zeros(Shape::vector(16));
        let b = Baseline::zeros(x.shape());
        let e = explain_depth_first(&x, &mil_vector(vec![3, 9]), &b, &ExplainerConfig::new(2, 1)).unwrap();
        assert_eq!(e.map.sorted_leaves(), vec![Region::interval(3, 4), Region::interval(9, 10)]);
        for (i, v) in e.map.phi.iter().enumerate() {
            assert_eq!(*v, if i == 3 || i == 9 { 0.5 } else { 0.0 });
        }
    }

    #[test]
    fn constant_zero_oracle_visits_only_the_root() {
        let x = Tensor::zeros(Shape::image(3, 8, 8));
        let b = Baseline::zeros(x.shape());
        let zero = FnOracle::new(|_| 0.0);
        for traversal in [Traversal::DepthFirst, Traversal::BreadthFirst] {
            let cfg = ExplainerConfig::new(4, 1).with_traversal(traversal);
            let e = explain(&x, &zero, &b, &cfg).unwrap();
            assert!(e.map.leaves.is_empty());
            assert!(e.map.phi.iter().all(|&v| v == 0.0));
            assert_eq!(e.map.visited_nodes, 1);
            assert_eq!(e.map.evaluations_used, 16);
        }
    }

    #[test]
    fn single_pixel_in_four_by_four() {
        let x = Tensor::zeros(Shape::image(1, 4, 4));
        let b = Baseline::zeros(x.shape());
        let oracle = FnOracle::new(|m| if m.is_kept(1, 2) { 1.0 } else { 0.0 });
        let e = explain_depth_first(&x, &oracle, &b, &ExplainerConfig::new(4, 1)).unwrap();
        assert_eq!(e.map.visited_nodes, 3);
        assert_eq!(e.map.leaves, vec![Region::new(1, 2, 2, 3)]);
        assert_eq!(e.map.evaluations_used, 32);
        assert!(e.map.evaluations_used <= evaluation_budget(1, 16, 4).unwrap());
        let mut want = vec![0.0; 16];
        want[6] = 1.0;
        assert_eq!(e.map.phi, want);

        let cfg = ExplainerConfig::new(4, 1)
            .with_traversal(Traversal::BreadthFirst)
            .with_tolerance(Tolerance::RelativePercentile(70.0));
        let bf = explain_breadth_first(&x, &oracle, &b, &cfg).unwrap();
        assert_eq!(bf.map.leaves, e.map.leaves);
        assert_eq!(bf.map.visited_nodes, 3);
    }

    #[test]
    fn inclusive_threshold_expands_zero_nodes() {
        let x = Tensor::zeros(Shape::vector(8));
        let b = Baseline::zeros(x.shape());
        let oracle = mil_vector(vec![5]);
        let cfg = ExplainerConfig::new(2, 1).with_traversal(Traversal::BreadthFirst);
        let strict = explain(&x, &oracle, &b, &cfg).unwrap();
        assert_eq!(strict.map.leaves, vec![Region::interval(5, 6)]);
        let loose = explain(&x, &oracle, &b, &cfg.with_inclusive_threshold(true)).unwrap();
        assert_eq!(loose.map.leaves.len(), 8);
        assert_eq!(loose.map.visited_nodes, 15);
    }

    #[test]
    fn config_validation() {
        let x = Tensor::zeros(Shape::vector(8));
        let b = Baseline::zeros(x.shape());
        let oracle = FnOracle::new(|_| 0.0);
        let bad = ExplainerConfig::new(2, 1).with_tolerance(Tolerance::RelativePercentile(70.0));
        assert!(matches!(explain(&x, &oracle, &b, &bad), Err(ExplainError::Config(_))));
        let bad = ExplainerConfig::new(2, 1).with_tolerance(Tolerance::Absolute(-1.0));
        assert!(matches!(explain(&x, &oracle, &b, &bad), Err(ExplainError::Config(_))));
        let bad = ExplainerConfig::new(2, 1)
            .with_traversal(Traversal::BreadthFirst)
            .with_tolerance(Tolerance::RelativePercentile(101.0));
        assert!(matches!(explain(&x, &oracle, &b, &bad), Err(ExplainError::Config(_))));
        let b3 = Baseline::zeros(Shape::vector(3));
        assert!(matches!(
            explain(&x, &oracle, &b3, &ExplainerConfig::new(2, 1)),
            Err(ExplainError::BaselineShape { .. })
        ));
        assert!(matches!(
            explain(&x, &oracle, &b, &ExplainerConfig::new(4, 1)),
            Err(ExplainError::Partition(PartitionError::GammaNeedsImage(1, 8)))
        ));
    }

    #[test]
    fn root_smaller_than_feature_size() {
        let x = Tensor::zeros(Shape::vector(4));
        let b = Baseline::zeros(x.shape());
        let e = explain(&x, &mil_vector(vec![2]), &b, &ExplainerConfig::new(2, 8)).unwrap();
        assert_eq!(e.map.leaves, vec![Region::interval(0, 4)]);
        assert_eq!(e.map.phi, vec![0.25; 4]);
        assert_eq!(e.map.evaluations_used, 2);
    }

    #[test]
    fn map_assembly() {
        let shape = Shape::vector(8);
        let phi = assemble_map(&[Region::interval(1, 2), Region::interval(6, 7)], shape);
        assert_eq!(phi, vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        assert_eq!(assemble_map(&[], shape), vec![0.0; 8]);
        assert_eq!(assemble_map(&[Region::full(shape)], shape), vec![0.125; 8]);
        let phi = assemble_map(&[Region::new(0, 2, 0, 2)], Shape::image(1, 4, 4));
        assert_eq!(phi.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn budget_formula() {
        assert_eq!(evaluation_budget(1, 64, 2), Some(24));
        assert_eq!(evaluation_budget(1, 16, 4), Some(32));
        assert_eq!(evaluation_budget(3, 256, 4), Some(192));
        assert_eq!(evaluation_budget(1, 48, 4), None);
        assert_eq!(evaluation_budget(1, 1, 2), Some(0));
    }

    #[test]
    fn percentile_is_nearest_rank() {
        assert_eq!(nearest_rank(&[0.0, 0.0, 0.0, 1.0], 70.0), 0.0);
        assert_eq!(nearest_rank(&[0.0, 0.0, 0.0, 1.0], 76.0), 1.0);
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0], 0.0), 1.0);
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0], 100.0), 3.0);
        assert_eq!(nearest_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0], 70.0), 7.0);
    }

    #[test]
    fn raw_scores_paint_the_finest_level() {
        let x = Tensor::zeros(Shape::image(1, 4, 4));
        let b = Baseline::zeros(x.shape());
        let oracle = FnOracle::new(|m| if m.is_kept(0, 0) { 1.0 } else { 0.0 });
        let e = explain(&x, &oracle, &b, &ExplainerConfig::new(4, 1)).unwrap();
        assert_eq!(e.raw.nodes().len(), 2);
        let painted = e.raw.paint(x.shape());
        assert_eq!(painted[0], 1.0);
        assert_eq!(painted[1], 0.0);
        assert_eq!(painted[4], 0.0);
    }
}
