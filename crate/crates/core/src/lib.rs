//! Hierarchical Shapley attribution for images.
//!
//! Explains a classifier by solving a hierarchy of small cooperative games
//! over a recursive partition of the input: halves for vectors, quadrants for
//! images. Only the children whose Shapley coefficient exceeds a relevance
//! tolerance are expanded, so the number of model evaluations grows with the
//! number of relevant features times the tree depth instead of `2^n`.
//!
//! The crate also ships the pieces needed to check the method end to end:
//! a brute-force Shapley oracle, a synthetic multiple-instance benchmark with
//! exact in-process models, closed-form complexity and similarity bounds with
//! Monte Carlo validators, evaluation metrics, and a subprocess bridge for
//! explaining external models.

pub mod bench;
pub mod bridge;
pub mod explainer;
pub mod game;
pub mod imageio;
pub mod masking;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod tensor;
pub mod theory;

pub use explainer::{
    assemble_map, evaluation_budget, explain, explain_breadth_first, explain_depth_first,
    ExplainError, Explanation, ExplainerConfig, NodeScore, RawNodeScores, SaliencyMap, Tolerance,
    Traversal,
};
pub use game::{brute_force_shapley, node_shapley, Coalition, GameError, GameSpec, ShapleyVector};
pub use masking::{compute_baseline, mask, Baseline, MaskError, MaskedInput};
pub use oracle::{CharacteristicOracle, FnOracle, OracleError};
pub use partition::{is_leaf, split, PartitionError, PartitionTree, Region};
pub use tensor::{Shape, Tensor};
