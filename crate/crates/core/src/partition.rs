//! Recursive γ-partition trees over vectors (halves) and images (quadrants).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("region {0} has area {1} and cannot be split")]
    DegenerateRegion(Region, usize),
    #[error("unsupported branching factor {0} (expected 2 or 4)")]
    InvalidGamma(usize),
    #[error("branching factor 4 needs a two-dimensional input, got {0}x{1}")]
    GammaNeedsImage(usize, usize),
    #[error("minimal feature size must be at least 1")]
    InvalidFeatureSize,
    #[error("input has no features")]
    EmptyInput,
}

/// Half-open pixel rectangle `[row_start, row_end) x [col_start, col_end)`.
///
/// Vectors use a single row, so an interval `[start, end)` is the rectangle
/// `[0, 1) x [start, end)`. A region always spans every channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Region {
    pub fn new(row_start: usize, row_end: usize, col_start: usize, col_end: usize) -> Self {
        Self { row_start, row_end, col_start, col_end }
    }

    pub fn interval(start: usize, end: usize) -> Self {
        Self::new(0, 1, start, end)
    }

    /// The region covering every feature of `shape`.
    pub fn full(shape: Shape) -> Self {
        Self::new(0, shape.height, 0, shape.width)
    }

    pub fn height(&self) -> usize {
        self.row_end.saturating_sub(self.row_start)
    }

    pub fn width(&self) -> usize {
        self.col_end.saturating_sub(self.col_start)
    }

    /// Number of features covered.
    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_start..self.row_end).contains(&row) && (self.col_start..self.col_end).contains(&col)
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.row_start >= self.row_start
            && other.row_end <= self.row_end
            && other.col_start >= self.col_start
            && other.col_end <= self.col_end
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.row_start < other.row_end
            && other.row_start < self.row_end
            && self.col_start < other.col_end
            && other.col_start < self.col_end
    }

    pub fn within(&self, shape: Shape) -> bool {
        self.row_end <= shape.height && self.col_end <= shape.width
    }

    /// Flat feature indices (`row * width + col`) covered by this region.
    pub fn feature_indices(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row_start..self.row_end)
            .flat_map(move |r| (self.col_start..self.col_end).map(move |c| r * width + c))
    }

    /// `[r0, r1, c0, c1]`, the order used in saliency JSON files.
    pub fn to_array(&self) -> [usize; 4] {
        [self.row_start, self.row_end, self.col_start, self.col_end]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}..{})x[{}..{})",
            self.row_start, self.row_end, self.col_start, self.col_end
        )
    }
}

fn halves(start: usize, end: usize) -> [(usize, usize); 2] {
    let mid = start + (end - start) / 2;
    [(start, mid), (mid, end)]
}

/// Splits `region` into disjoint children covering it.
///
/// With `gamma = 4` both axes are cut at `floor(extent / 2)`, so for odd
/// extents the first child is the smaller one. Children are ordered
/// top-left, top-right, bottom-left, bottom-right. An axis of extent 1 is
/// never cut; the split then degenerates to two halves along the other axis.
/// With `gamma = 2` the longer axis is halved (rows on ties).
pub fn split(region: &Region, gamma: usize) -> Result<Vec<Region>, PartitionError> {
    if gamma != 2 && gamma != 4 {
        return Err(PartitionError::InvalidGamma(gamma));
    }
    if region.area() <= 1 {
        return Err(PartitionError::DegenerateRegion(*region, region.area()));
    }
    let (h, w) = (region.height(), region.width());
    let cut_rows = h > 1 && (gamma == 4 || h >= w);
    let cut_cols = w > 1 && (gamma == 4 || w > h);

    let rows = if cut_rows {
        halves(region.row_start, region.row_end).to_vec()
    } else {
        vec![(region.row_start, region.row_end)]
    };
    let cols = if cut_cols {
        halves(region.col_start, region.col_end).to_vec()
    } else {
        vec![(region.col_start, region.col_end)]
    };

    let mut children = Vec::with_capacity(rows.len() * cols.len());
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            children.push(Region::new(r0, r1, c0, c1));
        }
    }
    Ok(children)
}

/// A region is a leaf once its area is at most `s` features.
pub fn is_leaf(region: &Region, s: usize) -> bool {
    region.area() <= s
}

/// The implicit partition tree of an input: children are produced on demand
/// by [`split`], nodes of area at most `min_feature_size` are leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionTree {
    root: Region,
    gamma: usize,
    min_feature_size: usize,
}

impl PartitionTree {
    pub fn new(shape: Shape, gamma: usize, min_feature_size: usize) -> Result<Self, PartitionError> {
        if gamma != 2 && gamma != 4 {
            return Err(PartitionError::InvalidGamma(gamma));
        }
        if gamma == 4 && (shape.height < 2 || shape.width < 2) {
            return Err(PartitionError::GammaNeedsImage(shape.height, shape.width));
        }
        if min_feature_size == 0 {
            return Err(PartitionError::InvalidFeatureSize);
        }
        if shape.features() == 0 {
            return Err(PartitionError::EmptyInput);
        }
        Ok(Self { root: Region::full(shape), gamma, min_feature_size })
    }

    pub fn root(&self) -> Region {
        self.root
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn min_feature_size(&self) -> usize {
        self.min_feature_size
    }

    pub fn is_leaf(&self, region: &Region) -> bool {
        is_leaf(region, self.min_feature_size)
    }

    /// Children of `region`, or `None` for a leaf.
    pub fn children(&self, region: &Region) -> Option<Vec<Region>> {
        if self.is_leaf(region) {
            return None;
        }
        // area > s >= 1, so the split cannot fail
        split(region, self.gamma).ok()
    }

    /// Every node of the full tree in depth-first pre-order.
    pub fn nodes(&self) -> Vec<Region> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(node) = stack.pop() {
            out.push(node);
            if let Some(children) = self.children(&node) {
                stack.extend(children.into_iter().rev());
            }
        }
        out
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(tree: &PartitionTree, r: &Region) -> usize {
            match tree.children(r) {
                None => 0,
                Some(cs) => 1 + cs.iter().map(|c| go(tree, c)).max().unwrap_or(0),
            }
        }
        go(self, &self.root)
    }
}
