use hshap::bench::PixelMilOracle;
use hshap::theory::exact_mil_map;
use hshap::{
    brute_force_shapley, explain, Baseline, ExplainerConfig, FnOracle, GameSpec, Region, Shape, Tensor, Tolerance,
    Traversal,
};
use proptest::prelude::*;

fn pixels(shape: Shape) -> Vec<Region> {
    let w = shape.width;
    (0..shape.features()).map(|i| Region::new(i / w, i / w + 1, i % w, i % w + 1)).collect()
}

/// A game with pairwise interactions, so coefficients can be negative.
fn interacting(weights: Vec<f64>, pairs: Vec<(usize, usize, f64)>, width: usize) -> FnOracle {
    FnOracle::new(move |m| {
        let kept = |i: usize| m.is_kept(i / width, i % width);
        let linear: f64 = weights.iter().enumerate().filter(|(i, _)| kept(*i)).map(|(_, w)| w).sum();
        let pair: f64 = pairs.iter().filter(|(a, b, _)| kept(*a) && kept(*b)).map(|(_, _, w)| w).sum();
        linear + pair
    })
}

fn shape_strategy() -> impl Strategy<Value = (Shape, usize)> {
    prop_oneof![
        (2usize..=40).prop_map(|n| (Shape::vector(n), 2)),
        (2usize..=9, 2usize..=9).prop_map(|(h, w)| (Shape::image(1, h, w), 4)),
        (2usize..=6, 2usize..=6).prop_map(|(h, w)| (Shape::image(1, h, w), 2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mil_maps_are_exact_on_any_geometry(
        (shape, gamma) in shape_strategy(),
        bits in proptest::collection::vec(proptest::bool::weighted(0.15), 81),
    ) {
        let importance: Vec<bool> = bits[..shape.features()].to_vec();
        let x = Tensor::filled(shape, 1.0);
        let b = Baseline::zeros(shape);
        let oracle = PixelMilOracle::for_shape(shape, &importance);
        for traversal in [Traversal::DepthFirst, Traversal::BreadthFirst] {
            let cfg = ExplainerConfig::new(gamma, 1).with_traversal(traversal);
            let e = explain(&x, &oracle, &b, &cfg).unwrap();
            prop_assert_eq!(&e.map.phi, &exact_mil_map(&importance));
        }
    }

    #[test]
    fn mil_map_equals_flat_brute_force_shapley(
        side in 2usize..=4,
        bits in proptest::collection::vec(proptest::bool::weighted(0.2), 16),
    ) {
        let shape = Shape::image(1, side, side);
        let importance = bits[..shape.features()].to_vec();
        let x = Tensor::filled(shape, 1.0);
        let b = Baseline::zeros(shape);
        let oracle = PixelMilOracle::for_shape(shape, &importance);
        let e = explain(&x, &oracle, &b, &ExplainerConfig::new(4, 1)).unwrap();
        let brute = brute_force_shapley(&GameSpec::new(pixels(shape), &oracle, &x, &b).unwrap()).unwrap();
        for (h, f) in e.map.phi.iter().zip(&brute.values) {
            prop_assert!((h - f).abs() <= 1e-12, "{} vs {}", h, f);
        }
    }

    #[test]
    fn traversals_agree_under_an_absolute_tolerance(
        (shape, gamma) in shape_strategy(),
        weights in proptest::collection::vec(-1.0f64..1.0, 81),
        pairs in proptest::collection::vec((0usize..81, 0usize..81, -2.0f64..2.0), 0..6),
        tau in prop_oneof![Just(0.0), 0.0f64..0.5],
        s in 1usize..=4,
    ) {
        let n = shape.features();
        let pairs: Vec<_> = pairs.into_iter().map(|(a, b, w)| (a % n, b % n, w)).collect();
        let oracle = interacting(weights[..n].to_vec(), pairs, shape.width);
        let x = Tensor::filled(shape, 1.0);
        let b = Baseline::zeros(shape);
        let cfg = ExplainerConfig::new(gamma, s).with_tolerance(Tolerance::Absolute(tau));
        let df = explain(&x, &oracle, &b, &cfg).unwrap();
        let bf = explain(&x, &oracle, &b, &cfg.with_traversal(Traversal::BreadthFirst)).unwrap();
        prop_assert_eq!(df.map.sorted_leaves(), bf.map.sorted_leaves());
        prop_assert_eq!(df.map.evaluations_used, bf.map.evaluations_used);
        prop_assert_eq!(df.map.visited_nodes, bf.map.visited_nodes);
        prop_assert_eq!(df.raw.nodes().len(), bf.raw.nodes().len());
    }

    #[test]
    fn pruned_subtrees_are_never_entered(
        (shape, gamma) in shape_strategy(),
        weights in proptest::collection::vec(-1.0f64..1.0, 81),
        tau in 0.0f64..0.3,
    ) {
        let n = shape.features();
        let oracle = interacting(weights[..n].to_vec(), vec![], shape.width);
        let x = Tensor::filled(shape, 1.0);
        let b = Baseline::zeros(shape);
        let cfg = ExplainerConfig::new(gamma, 1).with_tolerance(Tolerance::Absolute(tau));
        let e = explain(&x, &oracle, &b, &cfg).unwrap();
        let nodes = e.raw.nodes();
        let root = Region::full(shape);
        let players_per_game = |len: usize| 1u64 << len;
        let cost: u64 = nodes.iter().map(|node| players_per_game(node.children.len())).sum();
        prop_assert_eq!(cost, e.map.evaluations_used);
        for node in nodes {
            if node.region == root {
                continue;
            }
            // every solved non-root node was a child that beat the tolerance
            let parent_score = nodes.iter().find_map(|p| {
                p.children.iter().position(|c| *c == node.region).map(|i| p.coefficients[i])
            });
            prop_assert!(parent_score.is_some_and(|phi| phi > tau), "{} entered with {:?}", node.region, parent_score);
        }
        for leaf in &e.map.leaves {
            let score = nodes.iter().find_map(|p| {
                p.children.iter().position(|c| c == leaf).map(|i| p.coefficients[i])
            });
            prop_assert!(score.is_some_and(|phi| phi > tau));
            prop_assert!(leaf.area() <= 1);
        }
    }

    #[test]
    fn map_is_normalized_over_its_leaves(
        (shape, gamma) in shape_strategy(),
        bits in proptest::collection::vec(proptest::bool::weighted(0.3), 81),
        s in 1usize..=9,
    ) {
        let importance: Vec<bool> = bits[..shape.features()].to_vec();
        let x = Tensor::filled(shape, 1.0);
        let b = Baseline::zeros(shape);
        let oracle = PixelMilOracle::for_shape(shape, &importance);
        let e = explain(&x, &oracle, &b, &ExplainerConfig::new(gamma, s)).unwrap();
        let total: f64 = e.map.phi.iter().sum();
        if importance.iter().any(|&a| a) {
            prop_assert!((total - 1.0).abs() < 1e-9);
            // every important feature is covered
            for (i, &a) in importance.iter().enumerate() {
                prop_assert!(!a || e.map.phi[i] > 0.0);
            }
        } else {
            prop_assert_eq!(total, 0.0);
            prop_assert!(e.map.leaves.is_empty());
        }
    }
}

fn percentile_run(importance: &[bool], inclusive: bool) -> hshap::Explanation {
    let shape = Shape::image(1, 8, 8);
    let x = Tensor::filled(shape, 1.0);
    let b = Baseline::zeros(shape);
    let oracle = PixelMilOracle::for_shape(shape, importance);
    let cfg = ExplainerConfig::new(4, 1)
        .with_traversal(Traversal::BreadthFirst)
        .with_tolerance(Tolerance::RelativePercentile(70.0))
        .with_inclusive_threshold(inclusive);
    explain(&x, &oracle, &b, &cfg).unwrap()
}

#[test]
fn percentile_tolerance_follows_a_lone_pixel() {
    // every level pools [1, 0, 0, 0]; the 70th percentile is 0
    let mut importance = vec![false; 64];
    importance[8 * 5 + 2] = true;
    let e = percentile_run(&importance, false);
    assert_eq!(e.map.leaves, vec![Region::new(5, 6, 2, 3)]);
    assert_eq!(e.map.phi, exact_mil_map(&importance));
}

#[test]
fn percentile_ties_need_the_inclusive_comparison() {
    // two important pixels in different root quadrants: the root pool is
    // [0.5, 0.5, 0, 0] and its 70th percentile is 0.5
    let mut importance = vec![false; 64];
    importance[0] = true;
    importance[63] = true;
    assert!(percentile_run(&importance, false).map.leaves.is_empty());
    // deeper pools are mostly zero, so `>=` then admits zero-valued children
    let e = percentile_run(&importance, true);
    let leaves = e.map.sorted_leaves();
    assert!(leaves.contains(&Region::new(0, 1, 0, 1)) && leaves.contains(&Region::new(7, 8, 7, 8)));
    assert!(leaves.len() > 2);
}
