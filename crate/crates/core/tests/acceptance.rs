//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hshap::bench::{generate_instance, MilInstance, PatchMilOracle, PixelMilOracle, SyntheticSpec};
use hshap::metrics::{ablate_topk, f1_score, F1_THRESHOLD};
use hshap::theory::{
    cosine_similarity, exact_mil_map, expected_visited_nodes, similarity_lower_bound, simulate_visited_nodes,
    MilParams,
};
use hshap::{
    brute_force_shapley, evaluation_budget, explain, Baseline, ExplainerConfig, GameSpec, Region, Shape, Tensor,
    Traversal,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

struct Case {
    shape: Shape,
    gamma: usize,
    importance: Vec<bool>,
}

impl Case {
    fn random(n: usize, gamma: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(0..=n / 4);
        Self::with_k(n, gamma, k, &mut rng)
    }

    fn with_k(n: usize, gamma: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let shape = if gamma == 2 {
            Shape::vector(n)
        } else {
            let side = (n as f64).sqrt() as usize;
            Shape::image(1, side, side)
        };
        let mut importance = vec![false; n];
        for i in sample(rng, n, k) {
            importance[i] = true;
        }
        Self { shape, gamma, importance }
    }

    fn k(&self) -> usize {
        self.importance.iter().filter(|&&a| a).count()
    }

    fn run(&self, s: usize, traversal: Traversal) -> hshap::Explanation {
        let x = Tensor::filled(self.shape, 0.5);
        let b = Baseline::zeros(self.shape);
        let oracle = PixelMilOracle::for_shape(self.shape, &self.importance);
        let cfg = ExplainerConfig::new(self.gamma, s).with_traversal(traversal);
        explain(&x, &oracle, &b, &cfg).expect("explanation succeeds")
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn exactness_cases() -> Vec<(u64, usize, usize)> {
    let combos = [(16, 2), (16, 4), (64, 2), (64, 4), (256, 2), (256, 4)];
    (0..1000u64).map(|i| (i, combos[i as usize % 6].0, combos[i as usize % 6].1)).collect()
}

fn exactness() -> Outcome {
    let started = Instant::now();
    let results: Vec<Result<(f64, f64), String>> = exactness_cases()
        .into_par_iter()
        .map(|(seed, n, gamma)| {
            let case = Case::random(n, gamma, seed);
            let e = case.run(1, Traversal::DepthFirst);
            let exact = exact_mil_map(&case.importance);
            let err = max_abs_diff(&e.map.phi, &exact);
            let mut brute_err = 0.0;
            if n <= 16 {
                let x = Tensor::filled(case.shape, 0.5);
                let b = Baseline::zeros(case.shape);
                let oracle = PixelMilOracle::for_shape(case.shape, &case.importance);
                let w = case.shape.width;
                let players = (0..n).map(|i| Region::new(i / w, i / w + 1, i % w, i % w + 1)).collect();
                let game = GameSpec::new(players, &oracle, &x, &b).map_err(|e| e.to_string())?;
                let brute = brute_force_shapley(&game).map_err(|e| e.to_string())?;
                brute_err = max_abs_diff(&e.map.phi, &brute.values);
            }
            Ok((err, brute_err))
        })
        .collect();
    let elapsed = started.elapsed();
    let mut worst = (0.0f64, 0.0f64);
    for r in results {
        let (a, b) = r?;
        worst = (worst.0.max(a), worst.1.max(b));
    }
    let detail = format!(
        "1000 instances, max |err| vs exact {:.2e}, vs brute force (n=16) {:.2e}, {:.2?}",
        worst.0, worst.1, elapsed
    );
    if worst.0 <= 1e-12 && worst.1 <= 1e-12 && elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn expected_complexity() -> Outcome {
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, rho) in [0.0, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0].into_iter().enumerate() {
        let params = MilParams::new(64, 2, rho);
        let formula = expected_visited_nodes(&params).map_err(|e| e.to_string())?;
        let sim = simulate_visited_nodes(&params, 10_000, 0x5eed + i as u64).map_err(|e| e.to_string())?;
        let tol = (3.0 * sim.stderr).max(0.02 * formula);
        let ok = (sim.mean - formula).abs() <= tol
            && (rho != 0.0 || (formula == 1.0 && sim.mean == 1.0))
            && (rho != 1.0 || (formula == 127.0 && sim.mean == 127.0));
        if !ok {
            failures.push(format!("rho={rho}: formula {formula} simulated {} ± {}", sim.mean, sim.stderr));
        }
        rows.push(format!("{rho}:{formula:.3}/{:.3}", sim.mean));
    }
    let elapsed = started.elapsed();
    let detail = format!("n=64 gamma=2 formula/simulated {} in {:.2?}", rows.join(" "), elapsed);
    if failures.is_empty() && elapsed < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn similarity_bound() -> Outcome {
    let violations: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|i| {
            let s = [1, 4, 16][i as usize % 3];
            let k = 1 + (i as usize / 3) % 8;
            let gamma = if (i / 24) % 2 == 0 { 2 } else { 4 };
            let mut rng = ChaCha8Rng::seed_from_u64(0xb0b0 + i);
            let case = Case::with_k(64, gamma, k, &mut rng);
            let e = case.run(s, Traversal::DepthFirst);
            let cos = cosine_similarity(&exact_mil_map(&case.importance), &e.map.phi).ok()?;
            let bound = similarity_lower_bound(s, k, 64).ok()?;
            // equality is attained exactly in real arithmetic
            (cos < bound - 1e-12).then(|| format!("instance {i} (s={s}, k={k}, gamma={gamma}): {cos} < {bound}"))
        })
        .collect();
    if violations.is_empty() {
        Ok("1000 instances over s in {1,4,16}, k in 1..=8, n=64: zero violations".into())
    } else {
        Err(format!("{} violations, e.g. {}", violations.len(), violations[0]))
    }
}

fn budget() -> Outcome {
    let results: Vec<Option<String>> = exactness_cases()
        .into_par_iter()
        .map(|(seed, n, gamma)| {
            let case = Case::random(n, gamma, seed);
            let k = case.k();
            if k == 0 {
                return None;
            }
            let e = case.run(1, Traversal::DepthFirst);
            let cap = evaluation_budget(k as u64, n as u64, gamma as u64).expect("n is a power of gamma");
            (e.map.evaluations_used > cap)
                .then(|| format!("n={n} gamma={gamma} k={k}: {} > {cap}", e.map.evaluations_used))
        })
        .collect();
    let checked = exactness_cases().len();
    let over: Vec<String> = results.into_iter().flatten().collect();
    if over.is_empty() {
        Ok(format!("evaluations within 2^gamma k log_gamma n on every instance with k >= 1 (of {checked})"))
    } else {
        Err(format!("{} over budget, e.g. {}", over.len(), over[0]))
    }
}

fn crosses_instances(crosses: usize, count: u64) -> Vec<MilInstance> {
    let spec = SyntheticSpec::full_scale();
    (0..count)
        .map(|i| generate_instance(&spec, crosses, 0xc0ffee + 31 * crosses as u64 + i).expect("generator succeeds"))
        .collect()
}

fn synthetic() -> Outcome {
    let mut slowest = Duration::ZERO;
    for crosses in [1, 6] {
        for inst in crosses_instances(crosses, 10) {
            let oracle = PixelMilOracle::from_instance(&inst);
            let b = Baseline::zeros(inst.shape());
            let started = Instant::now();
            let e = explain(&inst.image, &oracle, &b, &ExplainerConfig::new(4, 1)).map_err(|e| e.to_string())?;
            let wall = started.elapsed();
            slowest = slowest.max(wall);
            let f1 = f1_score(&e.map.phi, &inst.truth_mask, F1_THRESHOLD).map_err(|e| e.to_string())?.f1;
            if f1 != 1.0 || wall >= Duration::from_secs(1) {
                return Err(format!("{crosses} crosses, instance {}: f1 {f1}, {wall:.2?}", inst.seed));
            }
        }
    }
    Ok(format!("100x120, 1 and 6 crosses (10 images each): f1 = 1.0, slowest image {slowest:.2?}"))
}

fn ablation_step() -> Outcome {
    for inst in [crosses_instances(1, 1), crosses_instances(6, 1)].concat() {
        let n = inst.shape().features();
        let important = inst.important_count();
        let oracle = PixelMilOracle::from_instance(&inst);
        let b = Baseline::zeros(inst.shape());
        let ks: Vec<usize> = (0..=n).collect();
        let curve = ablate_topk(&inst.image, &exact_mil_map(&inst.importance), &oracle, &b, &ks, 0)
            .map_err(|e| e.to_string())?;
        if let Some((k, s)) = curve
            .ks
            .iter()
            .zip(&curve.scores)
            .find(|(&k, &s)| s != if k < important { 1.0 } else { 0.0 })
        {
            return Err(format!("{important} important pixels but score {s} at k={k}"));
        }
    }
    Ok("exact map curves drop from 1 to 0 exactly at k = #important (1 and 6 crosses, every k)".into())
}

fn ablation_patch() -> Outcome {
    // a cross covers 36 pixels; the detector needs a third of one
    let threshold = 12;
    let sizes = [25usize, 9, 4, 1];
    let spec = SyntheticSpec::full_scale();
    let instances: Vec<MilInstance> =
        (0..40).map(|i| generate_instance(&spec, 1 + i % 6, 1000 + i as u64).expect("generator succeeds")).collect();
    let mut means = Vec::new();
    for &s in &sizes {
        let mut total = 0.0;
        for inst in &instances {
            let oracle = PatchMilOracle::from_instance(inst, threshold).map_err(|e| e.to_string())?;
            let b = Baseline::zeros(inst.shape());
            let e = explain(&inst.image, &oracle, &b, &ExplainerConfig::new(4, s)).map_err(|e| e.to_string())?;
            total += f1_score(&e.map.phi, &inst.truth_mask, F1_THRESHOLD).map_err(|e| e.to_string())?.f1;
        }
        means.push(total / instances.len() as f64);
    }
    let table: Vec<String> = sizes.iter().zip(&means).map(|(s, f)| format!("s={s}:{f:.3}")).collect();
    let detail = format!("patch oracle (threshold {threshold}), mean f1 over 40 images {}", table.join(" "));
    if means.windows(2).all(|w| w[0] > w[1]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn traversal_agreement() -> Outcome {
    let combos = [(16, 2), (16, 4), (64, 2), (64, 4), (256, 2), (256, 4), (128, 2)];
    let mismatches: Vec<u64> = (0..200u64)
        .into_par_iter()
        .filter(|&i| {
            let (n, gamma) = combos[i as usize % combos.len()];
            let case = Case::random(n, gamma, 0xdf_bf00 + i);
            let df = case.run(1, Traversal::DepthFirst);
            let bf = case.run(1, Traversal::BreadthFirst);
            df.map.sorted_leaves() != bf.map.sorted_leaves()
        })
        .collect();
    if mismatches.is_empty() {
        Ok("identical leaf sets on 200 instances".into())
    } else {
        Err(format!("{} instances disagree, first seed offset {}", mismatches.len(), mismatches[0]))
    }
}

fn main() -> ExitCode {
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 8] = [
        ("exactness", exactness),
        ("expected-visited-nodes", expected_complexity),
        ("similarity-bound", similarity_bound),
        ("evaluation-budget", budget),
        ("synthetic-crosses", synthetic),
        ("ablation-step", ablation_step),
        ("ablation-patch-degradation", ablation_patch),
        ("traversal-agreement", traversal_agreement),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
