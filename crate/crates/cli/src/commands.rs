use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use hshap::bench::{self, read_manifest, resolve, write_dataset, SyntheticSpec, MANIFEST_FILE};
use hshap::imageio::load_ppm;
use hshap::metrics::ablate_topk;
use hshap::theory::{expected_visited_nodes, simulate_visited_nodes, MilParams};
use hshap::compute_baseline;

use crate::explain::{build_oracle, load_baseline, load_mask, PhiFile};
use crate::manifest::{compare, find_out, manifest_path, replace_out, writes_directory, RunManifest, RUN_FILE};
use crate::{usage, Mismatch, AblateArgs, BaselineArgs, GenerateArgs, ReplayArgs, TheoryArgs};

pub fn generate(args: &GenerateArgs, argv: &[String]) -> Result<()> {
    let spec = SyntheticSpec {
        height: args.size.height,
        width: args.size.width,
        shape_size: args.shape_size,
        distractors: (args.distractors.0, args.distractors.1),
        crosses: (args.crosses.0, args.crosses.1),
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let instances = bench::generate(&spec, args.count, args.positive_fraction).map_err(|e| usage(e.to_string()))?;
    let entries = write_dataset(&args.out, &instances).with_context(|| format!("writing {}", args.out.display()))?;
    let mut manifest = RunManifest::new(argv, Some(args.seed));
    manifest.record(&args.out, &args.out.join(MANIFEST_FILE), true)?;
    for e in &entries {
        manifest.record(&args.out, &args.out.join(&e.image_path), true)?;
        manifest.record(&args.out, &args.out.join(&e.mask_path), true)?;
    }
    manifest.save(&args.out.join(RUN_FILE))?;
    let positives = instances.iter().filter(|i| i.label == 1).count();
    eprintln!("wrote {} images ({positives} positive) to {}", instances.len(), args.out.display());
    Ok(())
}

pub fn baseline(args: &BaselineArgs, argv: &[String]) -> Result<()> {
    let paths: Vec<PathBuf> = match &args.dataset {
        Some(dir) => read_manifest(dir)?.iter().map(|e| resolve(dir, &e.image_path)).collect(),
        None => args.input.clone(),
    };
    let mut failure = None;
    let images = paths.iter().map_while(|p| match load_ppm(p) {
        Ok(t) => Some(t),
        Err(e) => {
            failure = Some(anyhow::Error::new(e).context(format!("loading {}", p.display())));
            None
        }
    });
    let result = compute_baseline(images);
    if let Some(e) = failure {
        return Err(e);
    }
    let baseline = result.map_err(|e| usage(e.to_string()))?;
    baseline.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut manifest = RunManifest::new(argv, None);
    manifest.record(parent(&args.out), &args.out, true)?;
    manifest.save(&manifest_path("baseline", &args.out))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

/// Writes `text` to `out`, or to standard output without a manifest.
fn emit(command: &str, text: &str, out: Option<&Path>, argv: &[String], seed: Option<u64>) -> Result<()> {
    let Some(out) = out else {
        std::io::stdout().write_all(text.as_bytes())?;
        return Ok(());
    };
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let mut manifest = RunManifest::new(argv, seed);
    manifest.record(parent(out), out, true)?;
    manifest.save(&manifest_path(command, out))
}

pub fn ablate(args: &AblateArgs, argv: &[String]) -> Result<()> {
    if args.model.needs_mask() && args.mask.is_none() {
        return Err(usage("--model oracle and patch:T need --mask"));
    }
    let image = load_ppm(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let map = PhiFile::load(&args.map)?;
    let shape = image.shape();
    if map.shape != [shape.height, shape.width] || map.phi.len() != shape.features() {
        return Err(usage(format!(
            "map {} is {}x{} but the image is {}x{}",
            args.map.display(),
            map.shape[0],
            map.shape[1],
            shape.height,
            shape.width
        )));
    }
    let mask = args.mask.as_deref().map(|p| load_mask(p, &image)).transpose()?;
    let baseline = load_baseline(args.baseline.as_deref(), &image)?;
    let ks = args.ks.resolve(shape.features());
    if ks.last().is_some_and(|&k| k > shape.features()) {
        return Err(usage(format!("--ks exceeds the {} features of the image", shape.features())));
    }
    let oracle = build_oracle(&args.model, &image, mask.as_deref(), args.timeout, 64, args.score_head)?;
    let curve = ablate_topk(&image, &map.phi, &oracle, &baseline, &ks, args.score_head)?;
    emit("ablate", &curve.to_csv(), args.out.as_deref(), argv, None)
}

pub fn theory(args: &TheoryArgs, argv: &[String]) -> Result<()> {
    if args.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let mut csv = String::from("rho,formula,simulated_mean,stderr\n");
    for &rho in &args.rho_grid.0 {
        let params = MilParams::new(args.n, args.gamma, rho);
        let formula = expected_visited_nodes(&params).map_err(|e| usage(e.to_string()))?;
        let sim = simulate_visited_nodes(&params, args.trials, args.seed).map_err(|e| usage(e.to_string()))?;
        csv.push_str(&format!("{rho},{formula},{},{}\n", sim.mean, sim.stderr));
    }
    emit("theory", &csv, args.out.as_deref(), argv, Some(args.seed))
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let original = RunManifest::load(&args.manifest)?;
    if original.command == "replay" {
        return Err(usage("cannot replay a replay"));
    }
    let old_out = find_out(&original.args).ok_or_else(|| usage("the recorded run has no --out"))?;
    let dir = match &args.out {
        Some(d) => std::path::absolute(d)?,
        None => std::env::temp_dir().join(format!("hshap-replay-{}", std::process::id())),
    };
    // recorded paths are relative to where the run started
    if !original.cwd.is_empty() {
        std::env::set_current_dir(&original.cwd)
            .with_context(|| format!("entering the recorded directory {}", original.cwd))?;
    }
    let new_out = if writes_directory(&original.command) {
        dir
    } else {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        dir.join(Path::new(&old_out).file_name().unwrap_or_default())
    };
    if std::path::absolute(&old_out)? == new_out {
        bail!("the replay would overwrite the original outputs; pass a different --out");
    }
    let new_args = replace_out(&original.args, &new_out.display().to_string());
    crate::run(&new_args)?;
    let again = RunManifest::load(&manifest_path(&original.command, &new_out))?;
    let files = compare(&original, &again).map_err(|e| Mismatch(e.to_string()))?;
    println!(
        "replayed {}: {} rows and {files} files identical, outputs in {}",
        original.command,
        original.rows.len(),
        new_out.display()
    );
    Ok(())
}
