use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hshap::bench::{connected_components, read_manifest, resolve, PatchMilOracle, PixelMilOracle};
use hshap::bridge::{BridgeConfig, BridgeOracle};
use hshap::imageio::{heatmap, load_pgm, load_ppm, save_pgm, signed_heatmap};
use hshap::metrics::{f1_score, F1_THRESHOLD};
use hshap::{explain, Baseline, CharacteristicOracle, ExplainerConfig, Region, SaliencyMap, Tensor, Traversal};

use crate::args::ModelSpec;
use crate::manifest::{map_digest, ReportRow, RunManifest, RUN_FILE};
use crate::{usage, ExplainArgs};

/// Saliency map as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiFile {
    pub shape: [usize; 2],
    pub phi: Vec<f64>,
    pub leaves: Vec<[usize; 4]>,
    pub evals: u64,
    pub visited: u64,
    pub wall_ms: f64,
}

impl PhiFile {
    pub fn new(map: &SaliencyMap) -> Self {
        Self {
            shape: [map.shape.height, map.shape.width],
            phi: map.phi.clone(),
            leaves: map.leaves.iter().map(Region::to_array).collect(),
            evals: map.evaluations_used,
            visited: map.visited_nodes,
            wall_ms: map.wall_time.as_secs_f64() * 1e3,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn load_baseline(path: Option<&Path>, image: &Tensor) -> Result<Baseline> {
    let Some(path) = path else {
        return Ok(Baseline::zeros(image.shape()));
    };
    let baseline = Baseline::load(path).with_context(|| format!("loading baseline {}", path.display()))?;
    if baseline.shape() != image.shape() {
        return Err(usage(format!(
            "baseline {} has shape {:?} but the image has {:?}",
            path.display(),
            baseline.shape().dims(),
            image.shape().dims()
        )));
    }
    Ok(baseline)
}

pub fn load_mask(path: &Path, image: &Tensor) -> Result<Vec<bool>> {
    let mask = load_pgm(path).with_context(|| format!("loading mask {}", path.display()))?;
    let s = image.shape();
    if (mask.height, mask.width) != (s.height, s.width) {
        return Err(usage(format!(
            "mask {} is {}x{} but the image is {}x{}",
            path.display(),
            mask.height,
            mask.width,
            s.height,
            s.width
        )));
    }
    Ok(mask.to_mask())
}

/// Builds the model for one image; each job owns its own instance.
pub fn build_oracle(
    model: &ModelSpec,
    image: &Tensor,
    mask: Option<&[bool]>,
    timeout: f64,
    max_batch: usize,
    score_head: usize,
) -> Result<Box<dyn CharacteristicOracle + Send + Sync>> {
    let s = image.shape();
    let need_mask = || mask.ok_or_else(|| usage("--model oracle and patch:T need a ground-truth mask"));
    Ok(match model {
        ModelSpec::Oracle => Box::new(PixelMilOracle::new(s.height, s.width, need_mask()?)),
        ModelSpec::Patch(t) => {
            let concepts = connected_components(need_mask()?, s.height, s.width);
            Box::new(PatchMilOracle::new(s.height, s.width, &concepts, *t)?)
        }
        ModelSpec::Bridge(command) => {
            let mut cfg = BridgeConfig::new(command.clone(), s);
            cfg.timeout = Duration::from_secs_f64(timeout);
            cfg.max_batch = max_batch;
            cfg.score_head = score_head;
            Box::new(BridgeOracle::spawn(cfg).context("starting model server")?)
        }
    })
}

struct Item {
    name: String,
    image: PathBuf,
    mask: Option<PathBuf>,
}

fn config(args: &ExplainArgs) -> Result<ExplainerConfig> {
    if args.gamma != 2 && args.gamma != 4 {
        return Err(usage(format!("--gamma must be 2 or 4, got {}", args.gamma)));
    }
    let s = match (args.s, args.s_side) {
        (_, Some(side)) => side.checked_mul(side).ok_or_else(|| usage("--s-side is too large"))?,
        (Some(s), None) => s,
        (None, None) => 1,
    };
    if s == 0 {
        return Err(usage("the minimal feature size must be positive"));
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be positive"));
    }
    if !(args.timeout > 0.0 && args.timeout.is_finite()) || args.max_batch == 0 {
        return Err(usage("--timeout and --max-batch must be positive"));
    }
    let traversal = if args.order == "breadth" { Traversal::BreadthFirst } else { Traversal::DepthFirst };
    let cfg = ExplainerConfig::new(args.gamma, s)
        .with_tolerance(args.tau.0)
        .with_traversal(traversal)
        .with_score_head(args.score_head)
        .with_inclusive_threshold(args.inclusive);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn items(args: &ExplainArgs) -> Result<Vec<Item>> {
    if let Some(input) = &args.input {
        let name = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        return Ok(vec![Item { name, image: input.clone(), mask: args.mask.clone() }]);
    }
    let dir = args.dataset.as_ref().expect("clap requires a source");
    let entries = read_manifest(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(entries
        .into_iter()
        .map(|e| Item {
            name: format!("{:06}", e.id),
            image: resolve(dir, &e.image_path),
            mask: Some(resolve(dir, &e.mask_path)),
        })
        .collect())
}

struct Done {
    row: ReportRow,
    files: Vec<(PathBuf, bool)>,
}

fn process(item: &Item, args: &ExplainArgs, cfg: &ExplainerConfig) -> Result<Done> {
    let image = load_ppm(&item.image).with_context(|| format!("loading {}", item.image.display()))?;
    let mask = item.mask.as_deref().map(|p| load_mask(p, &image)).transpose()?;
    let baseline = load_baseline(args.baseline.as_deref(), &image)?;
    let oracle = build_oracle(&args.model, &image, mask.as_deref(), args.timeout, args.max_batch, args.score_head)?;
    let e = explain(&image, &oracle, &baseline, cfg).with_context(|| format!("explaining {}", item.name))?;
    let shape = image.shape();

    let phi_path = args.out.join(format!("{}.phi.json", item.name));
    let heat_path = args.out.join(format!("{}.heatmap.pgm", item.name));
    let raw_path = args.out.join(format!("{}.raw.pgm", item.name));
    let json = serde_json::to_string(&PhiFile::new(&e.map))?;
    std::fs::write(&phi_path, json + "\n").with_context(|| format!("writing {}", phi_path.display()))?;
    save_pgm(&heat_path, &heatmap(&e.map.phi, shape.height, shape.width))?;
    save_pgm(&raw_path, &signed_heatmap(&e.raw.paint(shape), shape.height, shape.width))?;

    let score = mask.as_deref().map(|m| f1_score(&e.map.phi, m, F1_THRESHOLD)).transpose()?;
    let row = ReportRow {
        image: item.name.clone(),
        f1: score.map(|s| s.f1),
        precision: score.map(|s| s.precision),
        recall: score.map(|s| s.recall),
        evals: e.map.evaluations_used,
        visited: e.map.visited_nodes,
        wall_ms: e.map.wall_time.as_secs_f64() * 1e3,
        digest: map_digest(&e.map),
    };
    Ok(Done { row, files: vec![(phi_path, false), (heat_path, true), (raw_path, true)] })
}

pub fn run(args: &ExplainArgs, argv: &[String]) -> Result<()> {
    let cfg = config(args)?;
    if args.input.is_some() && args.mask.is_none() && args.model.needs_mask() {
        return Err(usage("--model oracle and patch:T need --mask with --input"));
    }
    let items = items(args)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let results: Vec<Result<Done>> = pool.install(|| items.par_iter().map(|item| process(item, args, &cfg)).collect());

    let mut manifest = RunManifest::new(argv, None);
    let mut report = String::from(ReportRow::CSV_HEADER);
    for result in results {
        let done = result?;
        report.push_str(&done.row.csv_line());
        for (path, hashed) in &done.files {
            manifest.record(&args.out, path, *hashed)?;
        }
        manifest.rows.push(done.row);
    }
    let report_path = args.out.join("report.csv");
    std::fs::write(&report_path, report).with_context(|| format!("writing {}", report_path.display()))?;
    manifest.record(&args.out, &report_path, false)?;
    manifest.save(&args.out.join(RUN_FILE))
}
