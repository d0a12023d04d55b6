use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use smac_core::config::{network_from_pairs, network_pairs, RunConfig};
use smac_core::io::{self, DatasetLayout, GrayImage, RgbImage};
use smac_core::kernels::resize_bilinear_plane;
use smac_core::metrics::{evaluate_image, MetricsReport};
use smac_core::network::{NetworkConfig, TwoStreamState};
use smac_core::stats::{image_stats, StatsOptions, StatsReport, AAM_SIZE};
use smac_core::trainer::{self, resize_sample, Sample};
use smac_core::{checkpoint, suite, ParamStore};

use crate::{CliResult, EvalArgs, Failure, GradcheckArgs, InferArgs, StatsArgs, TrainArgs};

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", 3, format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_failure(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn dir_name(path: &Path) -> String {
    let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    abs.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string()
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    if !(a.tol.is_finite() && a.tol > 0.0 && a.h.is_finite() && a.h > 0.0) {
        return Err(Failure::argument("--tol and --h must be positive"));
    }
    if a.seeds.is_empty() {
        return Err(Failure::argument("--seeds is empty"));
    }
    let start = Instant::now();
    let entries = suite::run(&a.seeds, a.h, a.tol)?;
    print!("{}", suite::table(&entries));
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.pass)
        .map(|e| format!("{}@{}", e.name, e.seed))
        .collect();
    println!(
        "{} checks, {} failed, tol {:e}, h {:e}, {:.1} s",
        entries.len(),
        failed.len(),
        a.tol,
        a.h,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new("gradcheck", 4, format!("failing cases: {}", failed.join(","))))
    }
}

/// Config file's `dataset`, relative to the file's directory.
fn config_dataset(cfg: &RunConfig, config_path: Option<&Path>) -> Option<PathBuf> {
    let d = cfg.dataset.as_ref()?;
    match config_path.and_then(Path::parent) {
        Some(base) if d.is_relative() => Some(base.join(d)),
        _ => Some(d.clone()),
    }
}

pub fn train(a: &TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.iters {
        cfg.train.total_iters = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let dataset = a
        .dataset
        .clone()
        .or_else(|| config_dataset(&cfg, a.config.as_deref()))
        .ok_or_else(|| Failure::new("config", 2, "no dataset: pass --dataset or set `dataset` in the config"))?;
    let samples = trainer::load_samples(&dataset)?;

    let loss_path = a.loss_curve.clone().unwrap_or_else(|| a.out.join("loss.csv"));
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.bin"));
    let start = Instant::now();
    let log_every = a.log_every;
    let t = &cfg.train;
    let result = trainer::train(&samples, &cfg.network, t, cfg.invert_depth, |i, loss| {
        if log_every > 0 && (i % log_every == 0 || i + 1 == t.total_iters) {
            eprintln!("iter {i} loss {loss:.6} lr {:e}", trainer::lr_schedule(i, t));
        }
    })?;

    ensure_parent(&loss_path)?;
    trainer::write_loss_curve(&loss_path, &result.losses)?;
    let mut meta = network_pairs(&cfg.network);
    meta.push(("invert_depth".into(), cfg.invert_depth.to_string()));
    meta.push(("seed".into(), t.seed.to_string()));
    meta.push(("total_iters".into(), t.total_iters.to_string()));
    ensure_parent(&ckpt_path)?;
    checkpoint::save(&result.store, &ckpt_path, &meta)?;

    let first = result.losses.first().copied().unwrap_or(f64::NAN);
    let last = result.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained images={} iters={} seed={} initial_loss={first:.6} final_loss={last:.6} ratio={:.4} seconds={:.1}",
        samples.len(),
        t.total_iters,
        t.seed,
        last / first,
        start.elapsed().as_secs_f64()
    );
    println!("loss_curve={}", loss_path.display());
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

/// A trained model rebuilt from its checkpoint, with the stored depth
/// convention unless overridden.
pub struct Model {
    pub net: TwoStreamState,
    pub store: ParamStore,
    pub invert_depth: bool,
}

pub fn load_model(path: &Path, invert_override: Option<bool>) -> CliResult<Model> {
    let meta: BTreeMap<String, String> = checkpoint::read_meta(path)?;
    let net_cfg = network_from_pairs(&NetworkConfig::toy(), meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let (net, mut store) = trainer::init_network(&net_cfg, 0)?;
    checkpoint::load(&mut store, path)?;
    let stored = match meta.get("invert_depth").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(v) => return Err(Failure::new("data", 3, format!("{}: invert_depth is {v:?}", path.display()))),
    };
    Ok(Model {
        net,
        store,
        invert_depth: invert_override.unwrap_or(stored),
    })
}

/// Inputs resized to the network's input size, as a batch of one.
pub fn prepare_pair(rgb: &RgbImage, depth: &GrayImage, size: usize, invert: bool) -> CliResult<(smac_core::Tensor, smac_core::Tensor)> {
    let blank = GrayImage::filled(rgb.width, rgb.height, 0);
    let s = resize_sample(&Sample::new(rgb.clone(), depth.clone(), blank)?, size);
    let (r, d) = trainer::preprocess_inputs(&s.rgb, &s.depth, invert)?;
    Ok((trainer::stack(&[&r])?, trainer::stack(&[&d])?))
}

pub fn infer(a: &InferArgs) -> CliResult {
    let mut model = load_model(&a.checkpoint, a.invert_depth)?;
    let layout = DatasetLayout::open(&a.dataset, false)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let size = model.net.config.input_size;
    for entry in &layout.entries {
        let rgb = io::load_rgb(&entry.rgb)?;
        let depth = io::load_gray(&entry.depth)?;
        let (r, d) = prepare_pair(&rgb, &depth, size, model.invert_depth)
            .map_err(|f| Failure::new(f.kind, f.code, format!("{}: {}", entry.stem, f.msg)))?;
        let maps = trainer::infer(&model.net, &mut model.store, r, d)?;
        let map = resize_bilinear_plane(&maps[0], size, size, rgb.height, rgb.width);
        let path = a.out.join(format!("{}.pgm", entry.stem));
        io::save_gray(&path, &map, rgb.width, rgb.height)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let preds: BTreeMap<String, PathBuf> = io::list_images(&a.pred)?.into_iter().collect();
    let gts = io::list_images(&a.gt)?;
    if gts.is_empty() {
        return Err(Failure::new("data", 3, format!("{}: no ground-truth images", a.gt.display())));
    }
    let mut images = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        let pred_path = preds
            .get(stem)
            .ok_or_else(|| Failure::new("data", 3, format!("{}: no prediction for {stem:?}", a.pred.display())))?;
        let pred = io::load_gray(pred_path)?;
        let gt = io::load_gray(gt_path)?;
        let p: Vec<f64> = pred.data.iter().map(|&v| v as f64 / 255.0).collect();
        let mask: Vec<bool> = gt.data.iter().map(|&v| v >= 128).collect();
        images.push(evaluate_image(stem, &p, (pred.width, pred.height), &mask, (gt.width, gt.height))?);
    }
    let unused = preds.keys().filter(|k| !gts.iter().any(|(s, _)| s == *k)).count();
    if unused > 0 {
        eprintln!("note: {unused} prediction(s) without ground truth were ignored");
    }
    let name = a.name.clone().unwrap_or_else(|| {
        let gt_abs = fs::canonicalize(&a.gt).unwrap_or_else(|_| a.gt.clone());
        gt_abs.parent().map_or_else(|| dir_name(&a.gt), dir_name)
    });
    let report = MetricsReport::new(&name, images)?;
    let mut text = report.table();
    if report.undefined_f > 0 {
        text.push_str(&format!(
            "# maxF undefined for {} image(s) with empty ground truth\n",
            report.undefined_f
        ));
    }
    if a.detail {
        text.push('\n');
        text.push_str(&report.detail());
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> CliResult {
    if !(0.0..=1.0).contains(&a.edge_threshold) {
        return Err(Failure::argument("--edge-threshold must be in [0, 1]"));
    }
    let opts = StatsOptions {
        raw_counts: a.raw_counts,
        edge_threshold: a.edge_threshold,
        match_radius: a.match_radius,
    };
    let layout = DatasetLayout::open(&a.dataset, true)?;
    let mut images = Vec::with_capacity(layout.len());
    let mut gts = Vec::with_capacity(layout.len());
    for entry in &layout.entries {
        let s = Sample::load(entry)?;
        images.push(image_stats(&entry.stem, &s.rgb, &s.depth, &s.gt, &opts)?);
        gts.push(s.gt);
    }
    let name = a.name.clone().unwrap_or_else(|| dir_name(&a.dataset));
    let report = StatsReport::new(&name, images, &gts)?;
    let text = report.table();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    if let Some(path) = &a.aam {
        ensure_parent(path)?;
        io::save_gray(path, &report.center.aam, AAM_SIZE, AAM_SIZE)?;
    }
    Ok(())
}
