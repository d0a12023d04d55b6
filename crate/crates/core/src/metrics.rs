//! Saliency evaluation: MAE, maximum F-measure, S-measure and E-measure.
//!
//! Predictions are real maps in [0, 1]; ground truths are boolean masks of
//! the same size, row-major.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels::resize_bilinear_plane;

pub const BETA2: f64 = 0.3;
pub const NUM_THRESHOLDS: usize = 255;
const EPS: f64 = f64::EPSILON;

fn check(op: &str, pred: &[f64], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{op}: prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data(format!("{op}: empty map")));
    }
    Ok(())
}

fn thresholds() -> impl Iterator<Item = f64> {
    (1..=NUM_THRESHOLDS).map(|k| k as f64 / NUM_THRESHOLDS as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn mae(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check("mae", pred, gt)?;
    Ok(mean(pred.iter().zip(gt).map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())))
}

/// F-measure of a hard prediction; zero when nothing is predicted.
pub fn f_measure(binary: &[bool], gt: &[bool], beta2: f64) -> f64 {
    let tp = binary.iter().zip(gt).filter(|(&b, &g)| b && g).count() as f64;
    let predicted = binary.iter().filter(|&&b| b).count() as f64;
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    if predicted == 0.0 || positives == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / predicted, tp / positives);
    if p + r == 0.0 {
        return 0.0;
    }
    (1.0 + beta2) * p * r / (beta2 * p + r)
}

/// Maximum over thresholds `k/255` of the F-measure of `pred ≥ t`.
/// `None` when the ground truth has no foreground.
pub fn max_f_measure(pred: &[f64], gt: &[bool], beta2: f64) -> Result<Option<f64>> {
    check("max_f_measure", pred, gt)?;
    if !gt.iter().any(|&g| g) {
        return Ok(None);
    }
    let mut best = 0.0f64;
    let mut binary = vec![false; pred.len()];
    for t in thresholds() {
        for (b, &p) in binary.iter_mut().zip(pred) {
            *b = p >= t;
        }
        best = best.max(f_measure(&binary, gt, beta2));
    }
    Ok(Some(best))
}

/// Mean and `n - 1` normalized standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v.iter().copied());
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg)
}

/// SSIM-style similarity of one block.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean(pred.iter().copied());
    let y = mean(gt.iter().copied());
    let (sx, sy, sxy) = if n < 2 {
        (0.0, 0.0, 0.0)
    } else {
        let d = (n - 1) as f64;
        let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
        let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
        let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
        (sx, sy, sxy)
    };
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: the rounded foreground centroid plus one, or the
/// rounded image center when there is no foreground.
fn split_point(gt: &[bool], w: usize, h: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
        n += 1;
    }
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let x = (sx / n as f64).round_ties_even() as usize + 1;
    let y = (sy / n as f64).round_ties_even() as usize + 1;
    (x.min(w), y.min(h))
}

fn region_score(pred: &[f64], gt: &[bool], w: usize, h: usize) -> f64 {
    let (x, y) = split_point(gt, w, h);
    let area = (w * h) as f64;
    let g: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        let mut bp = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut bg = Vec::with_capacity(bp.capacity());
        for r in r0..r1 {
            bp.extend_from_slice(&pred[r * w + c0..r * w + c1]);
            bg.extend_from_slice(&g[r * w + c0..r * w + c1]);
        }
        block_ssim(&bp, &bg)
    };
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let mut score = 0.0;
    for (wt, (r0, r1, c0, c1)) in [(w1, (0, y, 0, x)), (w2, (0, y, x, w)), (w3, (y, h, 0, x)), (w4, (y, h, x, w))] {
        if r1 > r0 && c1 > c0 {
            score += wt * block(r0, r1, c0, c1);
        }
    }
    score
}

/// Structure measure `α·S_object + (1 − α)·S_region`, clamped at zero.
///
/// An all-background ground truth scores `1 − mean(pred)`, an
/// all-foreground one `mean(pred)`.
pub fn s_measure(pred: &[f64], gt: &[bool], width: usize, height: usize, alpha: f64) -> Result<f64> {
    check("s_measure", pred, gt)?;
    if width * height != gt.len() {
        return Err(Error::Data(format!(
            "s_measure: {width}x{height} does not match {} pixels",
            gt.len()
        )));
    }
    let fg = gt.iter().filter(|&&g| g).count();
    if fg == 0 {
        return Ok(1.0 - mean(pred.iter().copied()));
    }
    if fg == gt.len() {
        return Ok(mean(pred.iter().copied()));
    }
    let s = alpha * object_score(pred, gt) + (1.0 - alpha) * region_score(pred, gt, width, height);
    Ok(s.max(0.0))
}

/// Enhanced alignment of a hard prediction with the ground truth.
pub fn enhanced_alignment(binary: &[bool], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let fg_gt = gt.iter().filter(|&&g| g).count();
    let fg_pred = binary.iter().filter(|&&b| b).count() as f64;
    if fg_gt == 0 {
        return (n - fg_pred) / n;
    }
    if fg_gt == gt.len() {
        return fg_pred / n;
    }
    let mp = fg_pred / n;
    let mg = fg_gt as f64 / n;
    mean(binary.iter().zip(gt).map(|(&b, &g)| {
        let a = if b { 1.0 } else { 0.0 } - mp;
        let c = if g { 1.0 } else { 0.0 } - mg;
        let denom = a * a + c * c;
        let xi = if denom == 0.0 { 0.0 } else { 2.0 * a * c / denom };
        (1.0 + xi) * (1.0 + xi) / 4.0
    }))
}

/// Maximum enhanced alignment over the thresholds `k/255`.
pub fn e_measure(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check("e_measure", pred, gt)?;
    let mut best = 0.0f64;
    let mut binary = vec![false; pred.len()];
    for t in thresholds() {
        for (b, &p) in binary.iter_mut().zip(pred) {
            *b = p >= t;
        }
        best = best.max(enhanced_alignment(&binary, gt));
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub s_measure: f64,
    /// `None` when the ground truth is empty.
    pub max_f: Option<f64>,
    pub e_measure: f64,
    pub mae: f64,
}

/// All four measures of one image. The prediction is resized bilinearly to
/// the ground truth size first.
pub fn evaluate_image(name: &str, pred: &[f64], pred_size: (usize, usize), gt: &[bool], gt_size: (usize, usize)) -> Result<ImageMetrics> {
    let (pw, ph) = pred_size;
    let (gw, gh) = gt_size;
    if pred.len() != pw * ph || gt.len() != gw * gh {
        return Err(Error::Data(format!("{name}: map sizes do not match their buffers")));
    }
    let resized;
    let pred = if pred_size == gt_size {
        pred
    } else {
        resized = resize_bilinear_plane(pred, ph, pw, gh, gw);
        &resized[..]
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        s_measure: s_measure(pred, gt, gw, gh, 0.5)?,
        max_f: max_f_measure(pred, gt, BETA2)?,
        e_measure: e_measure(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub images: Vec<ImageMetrics>,
    pub s_measure: f64,
    /// Mean over images with a defined F-measure.
    pub max_f: f64,
    pub e_measure: f64,
    pub mae: f64,
    /// Images excluded from the maxF mean.
    pub undefined_f: usize,
}

impl MetricsReport {
    pub fn new(dataset: &str, images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data(format!("{dataset}: no images to evaluate")));
        }
        let fs: Vec<f64> = images.iter().filter_map(|m| m.max_f).collect();
        Ok(Self {
            dataset: dataset.to_string(),
            s_measure: mean(images.iter().map(|m| m.s_measure)),
            max_f: if fs.is_empty() { f64::NAN } else { mean(fs.iter().copied()) },
            e_measure: mean(images.iter().map(|m| m.e_measure)),
            mae: mean(images.iter().map(|m| m.mae)),
            undefined_f: images.len() - fs.len(),
            images,
        })
    }

    /// `dataset, n_images, Sm, maxF, E, MAE` header and one row.
    pub fn table(&self) -> String {
        format!(
            "dataset, n_images, Sm, maxF, E, MAE\n{}, {}, {:.4}, {:.4}, {:.4}, {:.4}\n",
            self.dataset,
            self.images.len(),
            self.s_measure,
            self.max_f,
            self.e_measure,
            self.mae
        )
    }

    pub fn detail(&self) -> String {
        let mut s = String::from("image, Sm, maxF, E, MAE\n");
        for m in &self.images {
            let f = m.max_f.map_or("undefined".to_string(), |f| format!("{f:.6}"));
            let _ = writeln!(s, "{}, {:.6}, {f}, {:.6}, {:.6}", m.name, m.s_measure, m.e_measure, m.mae);
        }
        s
    }
}
