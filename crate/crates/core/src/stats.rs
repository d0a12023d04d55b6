//! Dataset profiling: global contrast (χ² between foreground and background
//! histograms), interior contrast (foreground entropy), center bias from a
//! Gaussian fitted to the average annotation map, object size and a
//! bad-point-rate depth quality score.

use nalgebra::{Matrix5, Vector5};

use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use crate::kernels::resize_bilinear_plane;

pub const COLOR_BINS: usize = 512;
pub const DEPTH_BINS: usize = 256;
pub const AAM_SIZE: usize = 256;
pub const FIT_MAX_ITERS: usize = 200;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MATCH_RADIUS: usize = 2;

/// Joint 8×8×8 bin of an RGB pixel.
pub fn color_bin(p: [u8; 3]) -> usize {
    ((p[0] as usize >> 5) << 6) | ((p[1] as usize >> 5) << 3) | (p[2] as usize >> 5)
}

/// Color histograms (counts) of the pixels with `mask == select`.
pub fn color_histogram(rgb: &RgbImage, mask: &[bool], select: bool) -> Vec<f64> {
    let mut h = vec![0.0; COLOR_BINS];
    for (px, &m) in rgb.data.chunks_exact(3).zip(mask) {
        if m == select {
            h[color_bin([px[0], px[1], px[2]])] += 1.0;
        }
    }
    h
}

pub fn depth_histogram(depth: &GrayImage, mask: &[bool], select: bool) -> Vec<f64> {
    let mut h = vec![0.0; DEPTH_BINS];
    for (&d, &m) in depth.data.iter().zip(mask) {
        if m == select {
            h[d as usize] += 1.0;
        }
    }
    h
}

/// Scales to unit sum; an empty histogram stays zero.
pub fn normalize(hist: &[f64]) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    if total == 0.0 {
        return hist.to_vec();
    }
    hist.iter().map(|v| v / total).collect()
}

/// `½ Σ (a_i − b_i)² / (a_i + b_i)` over bins with `a_i + b_i > 0`.
pub fn chi2(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y).powi(2) / (x + y))
        .sum::<f64>()
}

/// Natural-log entropy of a normalized histogram.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn has_both(mask: &[bool]) -> bool {
    mask.iter().any(|&m| m) && mask.iter().any(|&m| !m)
}

fn chi2_of(fg: Vec<f64>, bg: Vec<f64>, raw_counts: bool) -> f64 {
    if raw_counts {
        chi2(&fg, &bg)
    } else {
        chi2(&normalize(&fg), &normalize(&bg))
    }
}

/// Color global contrast; `None` without both foreground and background.
pub fn color_contrast(rgb: &RgbImage, mask: &[bool], raw_counts: bool) -> Option<f64> {
    has_both(mask).then(|| chi2_of(color_histogram(rgb, mask, true), color_histogram(rgb, mask, false), raw_counts))
}

pub fn depth_contrast(depth: &GrayImage, mask: &[bool], raw_counts: bool) -> Option<f64> {
    has_both(mask).then(|| chi2_of(depth_histogram(depth, mask, true), depth_histogram(depth, mask, false), raw_counts))
}

/// Entropy of the foreground color histogram; `None` without foreground.
pub fn color_interior_contrast(rgb: &RgbImage, mask: &[bool]) -> Option<f64> {
    mask.iter()
        .any(|&m| m)
        .then(|| entropy(&normalize(&color_histogram(rgb, mask, true))))
}

pub fn depth_interior_contrast(depth: &GrayImage, mask: &[bool]) -> Option<f64> {
    mask.iter()
        .any(|&m| m)
        .then(|| entropy(&normalize(&depth_histogram(depth, mask, true))))
}

/// Foreground fraction.
pub fn object_size(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64
}

pub fn mask_of(gt: &GrayImage) -> Vec<bool> {
    gt.data.iter().map(|&v| v >= 128).collect()
}

/// Mean of the masks resized to 256×256, scaled so the peak is 1.
pub fn average_annotation_map(gts: &[GrayImage]) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(Error::Data("average annotation map needs at least one mask".into()));
    }
    let mut acc = vec![0.0; AAM_SIZE * AAM_SIZE];
    for gt in gts {
        let plane: Vec<f64> = gt.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
        let r = resize_bilinear_plane(&plane, gt.height, gt.width, AAM_SIZE, AAM_SIZE);
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for a in &mut acc {
            *a /= peak;
        }
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Root mean square residual.
    pub rms: f64,
}

fn gaussian_cost(map: &[f64], w: usize, p: &Vector5<f64>) -> f64 {
    let (a, mx, my, sx, sy) = (p[0], p[1], p[2], p[3], p[4]);
    map.iter()
        .enumerate()
        .map(|(i, &t)| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let g = a * (-(x - mx).powi(2) / (2.0 * sx * sx) - (y - my).powi(2) / (2.0 * sy * sy)).exp();
            (g - t).powi(2)
        })
        .sum()
}

/// Least-squares fit of `A·exp(−(x−μx)²/2σx² − (y−μy)²/2σy²)` by
/// Gauss–Newton with step halving. Starts at the map center, σ = 64 and
/// the map maximum.
pub fn fit_gaussian(map: &[f64], w: usize, h: usize) -> Result<GaussianFit> {
    if map.len() != w * h || map.is_empty() {
        return Err(Error::Data("gaussian fit: map size mismatch".into()));
    }
    let peak = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = Vector5::new(peak, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, 64.0, 64.0);
    let mut cost = gaussian_cost(map, w, &p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERS {
        iterations += 1;
        let (a, mx, my, sx, sy) = (p[0], p[1], p[2], p[3], p[4]);
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (i, &t) in map.iter().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (dx, dy) = (x - mx, y - my);
            let e = (-dx * dx / (2.0 * sx * sx) - dy * dy / (2.0 * sy * sy)).exp();
            let g = a * e;
            let j = Vector5::new(
                e,
                g * dx / (sx * sx),
                g * dy / (sy * sy),
                g * dx * dx / (sx * sx * sx),
                g * dy * dy / (sy * sy * sy),
            );
            jtj += j * j.transpose();
            jtr += j * (g - t);
        }
        let damping = 1e-12 * jtj.diagonal().max().max(1e-300);
        let delta = match (jtj + Matrix5::identity() * damping).lu().solve(&(-jtr)) {
            Some(d) => d,
            None => break,
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = p + delta * step;
            if cand[3] > 0.0 && cand[4] > 0.0 {
                let c = gaussian_cost(map, w, &cand);
                if c <= cost {
                    accepted = Some((cand, c));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            // no descent along the Gauss–Newton direction: at a minimum
            converged = true;
            break;
        };
        let moved = (cand - p).norm();
        let improvement = cost - c;
        p = cand;
        cost = c;
        if moved <= 1e-10 * (1.0 + p.norm()) || improvement <= 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
    }
    Ok(GaussianFit {
        amplitude: p[0],
        mu_x: p[1],
        mu_y: p[2],
        sigma_x: p[3].abs(),
        sigma_y: p[4].abs(),
        iterations,
        converged,
        rms: (cost / map.len() as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterBias {
    /// 256×256, peak 1.
    pub aam: Vec<f64>,
    pub fit: GaussianFit,
    pub mu_offset_x: f64,
    pub mu_offset_y: f64,
    pub cbi: f64,
}

pub fn center_bias(gts: &[GrayImage]) -> Result<CenterBias> {
    let aam = average_annotation_map(gts)?;
    let fit = fit_gaussian(&aam, AAM_SIZE, AAM_SIZE)?;
    let c = (AAM_SIZE as f64 - 1.0) / 2.0;
    Ok(CenterBias {
        mu_offset_x: fit.mu_x - c,
        mu_offset_y: fit.mu_y - c,
        cbi: (fit.sigma_x + fit.sigma_y) / 2.0,
        fit,
        aam,
    })
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y, x - 1) - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Pixels whose magnitude is positive and at least `threshold · max`.
pub fn edge_map(mag: &[f64], threshold: f64) -> Vec<bool> {
    let max = mag.iter().copied().fold(0.0, f64::max);
    mag.iter().map(|&m| m > 0.0 && m >= threshold * max).collect()
}

/// Fraction of depth-edge pixels with no texture edge within Chebyshev
/// distance `radius`; `None` when there are no depth edges.
pub fn bad_point_rate(depth_edges: &[bool], texture_edges: &[bool], w: usize, h: usize, radius: usize) -> Option<f64> {
    let mut total = 0usize;
    let mut bad = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !depth_edges[y * w + x] {
                continue;
            }
            total += 1;
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let matched = (y0..=y1).any(|yy| (x0..=x1).any(|xx| texture_edges[yy * w + xx]));
            if !matched {
                bad += 1;
            }
        }
    }
    (total > 0).then(|| bad as f64 / total as f64)
}

pub fn luma(rgb: &RgbImage) -> Vec<f64> {
    rgb.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthQuality {
    pub dq: f64,
    /// No depth edges were found; `dq` is 1 by convention.
    pub degenerate: bool,
}

/// `1 − BPR` between Sobel edges of the depth map and of the image luma.
pub fn depth_quality(rgb: &RgbImage, depth: &GrayImage, edge_threshold: f64, radius: usize) -> Result<DepthQuality> {
    let (w, h) = (rgb.width, rgb.height);
    if (depth.width, depth.height) != (w, h) {
        return Err(Error::Data("depth_quality: rgb and depth sizes differ".into()));
    }
    let texture = edge_map(&sobel_magnitude(&luma(rgb), w, h), edge_threshold);
    let d: Vec<f64> = depth.data.iter().map(|&v| v as f64).collect();
    let depth_edges = edge_map(&sobel_magnitude(&d, w, h), edge_threshold);
    Ok(match bad_point_rate(&depth_edges, &texture, w, h, radius) {
        Some(bpr) => DepthQuality {
            dq: 1.0 - bpr,
            degenerate: false,
        },
        None => DepthQuality { dq: 1.0, degenerate: true },
    })
}

/// Per-image statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStats {
    pub name: String,
    pub rgc: Option<f64>,
    pub dgc: Option<f64>,
    pub ric: Option<f64>,
    pub dic: Option<f64>,
    pub os: f64,
    pub dq: DepthQuality,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsOptions {
    pub raw_counts: bool,
    pub edge_threshold: f64,
    pub match_radius: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            raw_counts: false,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

pub fn image_stats(name: &str, rgb: &RgbImage, depth: &GrayImage, gt: &GrayImage, opts: &StatsOptions) -> Result<ImageStats> {
    let size = (rgb.width, rgb.height);
    if (depth.width, depth.height) != size || (gt.width, gt.height) != size {
        return Err(Error::Data(format!("{name}: rgb, depth and gt sizes differ")));
    }
    let mask = mask_of(gt);
    Ok(ImageStats {
        name: name.to_string(),
        rgc: color_contrast(rgb, &mask, opts.raw_counts),
        dgc: depth_contrast(depth, &mask, opts.raw_counts),
        ric: color_interior_contrast(rgb, &mask),
        dic: depth_interior_contrast(depth, &mask),
        os: object_size(&mask),
        dq: depth_quality(rgb, depth, opts.edge_threshold, opts.match_radius)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub dataset: String,
    pub images: Vec<ImageStats>,
    pub rgc: f64,
    pub dgc: f64,
    pub ric: f64,
    pub dic: f64,
    pub center: CenterBias,
    pub os: f64,
    pub dq: f64,
    /// Images without both foreground and background.
    pub undefined_contrast: usize,
    pub undefined_interior: usize,
    pub degenerate_dq: usize,
}

fn defined_mean(v: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let (mut s, mut n, mut missing) = (0.0, 0usize, 0usize);
    for x in v {
        match x {
            Some(x) => {
                s += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    (if n == 0 { f64::NAN } else { s / n as f64 }, missing)
}

impl StatsReport {
    pub fn new(dataset: &str, images: Vec<ImageStats>, gts: &[GrayImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data(format!("{dataset}: no images")));
        }
        let n = images.len() as f64;
        let (rgc, undefined_contrast) = defined_mean(images.iter().map(|s| s.rgc));
        let (dgc, _) = defined_mean(images.iter().map(|s| s.dgc));
        let (ric, undefined_interior) = defined_mean(images.iter().map(|s| s.ric));
        let (dic, _) = defined_mean(images.iter().map(|s| s.dic));
        Ok(Self {
            dataset: dataset.to_string(),
            rgc,
            dgc,
            ric,
            dic,
            center: center_bias(gts)?,
            os: images.iter().map(|s| s.os).sum::<f64>() / n,
            dq: images.iter().map(|s| s.dq.dq).sum::<f64>() / n,
            undefined_contrast,
            undefined_interior,
            degenerate_dq: images.iter().filter(|s| s.dq.degenerate).count(),
            images,
        })
    }

    pub fn table(&self) -> String {
        let c = &self.center;
        format!(
            "dataset, n_images, RGC, DGC, RIC, DIC, CBI, mu_offset_x, mu_offset_y, sigma_x, sigma_y, OS, DQ\n\
             {}, {}, {:.4}, {:.4}, {:.4}, {:.4}, {:.2}, {:.2}, {:.2}, {:.2}, {:.2}, {:.4}, {:.4}\n\
             # excluded: contrast {}, interior {}; degenerate DQ {}; gaussian fit converged {} after {} iterations\n",
            self.dataset,
            self.images.len(),
            self.rgc,
            self.dgc,
            self.ric,
            self.dic,
            c.cbi,
            c.mu_offset_x,
            c.mu_offset_y,
            c.fit.sigma_x,
            c.fit.sigma_y,
            self.os,
            self.dq,
            self.undefined_contrast,
            self.undefined_interior,
            self.degenerate_dq,
            c.fit.converged,
            c.fit.iterations,
        )
    }
}
