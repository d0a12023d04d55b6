//! Preprocessing, augmentation and SGD with momentum.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, DatasetEntry, DatasetLayout, GrayImage, RgbImage};
use crate::kernels::{resize_bilinear_plane, resize_nearest_plane};
use crate::network::{self, NetworkConfig, TwoStreamState};
use crate::nn::{Ctx, Mode};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch: usize,
    pub total_iters: usize,
    /// Fractions of `total_iters` at which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    /// Images are resized to `crop_from · input_size` before cropping.
    pub crop_from: f64,
    pub hflip_prob: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch: 12,
            total_iters: 40000,
            decay_points: vec![0.5, 0.75],
            decay_factor: 0.1,
            crop_from: 9.0 / 8.0,
            hflip_prob: 0.5,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch: 4,
            total_iters: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 || self.total_iters == 0 {
            return bad("batch and total_iters must be positive".into());
        }
        let mut last = 0.0;
        for &d in &self.decay_points {
            if !(d > last && d < 1.0) {
                return bad(format!(
                    "decay_points must be strictly increasing in (0, 1), got {:?}",
                    self.decay_points
                ));
            }
            last = d;
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if !(self.crop_from.is_finite() && self.crop_from >= 1.0) {
            return bad(format!("crop_from must be at least 1, got {}", self.crop_from));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `lr0 · decay_factor^k` where `k` counts
/// the decay points already reached.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg
        .decay_points
        .iter()
        .filter(|&&d| iter >= (d * cfg.total_iters as f64).round() as usize)
        .count();
    let mut lr = cfg.lr0;
    for _ in 0..k {
        lr *= cfg.decay_factor;
    }
    lr
}

/// One training image with its depth map and binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: RgbImage,
    pub depth: GrayImage,
    pub gt: GrayImage,
}

impl Sample {
    pub fn new(rgb: RgbImage, depth: GrayImage, gt: GrayImage) -> Result<Self> {
        let size = (rgb.width, rgb.height);
        if (depth.width, depth.height) != size || (gt.width, gt.height) != size {
            return Err(Error::Data(format!(
                "plane sizes differ: rgb {}x{}, depth {}x{}, gt {}x{}",
                rgb.width, rgb.height, depth.width, depth.height, gt.width, gt.height
            )));
        }
        Ok(Self { rgb, depth, gt })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Reads one dataset entry; the entry must have a ground truth.
    pub fn load(entry: &DatasetEntry) -> Result<Self> {
        let gt = entry
            .gt
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no ground truth", entry.stem)))?;
        let s = Self::new(io::load_rgb(&entry.rgb)?, io::load_gray(&entry.depth)?, io::load_gray(gt)?);
        s.map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", entry.stem)),
            other => other,
        })
    }
}

/// Every sample of a dataset directory, in stem order.
pub fn load_samples(root: &Path) -> Result<Vec<Sample>> {
    DatasetLayout::open(root, true)?.entries.iter().map(Sample::load).collect()
}

fn resize_u8_bilinear(src: &[u8], w: usize, h: usize, ow: usize, oh: usize) -> Vec<u8> {
    let f: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    resize_bilinear_plane(&f, h, w, oh, ow)
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn resize_rgb(img: &RgbImage, ow: usize, oh: usize) -> RgbImage {
    if (img.width, img.height) == (ow, oh) {
        return img.clone();
    }
    let planes: Vec<Vec<u8>> = (0..3)
        .map(|c| resize_u8_bilinear(&img.channel(c), img.width, img.height, ow, oh))
        .collect();
    let data = (0..ow * oh).flat_map(|i| [planes[0][i], planes[1][i], planes[2][i]]).collect();
    RgbImage {
        width: ow,
        height: oh,
        data,
    }
}

fn resize_gray(img: &GrayImage, ow: usize, oh: usize, nearest: bool) -> GrayImage {
    if (img.width, img.height) == (ow, oh) {
        return img.clone();
    }
    let data = if nearest {
        resize_nearest_plane(&img.data, img.height, img.width, oh, ow)
    } else {
        resize_u8_bilinear(&img.data, img.width, img.height, ow, oh)
    };
    GrayImage {
        width: ow,
        height: oh,
        data,
    }
}

/// Resizes all planes to `size × size` (nearest for the mask).
pub fn resize_sample(s: &Sample, size: usize) -> Sample {
    Sample {
        rgb: resize_rgb(&s.rgb, size, size),
        depth: resize_gray(&s.depth, size, size, false),
        gt: resize_gray(&s.gt, size, size, true),
    }
}

fn crop_gray(img: &GrayImage, x0: usize, y0: usize, size: usize) -> GrayImage {
    let data = (y0..y0 + size)
        .flat_map(|y| img.data[y * img.width + x0..y * img.width + x0 + size].iter().copied())
        .collect();
    GrayImage {
        width: size,
        height: size,
        data,
    }
}

fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, size: usize) -> RgbImage {
    let row = |y: usize| &img.data[3 * (y * img.width + x0)..3 * (y * img.width + x0 + size)];
    let data = (y0..y0 + size).flat_map(|y| row(y).iter().copied()).collect();
    RgbImage {
        width: size,
        height: size,
        data,
    }
}

/// Mirrors every plane left to right.
pub fn hflip(s: &Sample) -> Sample {
    let flip = |data: &[u8], w: usize, ch: usize| -> Vec<u8> {
        data.chunks(w * ch)
            .flat_map(|row| row.chunks(ch).rev().flatten().copied().collect::<Vec<_>>())
            .collect()
    };
    Sample {
        rgb: RgbImage {
            data: flip(&s.rgb.data, s.rgb.width, 3),
            ..s.rgb.clone()
        },
        depth: GrayImage {
            data: flip(&s.depth.data, s.depth.width, 1),
            ..s.depth.clone()
        },
        gt: GrayImage {
            data: flip(&s.gt.data, s.gt.width, 1),
            ..s.gt.clone()
        },
    }
}

/// Upper-left corner of a random crop and whether to flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub resized: usize,
    pub x0: usize,
    pub y0: usize,
    pub flip: bool,
}

pub fn draw_augment<R: Rng + ?Sized>(size: usize, cfg: &TrainConfig, rng: &mut R) -> AugmentDraw {
    let resized = ((size as f64) * cfg.crop_from).round().max(size as f64) as usize;
    let span = resized - size;
    AugmentDraw {
        resized,
        x0: rng.gen_range(0..=span),
        y0: rng.gen_range(0..=span),
        flip: rng.gen_bool(cfg.hflip_prob),
    }
}

pub fn apply_augment(s: &Sample, size: usize, d: AugmentDraw) -> Sample {
    let big = resize_sample(s, d.resized);
    let cropped = Sample {
        rgb: crop_rgb(&big.rgb, d.x0, d.y0, size),
        depth: crop_gray(&big.depth, d.x0, d.y0, size),
        gt: crop_gray(&big.gt, d.x0, d.y0, size),
    };
    if d.flip {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Resize to `crop_from · size`, random `size × size` crop, random
/// horizontal flip; the same geometry is applied to all three planes.
pub fn augment<R: Rng + ?Sized>(s: &Sample, size: usize, cfg: &TrainConfig, rng: &mut R) -> Sample {
    let d = draw_augment(size, cfg, rng);
    apply_augment(s, size, d)
}

/// Network inputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `[3, h, w]`, per-channel mean removed.
    pub rgb: Tensor,
    /// `[3, h, w]`, the normalized depth replicated, mean removed.
    pub depth: Tensor,
    /// `[1, h, w]` in {0, 1}.
    pub gt: Tensor,
}

/// Depth rescaled to [0, 255] (constant maps become 128), optionally
/// inverted first so that near is small.
pub fn normalize_depth(depth: &[u8], invert: bool) -> Vec<f64> {
    let d: Vec<f64> = depth.iter().map(|&v| if invert { 255.0 - v as f64 } else { v as f64 }).collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![128.0; d.len()];
    }
    d.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
}

fn centered(plane: Vec<f64>) -> Vec<f64> {
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    plane.into_iter().map(|v| v - mean).collect()
}

pub fn preprocess_inputs(rgb: &RgbImage, depth: &GrayImage, invert_depth: bool) -> Result<(Tensor, Tensor)> {
    let (w, h) = (rgb.width, rgb.height);
    if (depth.width, depth.height) != (w, h) {
        return Err(Error::Data(format!("rgb is {w}x{h} but depth is {}x{}", depth.width, depth.height)));
    }
    let mut r = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        r.extend(centered(rgb.channel(c).into_iter().map(f64::from).collect()));
    }
    let dplane = centered(normalize_depth(&depth.data, invert_depth));
    let mut d = Vec::with_capacity(3 * w * h);
    for _ in 0..3 {
        d.extend_from_slice(&dplane);
    }
    Ok((Tensor::new(&[3, h, w], r)?, Tensor::new(&[3, h, w], d)?))
}

pub fn binarize_gt(gt: &GrayImage) -> Tensor {
    Tensor::from_fn(&[1, gt.height, gt.width], |i| if gt.data[i] >= 128 { 1.0 } else { 0.0 })
}

pub fn preprocess(s: &Sample, invert_depth: bool) -> Result<Prepared> {
    let (rgb, depth) = preprocess_inputs(&s.rgb, &s.depth, invert_depth)?;
    if (s.gt.width, s.gt.height) != (s.width(), s.height()) {
        return Err(Error::Data("ground truth size differs from the image".into()));
    }
    Ok(Prepared {
        rgb,
        depth,
        gt: binarize_gt(&s.gt),
    })
}

/// Stacks `[c, h, w]` tensors into `[n, c, h, w]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// `v ← momentum·v + grad + wd·value; value ← value − lr·v`, then clears
/// the gradients.
pub fn sgd_step(store: &mut ParamStore, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {} is not finite", p.name)));
    }
    for p in store.params_mut() {
        let value = p.value.data_mut();
        let v = p.momentum_buf.data_mut();
        for ((w, v), g) in value.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Yields dataset indices batch by batch, reshuffling at each epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Everything a training run produces.
pub struct TrainResult {
    pub net: TwoStreamState,
    pub store: ParamStore,
    pub losses: Vec<f64>,
}

/// Builds a network seeded from `cfg.seed`.
pub fn init_network(net_cfg: &NetworkConfig, seed: u64) -> Result<(TwoStreamState, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = TwoStreamState::new(&mut store, net_cfg.clone(), &mut rng)?;
    Ok((net, store))
}

/// Assembles one training batch.
pub fn make_batch<R: Rng + ?Sized>(
    samples: &[Sample],
    indices: &[usize],
    size: usize,
    cfg: &TrainConfig,
    invert_depth: bool,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let prepared = indices
        .iter()
        .map(|&i| {
            let s = if cfg.augment {
                augment(&samples[i], size, cfg, rng)
            } else {
                resize_sample(&samples[i], size)
            };
            preprocess(&s, invert_depth)
        })
        .collect::<Result<Vec<_>>>()?;
    let rgb = stack(&prepared.iter().map(|p| &p.rgb).collect::<Vec<_>>())?;
    let depth = stack(&prepared.iter().map(|p| &p.depth).collect::<Vec<_>>())?;
    let gt = stack(&prepared.iter().map(|p| &p.gt).collect::<Vec<_>>())?;
    Ok((rgb, depth, gt))
}

/// Runs `cfg.total_iters` SGD iterations over `samples`. `on_iter` sees
/// each iteration's loss.
pub fn train(
    samples: &[Sample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    invert_depth: bool,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<TrainResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (net, mut store) = init_network(net_cfg, cfg.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed);
    let size = net_cfg.input_size;
    let mut losses = Vec::with_capacity(cfg.total_iters);
    for iter in 0..cfg.total_iters {
        let idx = sampler.next_batch(cfg.batch);
        let (rgb, depth, gt) = make_batch(samples, &idx, size, cfg, invert_depth, &mut data_rng)?;
        let loss = {
            let mut ctx = Ctx::new(&mut store, Mode::Train);
            let (r, d) = (ctx.input(rgb), ctx.input(depth));
            let out = net.forward(&mut ctx, r, d, None)?;
            let loss = network::deep_supervised_loss(&mut ctx, &out.preds_r, &out.preds_d, &gt, &net_cfg.loss_weights)?;
            let value = ctx.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at iteration {iter} is {value}")));
            }
            ctx.backward(loss)?;
            value
        };
        sgd_step(&mut store, cfg, lr_schedule(iter, cfg))?;
        losses.push(loss);
        on_iter(iter, loss);
    }
    Ok(TrainResult { net, store, losses })
}

/// `iter,loss` rows, one per iteration, no header.
pub fn format_loss_curve(losses: &[f64]) -> String {
    let mut s = String::with_capacity(losses.len() * 24);
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    std::fs::write(path, format_loss_curve(losses)).map_err(|e| Error::io(path, e))
}

/// Saliency maps for a batch of prepared inputs, evaluated with running
/// batch-norm statistics. Returns one `size × size` map per image.
pub fn infer(net: &TwoStreamState, store: &mut ParamStore, rgb: Tensor, depth: Tensor) -> Result<Vec<Vec<f64>>> {
    let size = net.config.input_size;
    let mut ctx = Ctx::new(store, Mode::Eval);
    let (r, d) = (ctx.input(rgb), ctx.input(depth));
    let out = net.forward(&mut ctx, r, d, None)?;
    let map = network::final_map(&mut ctx, &out, size)?;
    Ok(ctx.value(map).data().chunks(size * size).map(<[f64]>::to_vec).collect())
}
