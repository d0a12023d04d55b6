//! Straight-line reference implementations used as test oracles.
//!
//! Nothing here touches the tape or the library's kernels: every quantity is
//! computed with explicit nested loops straight from its definition.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smac_core::attention::{NlParams, SelectiveHeadParams};
use smac_core::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Linear};
use smac_core::{ParamStore, Tensor};

pub const BN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------- dense ops

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Zero-padded cross-correlation, `out = ⌈in / stride⌉`, with the padding
/// split so the extra pixel (if any) goes to the bottom/right.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, dilation: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (o, ci, k, _) = dims4(w);
    assert_eq!(c, ci);
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let span = dilation * (k - 1) + 1;
    let pad_t = ((oh - 1) * stride + span).saturating_sub(h) / 2;
    let pad_l = ((ow - 1) * stride + span).saturating_sub(wd) / 2;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for i in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky * dilation) as isize - pad_t as isize;
                                let ix = (xx * stride + kx * dilation) as isize - pad_l as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.at(&[oc, ic, ky, kx]) * x.at(&[i, ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[i, oc, y, xx], s);
                }
            }
        }
    }
    out
}

fn pool(x: &Tensor, k: usize, s: usize, reduce: impl Fn(&[f64]) -> f64) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut window = Vec::with_capacity(k * k);
                    for dy in 0..k {
                        for dx in 0..k {
                            window.push(x.at(&[i, ch, y * s + dy, xx * s + dx]));
                        }
                    }
                    out.set(&[i, ch, y, xx], reduce(&window));
                }
            }
        }
    }
    out
}

pub fn max_pool(x: &Tensor, k: usize, s: usize) -> Tensor {
    pool(x, k, s, |v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

pub fn avg_pool(x: &Tensor, k: usize, s: usize) -> Tensor {
    pool(x, k, s, |v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    for i in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(&[i, ch, y, xx]);
                }
            }
            out.set(&[i, ch, 0, 0], s / (h * w) as f64);
        }
    }
    out
}

/// Half-pixel bilinear resampling (corners not aligned, edges clamped).
pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let tap = |o: usize, inp: usize, out: usize| {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), src - i0 as f64)
    };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = tap(y, h, oh);
                for xx in 0..ow {
                    let (x0, x1, fx) = tap(xx, w, ow);
                    let v = |yy: usize, xq: usize| x.at(&[i, ch, yy, xq]);
                    let top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x1);
                    let bot = (1.0 - fx) * v(y1, x0) + fx * v(y1, x1);
                    out.set(&[i, ch, y, xx], (1.0 - fy) * top + fy * bot);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-channel normalization with the given statistics, or with the batch
/// statistics (biased variance) when `stats` is `None`.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: Option<(&Tensor, &Tensor)>) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m.data()[ch], v.data()[ch]),
            None => {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|i| (0..h).flat_map(move |y| (0..w).map(move |xx| (i, y, xx))))
                    .map(|(i, y, xx)| x.at(&[i, ch, y, xx]))
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            }
        };
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = (x.at(&[i, ch, y, xx]) - mean) / (var + BN_EPS).sqrt();
                    out.set(&[i, ch, y, xx], gamma.data()[ch] * v + beta.data()[ch]);
                }
            }
        }
    }
    out
}

pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = dims4(parts[0]);
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.shape()[1] {
                for y in 0..h {
                    for xx in 0..w {
                        out.set(&[i, base + ch, y, xx], p.at(&[i, ch, y, xx]));
                    }
                }
            }
            base += p.shape()[1];
        }
    }
    out
}

// ------------------------------------------------------------------ layers

fn value(store: &ParamStore, id: smac_core::ParamId) -> Tensor {
    store.get(id).value.clone()
}

pub fn conv_layer(store: &ParamStore, l: &Conv2d, x: &Tensor) -> Tensor {
    let b = l.bias.map(|b| value(store, b));
    conv2d(x, &value(store, l.weight), b.as_ref(), l.stride, l.dilation)
}

pub fn bn_layer(store: &ParamStore, l: &BatchNorm2d, x: &Tensor, train: bool) -> Tensor {
    let (g, b) = (value(store, l.gamma), value(store, l.beta));
    if train {
        batch_norm(x, &g, &b, None)
    } else {
        let m = store.buffer(l.running_mean).value.clone();
        let v = store.buffer(l.running_var).value.clone();
        batch_norm(x, &g, &b, Some((&m, &v)))
    }
}

pub fn conv_bn_relu(store: &ParamStore, l: &ConvBnRelu, x: &Tensor, train: bool) -> Tensor {
    relu(&bn_layer(store, &l.bn, &conv_layer(store, &l.conv, x), train))
}

/// `x·W + b` on `[n, in]` rows.
pub fn linear(store: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    let y = matmul(x, &value(store, l.weight));
    let b = value(store, l.bias);
    Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % l.out_features])
}

/// α for every image of the batch.
pub fn selective_alpha(store: &ParamStore, p: &SelectiveHeadParams, x_r: &Tensor, x_d: &Tensor, train: bool) -> Vec<f64> {
    let est = conv_bn_relu(store, &p.est1, x_r, train);
    let est = conv_layer(store, &p.est2, &est);
    let err = Tensor::from_fn(x_d.shape(), |i| x_d.data()[i] - est.data()[i]);
    let d = conv_bn_relu(store, &p.down1, &err, train);
    let d = conv_bn_relu(store, &p.down2, &d, train);
    let n = d.shape()[0];
    let flat = d.reshape(&[n, d.numel() / n]).unwrap();
    let hid = relu(&linear(store, &p.fc1, &flat));
    let logit = linear(store, &p.fc2, &hid);
    logit.data().iter().map(|&v| sigmoid(v)).collect()
}

// --------------------------------------------------------------- attention

/// Projection weights of one non-local branch as plain tensors.
pub struct NlWeights {
    pub theta: Tensor,
    pub phi: Tensor,
    pub g: Tensor,
    pub z: Tensor,
}

impl NlWeights {
    pub fn read(store: &ParamStore, p: &NlParams) -> Self {
        Self {
            theta: value(store, p.theta),
            phi: value(store, p.phi),
            g: value(store, p.g),
            z: value(store, p.z),
        }
    }
}

type Rows = Vec<Vec<f64>>;

/// `[hw][c]` features of image `i`, positions in row-major order.
fn positions(x: &Tensor, i: usize) -> Rows {
    let (_, c, h, w) = dims4(x);
    (0..h * w)
        .map(|p| (0..c).map(|ch| x.at(&[i, ch, p / w, p % w])).collect())
        .collect()
}

/// `rows · W` with `W` a `[c, k]` tensor.
fn project(rows: &Rows, w: &Tensor) -> Rows {
    let (c, k) = (w.shape()[0], w.shape()[1]);
    rows.iter()
        .map(|r| (0..k).map(|j| (0..c).map(|t| r[t] * w.at(&[t, j])).sum()).collect())
        .collect()
}

/// `f_ij = <θ_i, φ_j>`
pub fn affinity(theta: &Rows, phi: &Rows) -> Rows {
    theta
        .iter()
        .map(|t| phi.iter().map(|p| t.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

/// `Y_i = Σ_j A_ij · g_j`
fn aggregate(a: &Rows, g: &Rows) -> Rows {
    let k = g[0].len();
    a.iter()
        .map(|row| (0..k).map(|t| row.iter().zip(g).map(|(aij, gj)| aij * gj[t]).sum()).collect())
        .collect()
}

pub fn contrast(f: &Rows, t: f64) -> Rows {
    f.iter()
        .map(|row| softmax(&row.iter().map(|v| -v / t).collect::<Vec<_>>()))
        .collect()
}

fn attend(f: &Rows) -> Rows {
    f.iter().map(|r| softmax(r)).collect()
}

/// 2×2 max pooling of `[hw][k]` position features on an `h × w` grid.
fn pool_positions(rows: &Rows, h: usize, w: usize) -> Rows {
    let k = rows[0].len();
    let mut out = Vec::with_capacity(h * w / 4);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            out.push(
                (0..k)
                    .map(|t| {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(rows[(2 * y + dy) * w + 2 * x + dx][t]);
                            }
                        }
                        m
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Writes `[hw][c]` rows back into image `i` of `out`, adding `scale·rows`
/// to the existing values.
fn add_positions(out: &mut Tensor, i: usize, rows: &Rows, scale: f64) {
    let (_, c, _, w) = dims4(out);
    for (p, r) in rows.iter().enumerate() {
        for ch in 0..c {
            let idx = [i, ch, p / w, p % w];
            out.set(&idx, out.at(&idx) + scale * r[ch]);
        }
    }
}

fn sub_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect()
}

/// Non-local block and its attention matrices.
pub fn nl_block(x: &Tensor, p: &NlWeights) -> (Tensor, Vec<Rows>) {
    let n = x.shape()[0];
    let mut z = x.clone();
    let mut maps = Vec::new();
    for i in 0..n {
        let pos = positions(x, i);
        let a = attend(&affinity(&project(&pos, &p.theta), &project(&pos, &p.phi)));
        let y = aggregate(&a, &project(&pos, &p.g));
        add_positions(&mut z, i, &project(&y, &p.z), 1.0);
        maps.push(a);
    }
    (z, maps)
}

/// Pre-residual attentive feature `A·g` of the non-local block, `[n, k, h, w]`.
pub fn nl_attentive(x: &Tensor, p: &NlWeights) -> Tensor {
    let (n, _, h, w) = dims4(x);
    let k = p.g.shape()[1];
    let mut out = Tensor::zeros(&[n, k, h, w]);
    for i in 0..n {
        let pos = positions(x, i);
        let a = attend(&affinity(&project(&pos, &p.theta), &project(&pos, &p.phi)));
        add_positions(&mut out, i, &aggregate(&a, &project(&pos, &p.g)), 1.0);
    }
    out
}

/// `Y_r = A_d·g_r(X_r)`, `Y_d = A_r·g_d(X_d)`, both `[n, k, h, w]`.
pub fn mutual(x_r: &Tensor, x_d: &Tensor, r: &NlWeights, d: &NlWeights) -> (Tensor, Tensor) {
    let (n, _, h, w) = dims4(x_r);
    let k = r.g.shape()[1];
    let (mut y_r, mut y_d) = (Tensor::zeros(&[n, k, h, w]), Tensor::zeros(&[n, k, h, w]));
    for i in 0..n {
        let (pr, pd) = (positions(x_r, i), positions(x_d, i));
        let a_r = attend(&affinity(&project(&pr, &r.theta), &project(&pr, &r.phi)));
        let a_d = attend(&affinity(&project(&pd, &d.theta), &project(&pd, &d.phi)));
        add_positions(&mut y_r, i, &aggregate(&a_d, &project(&pr, &r.g)), 1.0);
        add_positions(&mut y_d, i, &aggregate(&a_r, &project(&pd, &d.g)), 1.0);
    }
    (y_r, y_d)
}

/// Mutual attention minus contrast on both streams; `alpha[i]` scales the
/// RGB residual of image `i` when given.
#[allow(clippy::too_many_arguments)]
pub fn mac(
    x_r: &Tensor,
    x_d: &Tensor,
    r: &NlWeights,
    d: &NlWeights,
    wc_r: &Tensor,
    wc_d: &Tensor,
    t: f64,
    alpha: Option<&[f64]>,
) -> (Tensor, Tensor) {
    let n = x_r.shape()[0];
    let (mut z_r, mut z_d) = (x_r.clone(), x_d.clone());
    for i in 0..n {
        let (pr, pd) = (positions(x_r, i), positions(x_d, i));
        let f_r = affinity(&project(&pr, &r.theta), &project(&pr, &r.phi));
        let f_d = affinity(&project(&pd, &d.theta), &project(&pd, &d.phi));
        let (a_r, a_d) = (attend(&f_r), attend(&f_d));
        let (c_r, c_d) = (contrast(&f_r, t), contrast(&f_d, t));
        let (g_r, g_d) = (project(&pr, &r.g), project(&pd, &d.g));
        let res_r = sub_rows(&project(&aggregate(&a_d, &g_r), &r.z), &project(&aggregate(&c_d, &g_r), wc_r));
        let res_d = sub_rows(&project(&aggregate(&a_r, &g_d), &d.z), &project(&aggregate(&c_r, &g_d), wc_d));
        add_positions(&mut z_r, i, &res_r, alpha.map_or(1.0, |a| a[i]));
        add_positions(&mut z_d, i, &res_d, 1.0);
    }
    (z_r, z_d)
}

/// Mutual attention without contrast, keys and values optionally pooled 2×.
pub fn sma(x_r: &Tensor, x_d: &Tensor, r: &NlWeights, d: &NlWeights, alpha: &[f64], pool: bool) -> (Tensor, Tensor) {
    let (n, _, h, w) = dims4(x_r);
    let kv = |rows: Rows| if pool { pool_positions(&rows, h, w) } else { rows };
    let (mut z_r, mut z_d) = (x_r.clone(), x_d.clone());
    for i in 0..n {
        let (pr, pd) = (positions(x_r, i), positions(x_d, i));
        let a_r = attend(&affinity(&project(&pr, &r.theta), &kv(project(&pr, &r.phi))));
        let a_d = attend(&affinity(&project(&pd, &d.theta), &kv(project(&pd, &d.phi))));
        let (g_r, g_d) = (kv(project(&pr, &r.g)), kv(project(&pd, &d.g)));
        add_positions(&mut z_r, i, &project(&aggregate(&a_d, &g_r), &r.z), alpha[i]);
        add_positions(&mut z_d, i, &project(&aggregate(&a_r, &g_d), &d.z), 1.0);
    }
    (z_r, z_d)
}
