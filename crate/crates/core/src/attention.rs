//! Cross-modal attention blocks.
//!
//! Feature maps are `[n, c, h, w]`. Every block works image by image: an
//! image's map is flattened to a `[h·w, c]` matrix of position features,
//! attention is computed between positions, and the result is reshaped back
//! and added residually.
//!
//! - [`nl_block`]: non-local self-attention, `Z = X + softmax(θφᵀ)·g·W_z`.
//! - [`mutual_attention`]: each modality aggregates its own values with the
//!   other modality's attention.
//! - [`contrast_attention`]: `softmax(-f / T)` over the affinity `f`.
//! - [`mac_block`]: mutual attention minus contrast, on both streams.
//! - [`selective_alpha`]: image-level weight in (0, 1) for depth-derived cues.
//! - [`smac_block`]: the MAC block with the RGB residual scaled by α.
//! - [`sma_block`]: mutual attention without contrast, optionally with
//!   keys and values max-pooled by 2.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Ctx, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Embedding and output projections of one non-local branch.
///
/// `theta`, `phi`, `g` are `[c, inner]`; `z` is `[inner, c]`.
#[derive(Clone, Debug)]
pub struct NlParams {
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub z: ParamId,
    pub channels: usize,
    pub inner: usize,
}

impl NlParams {
    /// Embeddings are fan-in uniform; `z` starts at zero so the block is an
    /// exact identity at initialization.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            theta: store.add_fan_in(format!("{name}.theta"), &[channels, inner], channels, rng),
            phi: store.add_fan_in(format!("{name}.phi"), &[channels, inner], channels, rng),
            g: store.add_fan_in(format!("{name}.g"), &[channels, inner], channels, rng),
            z: store.add(format!("{name}.z"), Tensor::zeros(&[inner, channels])),
            channels,
            inner,
        }
    }
}

/// Default embedding width: half the input channels (at least one).
pub fn default_inner(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// Mutual attention and contrast parameters for an RGB/depth pair.
#[derive(Clone, Debug)]
pub struct MacParams {
    pub rgb: NlParams,
    pub depth: NlParams,
    /// `[inner, c]` contrast projection for the RGB output.
    pub contrast_rgb: ParamId,
    /// `[inner, c]` contrast projection for the depth output.
    pub contrast_depth: ParamId,
    /// The temperature is `exp(log_temperature)`, so it stays positive.
    pub log_temperature: ParamId,
}

impl MacParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            rgb: NlParams::new(store, &format!("{name}.rgb"), channels, inner, rng),
            depth: NlParams::new(store, &format!("{name}.depth"), channels, inner, rng),
            contrast_rgb: store.add(format!("{name}.contrast_rgb"), Tensor::zeros(&[inner, channels])),
            contrast_depth: store.add(format!("{name}.contrast_depth"), Tensor::zeros(&[inner, channels])),
            log_temperature: store.add(format!("{name}.log_temperature"), Tensor::scalar(0.0)),
        }
    }

    pub fn temperature(&self, store: &ParamStore) -> f64 {
        store.get(self.log_temperature).value.data()[0].exp()
    }

    pub fn channels(&self) -> usize {
        self.rgb.channels
    }
}

/// Mutual attention parameters without the contrast terms.
#[derive(Clone, Debug)]
pub struct SmaParams {
    pub rgb: NlParams,
    pub depth: NlParams,
}

impl SmaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            rgb: NlParams::new(store, &format!("{name}.rgb"), channels, inner, rng),
            depth: NlParams::new(store, &format!("{name}.depth"), channels, inner, rng),
        }
    }
}

/// Widths of the selective-attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadDims {
    pub down1: usize,
    pub down2: usize,
    pub hidden: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        Self {
            down1: 256,
            down2: 128,
            hidden: 256,
        }
    }
}

/// Estimates depth features from RGB features and maps the estimation error
/// to one attention weight per image.
#[derive(Clone, Debug)]
pub struct SelectiveHeadParams {
    pub est1: ConvBnRelu,
    pub est2: Conv2d,
    pub down1: ConvBnRelu,
    pub down2: ConvBnRelu,
    pub fc1: Linear,
    pub fc2: Linear,
    pub height: usize,
    pub width: usize,
}

impl SelectiveHeadParams {
    /// The FC input size depends on the feature map size, fixed here.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        dims: HeadDims,
        rng: &mut R,
    ) -> Result<Self> {
        check_head_size(height, width)?;
        let flat = dims.down2 * height.div_ceil(4) * width.div_ceil(4);
        Ok(Self {
            est1: ConvBnRelu::new(store, &format!("{name}.est1"), channels, channels, 1, 1, 1, rng),
            // No bias: the error map feeds a batch-normalized chain that absorbs it.
            est2: Conv2d::new(store, &format!("{name}.est2"), channels, channels, 1, 1, 1, false, rng),
            down1: ConvBnRelu::new(store, &format!("{name}.down1"), channels, dims.down1, 1, 2, 1, rng),
            down2: ConvBnRelu::new(store, &format!("{name}.down2"), dims.down1, dims.down2, 1, 2, 1, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), flat, dims.hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.hidden, 1, rng),
            height,
            width,
        })
    }
}

fn check_head_size(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 {
        return Err(Error::shape(
            "selective_alpha",
            format!("feature map {h}x{w} is too small for two stride-2 downsamplings (need at least 4x4)"),
        ));
    }
    Ok(())
}

/// Attention matrices of one image. Rows index query positions.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub a_r: Var,
    pub a_d: Var,
    pub c_r: Option<Var>,
    pub c_d: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct NlOutput {
    pub z: Var,
    /// Per-image `[hw, hw]` attention.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MutualOutput {
    /// `[n, inner, h, w]`
    pub y_r: Var,
    pub y_d: Var,
    pub maps: Vec<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct PairOutput {
    pub z_r: Var,
    pub z_d: Var,
    pub maps: Vec<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct SmacOutput {
    pub z_r: Var,
    pub z_d: Var,
    /// `[n, 1]`
    pub alpha: Var,
    pub maps: Vec<AttentionMaps>,
}

/// `[1, c, h, w]` → `[h·w, c]`
pub fn to_positions(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let (_, c, h, w) = ctx.value(x).dims4("to_positions")?;
    let m = ctx.tape.reshape(x, &[c, h * w])?;
    ctx.tape.transpose(m)
}

/// `[h·w, c]` → `[1, c, h, w]`
pub fn from_positions(ctx: &mut Ctx<'_>, m: Var, h: usize, w: usize) -> Result<Var> {
    let (_, c) = ctx.value(m).dims2("from_positions")?;
    let t = ctx.tape.transpose(m)?;
    ctx.tape.reshape(t, &[1, c, h, w])
}

fn check_pair(ctx: &Ctx<'_>, op: &'static str, x_r: Var, x_d: Var) -> Result<(usize, usize, usize, usize)> {
    let dims = ctx.value(x_r).dims4(op)?;
    if ctx.value(x_r).shape() != ctx.value(x_d).shape() {
        return Err(Error::shape(
            op,
            format!("modalities differ: {:?} vs {:?}", ctx.value(x_r).shape(), ctx.value(x_d).shape()),
        ));
    }
    Ok(dims)
}

fn check_params(ctx: &Ctx<'_>, op: &'static str, p: &NlParams, channels: usize) -> Result<()> {
    if p.channels != channels || ctx.store().get(p.theta).value.shape() != [channels, p.inner] {
        return Err(Error::shape(
            op,
            format!("parameters expect {} channels, input has {channels}", p.channels),
        ));
    }
    Ok(())
}

/// Query, key and value embeddings of one image.
struct Embeddings {
    theta: Var,
    phi: Var,
    g: Var,
}

fn embed(ctx: &mut Ctx<'_>, positions: Var, p: &NlParams) -> Result<Embeddings> {
    let (wt, wp, wg) = (ctx.param(p.theta), ctx.param(p.phi), ctx.param(p.g));
    Ok(Embeddings {
        theta: ctx.tape.matmul(positions, wt)?,
        phi: ctx.tape.matmul(positions, wp)?,
        g: ctx.tape.matmul(positions, wg)?,
    })
}

/// Dot-product affinity `θ·φᵀ`.
fn affinity(ctx: &mut Ctx<'_>, theta: Var, phi: Var) -> Result<Var> {
    let phi_t = ctx.tape.transpose(phi)?;
    ctx.tape.matmul(theta, phi_t)
}

/// `softmax(-f / T)` row-wise; `temperature` is a one-element variable.
pub fn contrast_attention(ctx: &mut Ctx<'_>, f: Var, temperature: Var) -> Result<Var> {
    let t = ctx.value(temperature).item()?;
    if t.is_nan() || t <= 0.0 {
        return Err(Error::InvalidArgument(format!("contrast temperature must be positive, got {t}")));
    }
    let scaled = ctx.tape.div_by(f, temperature)?;
    let neg = ctx.tape.scale(scaled, -1.0);
    ctx.tape.softmax_rows(neg)
}

fn temperature(ctx: &mut Ctx<'_>, p: &MacParams) -> Var {
    let raw = ctx.param(p.log_temperature);
    ctx.tape.exp(raw)
}

fn per_image<T>(ctx: &mut Ctx<'_>, n: usize, mut f: impl FnMut(&mut Ctx<'_>, usize) -> Result<T>) -> Result<Vec<T>> {
    (0..n).map(|i| f(ctx, i)).collect()
}

fn stack(ctx: &mut Ctx<'_>, items: &[Var]) -> Result<Var> {
    if items.len() == 1 {
        return Ok(items[0]);
    }
    ctx.tape.concat(items, 0)
}

/// Non-local block `Z = X + softmax(θ(X)·φ(X)ᵀ)·g(X)·W_z`.
pub fn nl_block(ctx: &mut Ctx<'_>, x: Var, p: &NlParams) -> Result<NlOutput> {
    let (n, c, h, w) = ctx.value(x).dims4("nl_block")?;
    check_params(ctx, "nl_block", p, c)?;
    let results = per_image(ctx, n, |ctx, i| {
        let xi = ctx.tape.slice_first(x, i)?;
        let pos = to_positions(ctx, xi)?;
        let e = embed(ctx, pos, p)?;
        let f = affinity(ctx, e.theta, e.phi)?;
        let a = ctx.tape.softmax_rows(f)?;
        let y = ctx.tape.matmul(a, e.g)?;
        let wz = ctx.param(p.z);
        let r = ctx.tape.matmul(y, wz)?;
        let r = from_positions(ctx, r, h, w)?;
        Ok((ctx.tape.add(xi, r)?, a))
    })?;
    let zs: Vec<Var> = results.iter().map(|r| r.0).collect();
    Ok(NlOutput {
        z: stack(ctx, &zs)?,
        attention: results.into_iter().map(|r| r.1).collect(),
    })
}

/// `Y_r = A_d·g_r(X_r)` and `Y_d = A_r·g_d(X_d)`.
pub fn mutual_attention(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, rgb: &NlParams, depth: &NlParams) -> Result<MutualOutput> {
    let (n, c, h, w) = check_pair(ctx, "mutual_attention", x_r, x_d)?;
    check_params(ctx, "mutual_attention", rgb, c)?;
    check_params(ctx, "mutual_attention", depth, c)?;
    let results = per_image(ctx, n, |ctx, i| {
        let xr = ctx.tape.slice_first(x_r, i)?;
        let xd = ctx.tape.slice_first(x_d, i)?;
        let pr = to_positions(ctx, xr)?;
        let pd = to_positions(ctx, xd)?;
        let er = embed(ctx, pr, rgb)?;
        let ed = embed(ctx, pd, depth)?;
        let fr = affinity(ctx, er.theta, er.phi)?;
        let fd = affinity(ctx, ed.theta, ed.phi)?;
        let a_r = ctx.tape.softmax_rows(fr)?;
        let a_d = ctx.tape.softmax_rows(fd)?;
        let yr = ctx.tape.matmul(a_d, er.g)?;
        let yd = ctx.tape.matmul(a_r, ed.g)?;
        let yr = from_positions(ctx, yr, h, w)?;
        let yd = from_positions(ctx, yd, h, w)?;
        Ok((
            yr,
            yd,
            AttentionMaps {
                a_r,
                a_d,
                c_r: None,
                c_d: None,
            },
        ))
    })?;
    let yr: Vec<Var> = results.iter().map(|r| r.0).collect();
    let yd: Vec<Var> = results.iter().map(|r| r.1).collect();
    Ok(MutualOutput {
        y_r: stack(ctx, &yr)?,
        y_d: stack(ctx, &yd)?,
        maps: results.into_iter().map(|r| r.2).collect(),
    })
}

/// MAC for one image; `alpha` scales the RGB residual when given.
fn mac_image(ctx: &mut Ctx<'_>, xr: Var, xd: Var, p: &MacParams, t: Var, alpha: Option<Var>) -> Result<(Var, Var, AttentionMaps)> {
    let (_, _, h, w) = ctx.value(xr).dims4("mac_block")?;
    let pr = to_positions(ctx, xr)?;
    let pd = to_positions(ctx, xd)?;
    let er = embed(ctx, pr, &p.rgb)?;
    let ed = embed(ctx, pd, &p.depth)?;
    let fr = affinity(ctx, er.theta, er.phi)?;
    let fd = affinity(ctx, ed.theta, ed.phi)?;
    let a_r = ctx.tape.softmax_rows(fr)?;
    let a_d = ctx.tape.softmax_rows(fd)?;
    let c_r = contrast_attention(ctx, fr, t)?;
    let c_d = contrast_attention(ctx, fd, t)?;

    let residual = |ctx: &mut Ctx<'_>, a: Var, c: Var, g: Var, wz: ParamId, wc: ParamId| -> Result<Var> {
        let (wz, wc) = (ctx.param(wz), ctx.param(wc));
        let ya = ctx.tape.matmul(a, g)?;
        let ya = ctx.tape.matmul(ya, wz)?;
        let yc = ctx.tape.matmul(c, g)?;
        let yc = ctx.tape.matmul(yc, wc)?;
        let r = ctx.tape.sub(ya, yc)?;
        from_positions(ctx, r, h, w)
    };
    let mut rr = residual(ctx, a_d, c_d, er.g, p.rgb.z, p.contrast_rgb)?;
    if let Some(alpha) = alpha {
        rr = ctx.tape.scale_by(rr, alpha)?;
    }
    let rd = residual(ctx, a_r, c_r, ed.g, p.depth.z, p.contrast_depth)?;
    let zr = ctx.tape.add(xr, rr)?;
    let zd = ctx.tape.add(xd, rd)?;
    Ok((
        zr,
        zd,
        AttentionMaps {
            a_r,
            a_d,
            c_r: Some(c_r),
            c_d: Some(c_d),
        },
    ))
}

fn mac_batch(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &MacParams, alpha: Option<Var>) -> Result<PairOutput> {
    let (n, c, _, _) = check_pair(ctx, "mac_block", x_r, x_d)?;
    check_params(ctx, "mac_block", &p.rgb, c)?;
    check_params(ctx, "mac_block", &p.depth, c)?;
    if let Some(alpha) = alpha {
        if ctx.value(alpha).numel() != n {
            return Err(Error::shape(
                "smac_block",
                format!("expected {n} attention weights, got {:?}", ctx.value(alpha).shape()),
            ));
        }
    }
    let t = temperature(ctx, p);
    let results = per_image(ctx, n, |ctx, i| {
        let xr = ctx.tape.slice_first(x_r, i)?;
        let xd = ctx.tape.slice_first(x_d, i)?;
        let a = match alpha {
            Some(alpha) => Some(ctx.tape.slice_first(alpha, i)?),
            None => None,
        };
        mac_image(ctx, xr, xd, p, t, a)
    })?;
    let zr: Vec<Var> = results.iter().map(|r| r.0).collect();
    let zd: Vec<Var> = results.iter().map(|r| r.1).collect();
    Ok(PairOutput {
        z_r: stack(ctx, &zr)?,
        z_d: stack(ctx, &zd)?,
        maps: results.into_iter().map(|r| r.2).collect(),
    })
}

/// `Z_r = X_r + A_d·g_r·W_z^r − C_d·g_r·W_c^r` and the symmetric `Z_d`.
pub fn mac_block(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &MacParams) -> Result<PairOutput> {
    mac_batch(ctx, x_r, x_d, p, None)
}

/// Image-level selective attention `α = sigmoid(FC(Conv(X_d − Conv(X_r))))`,
/// shaped `[n, 1]`.
pub fn selective_alpha(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &SelectiveHeadParams) -> Result<Var> {
    let (n, _, h, w) = check_pair(ctx, "selective_alpha", x_r, x_d)?;
    check_head_size(h, w)?;
    if (h, w) != (p.height, p.width) {
        return Err(Error::shape(
            "selective_alpha",
            format!("head built for {}x{}, input is {h}x{w}", p.height, p.width),
        ));
    }
    let est = p.est1.forward(ctx, x_r)?;
    let est = p.est2.forward(ctx, est)?;
    let err = ctx.tape.sub(x_d, est)?;
    let d = p.down1.forward(ctx, err)?;
    let d = p.down2.forward(ctx, d)?;
    let flat = ctx.value(d).numel() / n;
    let d = ctx.tape.reshape(d, &[n, flat])?;
    let hid = p.fc1.forward(ctx, d)?;
    let hid = ctx.tape.relu(hid);
    let logit = p.fc2.forward(ctx, hid)?;
    Ok(ctx.tape.sigmoid(logit))
}

/// SMAC with a given `[n, 1]` (or `[n]`) α.
pub fn smac_block_with_alpha(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &MacParams, alpha: Var) -> Result<SmacOutput> {
    let out = mac_batch(ctx, x_r, x_d, p, Some(alpha))?;
    Ok(SmacOutput {
        z_r: out.z_r,
        z_d: out.z_d,
        alpha,
        maps: out.maps,
    })
}

/// `Z_r = X_r + α·(A_d·g_r·W_z^r − C_d·g_r·W_c^r)`; `Z_d` as in [`mac_block`].
pub fn smac_block(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &MacParams, head: &SelectiveHeadParams) -> Result<SmacOutput> {
    let alpha = selective_alpha(ctx, x_r, x_d, head)?;
    smac_block_with_alpha(ctx, x_r, x_d, p, alpha)
}

/// Keys (`φ`) or values (`g`) of one image, max-pooled 2× when requested.
fn kv_positions(ctx: &mut Ctx<'_>, m: Var, h: usize, w: usize, downsample: bool) -> Result<Var> {
    if !downsample {
        return Ok(m);
    }
    let f = from_positions(ctx, m, h, w)?;
    let pooled = ctx.tape.max_pool(f, 2, 2)?;
    to_positions(ctx, pooled)
}

/// Selective mutual attention without contrast:
/// `Z_r = X_r + α·A_d·g_r·W_z^r`, `Z_d = X_d + A_r·g_d·W_z^d`.
///
/// With `downsample_kv`, key and value maps are max-pooled 2× so each
/// attention matrix is `[h·w, h·w/4]`.
pub fn sma_block(ctx: &mut Ctx<'_>, x_r: Var, x_d: Var, p: &SmaParams, alpha: Var, downsample_kv: bool) -> Result<PairOutput> {
    let (n, c, h, w) = check_pair(ctx, "sma_block", x_r, x_d)?;
    check_params(ctx, "sma_block", &p.rgb, c)?;
    check_params(ctx, "sma_block", &p.depth, c)?;
    if downsample_kv && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::shape(
            "sma_block",
            format!("key/value downsampling needs even spatial size, got {h}x{w}"),
        ));
    }
    if ctx.value(alpha).numel() != n {
        return Err(Error::shape(
            "sma_block",
            format!("expected {n} attention weights, got {:?}", ctx.value(alpha).shape()),
        ));
    }
    let results = per_image(ctx, n, |ctx, i| {
        let xr = ctx.tape.slice_first(x_r, i)?;
        let xd = ctx.tape.slice_first(x_d, i)?;
        let ai = ctx.tape.slice_first(alpha, i)?;
        let pr = to_positions(ctx, xr)?;
        let pd = to_positions(ctx, xd)?;
        let er = embed(ctx, pr, &p.rgb)?;
        let ed = embed(ctx, pd, &p.depth)?;
        let phi_r = kv_positions(ctx, er.phi, h, w, downsample_kv)?;
        let phi_d = kv_positions(ctx, ed.phi, h, w, downsample_kv)?;
        let g_r = kv_positions(ctx, er.g, h, w, downsample_kv)?;
        let g_d = kv_positions(ctx, ed.g, h, w, downsample_kv)?;
        let fr = affinity(ctx, er.theta, phi_r)?;
        let fd = affinity(ctx, ed.theta, phi_d)?;
        let a_r = ctx.tape.softmax_rows(fr)?;
        let a_d = ctx.tape.softmax_rows(fd)?;

        let (wzr, wzd) = (ctx.param(p.rgb.z), ctx.param(p.depth.z));
        let yr = ctx.tape.matmul(a_d, g_r)?;
        let yr = ctx.tape.matmul(yr, wzr)?;
        let yr = from_positions(ctx, yr, h, w)?;
        let yr = ctx.tape.scale_by(yr, ai)?;
        let yd = ctx.tape.matmul(a_r, g_d)?;
        let yd = ctx.tape.matmul(yd, wzd)?;
        let yd = from_positions(ctx, yd, h, w)?;
        let zr = ctx.tape.add(xr, yr)?;
        let zd = ctx.tape.add(xd, yd)?;
        Ok((
            zr,
            zd,
            AttentionMaps {
                a_r,
                a_d,
                c_r: None,
                c_d: None,
            },
        ))
    })?;
    let zr: Vec<Var> = results.iter().map(|r| r.0).collect();
    let zd: Vec<Var> = results.iter().map(|r| r.1).collect();
    Ok(PairOutput {
        z_r: stack(ctx, &zr)?,
        z_d: stack(ctx, &zd)?,
        maps: results.into_iter().map(|r| r.2).collect(),
    })
}
