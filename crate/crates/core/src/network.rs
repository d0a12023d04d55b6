//! Two-stream saliency network: encoders, DenseASPP, attention fusion,
//! decoders with deep supervision.
//!
//! Both streams have the same structure and separate weights. The RGB and
//! depth images each run through their own encoder and DenseASPP; the top
//! features are fused by the selective mutual attention and contrast block,
//! refined by one non-local block per stream, then decoded with skip
//! connections. The first three decoders fuse the streams with selective
//! mutual attention, the last two add an α-weighted convolutional residual
//! from the concatenated streams into the RGB stream.

use rand::Rng;

use crate::attention::{self, AttentionMaps, HeadDims, MacParams, NlParams, SelectiveHeadParams, SmaParams};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Ctx};
use crate::param::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LOSS_WEIGHTS: [f64; 5] = [0.5, 0.5, 0.8, 0.8, 1.0];
pub const BCE_EPS: f64 = 1e-7;
pub const NUM_DECODERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stage_channels: [usize; 5],
    /// Width of the two convolutions on top of the encoder.
    pub fc_channels: usize,
    pub fc_dilation: usize,
    pub aspp_compress: usize,
    pub aspp_branch_channels: usize,
    pub aspp_dilations: [usize; 3],
    /// How many leading decoders fuse with selective mutual attention.
    pub sma_decoders: usize,
    /// Decoder (1-based) whose attention pools keys and values by 2.
    pub sma_downsample_decoder: usize,
    pub head: HeadDims,
    pub loss_weights: [f64; 5],
    pub input_size: usize,
}

impl NetworkConfig {
    pub fn toy() -> Self {
        Self {
            stage_channels: [16, 32, 32, 48, 48],
            fc_channels: 64,
            fc_dilation: 4,
            aspp_compress: 48,
            aspp_branch_channels: 24,
            aspp_dilations: [2, 4, 8],
            sma_decoders: 3,
            sma_downsample_decoder: 3,
            head: HeadDims {
                down1: 32,
                down2: 16,
                hidden: 32,
            },
            loss_weights: LOSS_WEIGHTS,
            input_size: 64,
        }
    }

    /// Full-width configuration with the backbone widths of VGG-16.
    pub fn paper() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512, 512],
            fc_channels: 1024,
            fc_dilation: 12,
            aspp_compress: 512,
            aspp_branch_channels: 176,
            aspp_dilations: [2, 4, 8],
            sma_decoders: 3,
            sma_downsample_decoder: 3,
            head: HeadDims::default(),
            loss_weights: LOSS_WEIGHTS,
            input_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s == 0 || !s.is_multiple_of(8) {
            return Err(Error::Config(format!("input_size must be a positive multiple of 8, got {s}")));
        }
        if s / 8 < 4 {
            return Err(Error::Config(format!(
                "input_size {s} gives a {0}x{0} top feature; selective attention needs at least 4x4 (input_size >= 32)",
                s / 8
            )));
        }
        let widths = self
            .stage_channels
            .iter()
            .chain([&self.fc_channels, &self.aspp_compress, &self.aspp_branch_channels])
            .chain([&self.head.down1, &self.head.down2, &self.head.hidden]);
        if widths.clone().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.aspp_dilations.iter().chain([&self.fc_dilation]).any(|&d| d == 0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        if self.sma_decoders > NUM_DECODERS {
            return Err(Error::Config(format!("sma_decoders must be at most {NUM_DECODERS}")));
        }
        if self.sma_downsample_decoder > self.sma_decoders {
            return Err(Error::Config(
                "sma_downsample_decoder must name one of the attention decoders (or be 0)".into(),
            ));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Spatial size of each skip feature: strides 1, 2, 4, 8, 8.
    pub fn skip_sizes(&self) -> [usize; 5] {
        let s = self.input_size;
        [s, s / 2, s / 4, s / 8, s / 8]
    }

    /// Skip-connected encoder stage (0-based) used by decoder `idx` (1-based).
    pub fn decoder_skip(idx: usize) -> usize {
        NUM_DECODERS - idx
    }

    /// Output channels of decoder `idx`: the channels of the next skip.
    pub fn decoder_out_channels(&self, idx: usize) -> usize {
        let next = Self::decoder_skip(idx).saturating_sub(1);
        self.stage_channels[next]
    }
}

/// Five stages of two conv+BN+ReLU, pooling after the first three, then a
/// dilated 3×3 and a 1×1 convolution, both with ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<[ConvBnRelu; 2]>,
    pub fc6: Conv2d,
    pub fc7: Conv2d,
}

pub struct EncoderOutput {
    pub skips: [Var; 5],
    pub top: Var,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(5);
        let mut c_in = 3;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let dilation = if i >= 3 { 2 } else { 1 };
            let prefix = format!("{name}.stage{}", i + 1);
            stages.push([
                ConvBnRelu::new(store, &format!("{prefix}.conv1"), c_in, c, 3, 1, dilation, rng),
                ConvBnRelu::new(store, &format!("{prefix}.conv2"), c, c, 3, 1, dilation, rng),
            ]);
            c_in = c;
        }
        let fc6 = Conv2d::new(
            store,
            &format!("{name}.fc6"),
            c_in,
            cfg.fc_channels,
            3,
            1,
            cfg.fc_dilation,
            true,
            rng,
        );
        let fc7 = Conv2d::new(store, &format!("{name}.fc7"), cfg.fc_channels, cfg.fc_channels, 1, 1, 1, true, rng);
        Self { stages, fc6, fc7 }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<EncoderOutput> {
        let (_, c, h, w) = ctx.value(image).dims4("encoder_forward")?;
        if c != 3 {
            return Err(Error::Config(format!("encoder expects 3 input channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} is not divisible by 8")));
        }
        let mut x = image;
        let mut skips = Vec::with_capacity(5);
        for (i, [a, b]) in self.stages.iter().enumerate() {
            if (1..=3).contains(&i) {
                x = ctx.tape.max_pool(x, 2, 2)?;
            }
            x = a.forward(ctx, x)?;
            x = b.forward(ctx, x)?;
            skips.push(x);
        }
        let top = self.fc6.forward(ctx, x)?;
        let top = ctx.tape.relu(top);
        let top = self.fc7.forward(ctx, top)?;
        let top = ctx.tape.relu(top);
        Ok(EncoderOutput {
            skips: [skips[0], skips[1], skips[2], skips[3], skips[4]],
            top,
        })
    }
}

/// Densely connected dilated branches plus a global-average branch.
#[derive(Clone, Debug)]
pub struct DenseAspp {
    pub compress: Conv2d,
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

pub struct AsppOutput {
    pub out: Var,
    pub compressed: Var,
    pub branches: Vec<Var>,
    /// Global branch after upsampling to the input size.
    pub global: Var,
    /// Channel means of the compressed input, `[n, c, 1, 1]`.
    pub pooled: Var,
}

impl DenseAspp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let (c, b) = (cfg.aspp_compress, cfg.aspp_branch_channels);
        let compress = Conv2d::new(store, &format!("{name}.compress"), in_channels, c, 1, 1, 1, true, rng);
        let branches = cfg
            .aspp_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::new(store, &format!("{name}.branch{}", i + 1), c + i * b, b, 3, 1, d, true, rng))
            .collect();
        // compressed input, the dilated branches, and its global average
        let concat = 2 * c + cfg.aspp_dilations.len() * b;
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), concat, c, 1, 1, 1, true, rng);
        Self { compress, branches, fuse }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<AsppOutput> {
        let (_, _, h, w) = ctx.value(x).dims4("dense_aspp")?;
        let compressed = self.compress.forward(ctx, x)?;
        let compressed = ctx.tape.relu(compressed);
        let mut dense = vec![compressed];
        let mut branches = Vec::with_capacity(self.branches.len());
        for conv in &self.branches {
            let input = if dense.len() == 1 { dense[0] } else { ctx.tape.concat(&dense, 1)? };
            let y = conv.forward(ctx, input)?;
            let y = ctx.tape.relu(y);
            branches.push(y);
            dense.push(y);
        }
        let pooled = ctx.tape.global_avg_pool(compressed)?;
        let global = ctx.tape.upsample_bilinear(pooled, h, w)?;
        dense.push(global);
        let cat = ctx.tape.concat(&dense, 1)?;
        let out = self.fuse.forward(ctx, cat)?;
        let out = ctx.tape.relu(out);
        Ok(AsppOutput {
            out,
            compressed,
            branches,
            global,
            pooled,
        })
    }
}

/// SMAC fusion of the top features followed by one NL block per stream.
#[derive(Clone, Debug)]
pub struct FusionStage {
    pub smac: MacParams,
    pub head: SelectiveHeadParams,
    pub post_nl_r: NlParams,
    pub post_nl_d: NlParams,
}

pub struct FusionOutput {
    pub z_r: Var,
    pub z_d: Var,
    pub alpha: Var,
    pub maps: Vec<AttentionMaps>,
}

impl FusionStage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        size: usize,
        dims: HeadDims,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = attention::default_inner(channels);
        Ok(Self {
            smac: MacParams::new(store, &format!("{name}.smac"), channels, inner, rng),
            head: SelectiveHeadParams::new(store, &format!("{name}.selective"), channels, size, size, dims, rng)?,
            post_nl_r: NlParams::new(store, &format!("{name}.nl_rgb"), channels, inner, rng),
            post_nl_d: NlParams::new(store, &format!("{name}.nl_depth"), channels, inner, rng),
        })
    }

    /// `alpha`, when given, replaces the selective head's output.
    pub fn forward(&self, ctx: &mut Ctx<'_>, top_r: Var, top_d: Var, alpha: Option<Var>) -> Result<FusionOutput> {
        let alpha = match alpha {
            Some(a) => a,
            None => attention::selective_alpha(ctx, top_r, top_d, &self.head)?,
        };
        let s = attention::smac_block_with_alpha(ctx, top_r, top_d, &self.smac, alpha)?;
        let z_r = attention::nl_block(ctx, s.z_r, &self.post_nl_r)?.z;
        let z_d = attention::nl_block(ctx, s.z_d, &self.post_nl_d)?.z;
        Ok(FusionOutput {
            z_r,
            z_d,
            alpha,
            maps: s.maps,
        })
    }
}

#[derive(Clone, Debug)]
pub enum DecoderFusion {
    Sma {
        params: SmaParams,
        downsample_kv: bool,
    },
    /// `out_r += α · conv3x3(concat(out_r, out_d))`
    ConcatResidual {
        conv: Conv2d,
    },
}

/// One decoder of both streams plus its two prediction heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub idx: usize,
    pub conv_r: [ConvBnRelu; 2],
    pub conv_d: [ConvBnRelu; 2],
    pub fusion: DecoderFusion,
    pub head_r: Conv2d,
    pub head_d: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub struct DecoderOutput {
    pub out_r: Var,
    pub out_d: Var,
    pub maps: Vec<AttentionMaps>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        idx: usize,
        prev_channels: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Self {
        let skip = cfg.stage_channels[NetworkConfig::decoder_skip(idx)];
        let c_in = skip + prev_channels;
        let c = cfg.decoder_out_channels(idx);
        let convs = |store: &mut ParamStore, rng: &mut R, s: &str| {
            [
                ConvBnRelu::new(store, &format!("{name}.{s}.conv1"), c_in, c, 3, 1, 1, rng),
                ConvBnRelu::new(store, &format!("{name}.{s}.conv2"), c, c, 3, 1, 1, rng),
            ]
        };
        let conv_r = convs(store, rng, "rgb");
        let conv_d = convs(store, rng, "depth");
        let fusion = if idx <= cfg.sma_decoders {
            DecoderFusion::Sma {
                params: SmaParams::new(store, &format!("{name}.sma"), c, attention::default_inner(c), rng),
                downsample_kv: idx == cfg.sma_downsample_decoder,
            }
        } else {
            DecoderFusion::ConcatResidual {
                conv: Conv2d::new(store, &format!("{name}.residual"), 2 * c, c, 3, 1, 1, true, rng),
            }
        };
        let head_r = Conv2d::new(store, &format!("{name}.rgb.head"), c, 1, 3, 1, 1, true, rng);
        let head_d = Conv2d::new(store, &format!("{name}.depth.head"), c, 1, 3, 1, 1, true, rng);
        Self {
            idx,
            conv_r,
            conv_d,
            fusion,
            head_r,
            head_d,
            in_channels: c_in,
            out_channels: c,
        }
    }

    fn merge(&self, ctx: &mut Ctx<'_>, prev: Var, skip: Var, convs: &[ConvBnRelu; 2]) -> Result<Var> {
        let (_, cs, h, w) = ctx.value(skip).dims4("decoder_step")?;
        let (_, cp, ph, pw) = ctx.value(prev).dims4("decoder_step")?;
        if cs + cp != self.in_channels {
            return Err(Error::Config(format!(
                "decoder {}: skip ({cs}) + previous ({cp}) channels != configured {}",
                self.idx, self.in_channels
            )));
        }
        let up = if (ph, pw) == (h, w) {
            prev
        } else {
            ctx.tape.upsample_bilinear(prev, h, w)?
        };
        let x = ctx.tape.concat(&[skip, up], 1)?;
        let x = convs[0].forward(ctx, x)?;
        convs[1].forward(ctx, x)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, prev_r: Var, prev_d: Var, skip_r: Var, skip_d: Var, alpha: Var) -> Result<DecoderOutput> {
        let out_r = self.merge(ctx, prev_r, skip_r, &self.conv_r)?;
        let out_d = self.merge(ctx, prev_d, skip_d, &self.conv_d)?;
        match &self.fusion {
            DecoderFusion::Sma { params, downsample_kv } => {
                let p = attention::sma_block(ctx, out_r, out_d, params, alpha, *downsample_kv)?;
                Ok(DecoderOutput {
                    out_r: p.z_r,
                    out_d: p.z_d,
                    maps: p.maps,
                })
            }
            DecoderFusion::ConcatResidual { conv } => {
                let n = ctx.value(out_r).shape()[0];
                let cat = ctx.tape.concat(&[out_r, out_d], 1)?;
                let res = conv.forward(ctx, cat)?;
                let mut weighted = Vec::with_capacity(n);
                for i in 0..n {
                    let ri = ctx.tape.slice_first(res, i)?;
                    let ai = ctx.tape.slice_first(alpha, i)?;
                    weighted.push(ctx.tape.scale_by(ri, ai)?);
                }
                let res = if n == 1 { weighted[0] } else { ctx.tape.concat(&weighted, 0)? };
                Ok(DecoderOutput {
                    out_r: ctx.tape.add(out_r, res)?,
                    out_d,
                    maps: Vec::new(),
                })
            }
        }
    }
}

/// 3×3 one-channel convolution followed by a sigmoid.
pub fn predict(ctx: &mut Ctx<'_>, head: &Conv2d, x: Var) -> Result<Var> {
    let logit = head.forward(ctx, x)?;
    Ok(ctx.tape.sigmoid(logit))
}

/// All parameters of the two-stream network.
#[derive(Clone, Debug)]
pub struct TwoStreamState {
    pub config: NetworkConfig,
    pub rgb_encoder: Encoder,
    pub depth_encoder: Encoder,
    pub aspp_r: DenseAspp,
    pub aspp_d: DenseAspp,
    pub fusion: FusionStage,
    pub decoders: Vec<Decoder>,
}

pub struct NetworkOutput {
    /// Per decoder, `[n, 1, h, w]` saliency of the RGB stream.
    pub preds_r: Vec<Var>,
    pub preds_d: Vec<Var>,
    pub alpha: Var,
    pub fusion_maps: Vec<AttentionMaps>,
    pub decoder_maps: Vec<Vec<AttentionMaps>>,
    /// Decoder feature outputs, RGB then depth.
    pub decoder_out: Vec<(Var, Var)>,
}

impl TwoStreamState {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let rgb_encoder = Encoder::new(store, "rgb_encoder", &config, rng);
        let depth_encoder = Encoder::new(store, "depth_encoder", &config, rng);
        let aspp_r = DenseAspp::new(store, "aspp_rgb", config.fc_channels, &config, rng);
        let aspp_d = DenseAspp::new(store, "aspp_depth", config.fc_channels, &config, rng);
        let fusion = FusionStage::new(store, "fusion", config.aspp_compress, config.input_size / 8, config.head, rng)?;
        let mut decoders = Vec::with_capacity(NUM_DECODERS);
        let mut prev = config.aspp_compress;
        for idx in 1..=NUM_DECODERS {
            let d = Decoder::new(store, &format!("decoder{idx}"), idx, prev, &config, rng);
            prev = d.out_channels;
            decoders.push(d);
        }
        Ok(Self {
            config,
            rgb_encoder,
            depth_encoder,
            aspp_r,
            aspp_d,
            fusion,
            decoders,
        })
    }

    /// `rgb` and `depth` are `[n, 3, s, s]` with `s` the configured input
    /// size. A given `alpha` (`[n, 1]`) bypasses the selective head.
    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var, depth: Var, alpha: Option<Var>) -> Result<NetworkOutput> {
        let s = self.config.input_size;
        for v in [rgb, depth] {
            let (_, _, h, w) = ctx.value(v).dims4("network")?;
            if (h, w) != (s, s) {
                return Err(Error::Config(format!("network built for {s}x{s} input, got {h}x{w}")));
            }
        }
        let enc_r = self.rgb_encoder.forward(ctx, rgb)?;
        let enc_d = self.depth_encoder.forward(ctx, depth)?;
        let top_r = self.aspp_r.forward(ctx, enc_r.top)?.out;
        let top_d = self.aspp_d.forward(ctx, enc_d.top)?.out;
        let fused = self.fusion.forward(ctx, top_r, top_d, alpha)?;

        let (mut prev_r, mut prev_d) = (fused.z_r, fused.z_d);
        let mut out = NetworkOutput {
            preds_r: Vec::with_capacity(NUM_DECODERS),
            preds_d: Vec::with_capacity(NUM_DECODERS),
            alpha: fused.alpha,
            fusion_maps: fused.maps,
            decoder_maps: Vec::with_capacity(NUM_DECODERS),
            decoder_out: Vec::with_capacity(NUM_DECODERS),
        };
        for d in &self.decoders {
            let k = NetworkConfig::decoder_skip(d.idx);
            let o = d.forward(ctx, prev_r, prev_d, enc_r.skips[k], enc_d.skips[k], fused.alpha)?;
            out.preds_r.push(predict(ctx, &d.head_r, o.out_r)?);
            out.preds_d.push(predict(ctx, &d.head_d, o.out_d)?);
            out.decoder_maps.push(o.maps);
            out.decoder_out.push((o.out_r, o.out_d));
            (prev_r, prev_d) = (o.out_r, o.out_d);
        }
        Ok(out)
    }
}

/// The RGB stream's last prediction at input resolution.
pub fn final_map(ctx: &mut Ctx<'_>, out: &NetworkOutput, size: usize) -> Result<Var> {
    let last = *out.preds_r.last().expect("network has decoders");
    let (_, _, h, w) = ctx.value(last).dims4("final_map")?;
    if (h, w) == (size, size) {
        Ok(last)
    } else {
        ctx.tape.upsample_bilinear(last, size, size)
    }
}

/// `Σ_stream Σ_d w_d · BCE(pred_d, gt_d)` with the ground truth
/// nearest-resized to each prediction. `gt` is `[n, 1, h, w]` in {0, 1}.
pub fn deep_supervised_loss(ctx: &mut Ctx<'_>, preds_r: &[Var], preds_d: &[Var], gt: &Tensor, weights: &[f64]) -> Result<Var> {
    let (n, c, _, _) = gt.dims4("deep_supervised_loss")?;
    if c != 1 {
        return Err(Error::Data(format!("ground truth must have one channel, got {c}")));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("ground truth contains {v}, expected only 0 and 1")));
    }
    if preds_r.len() != weights.len() || preds_d.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} loss weights for {} + {} predictions",
            weights.len(),
            preds_r.len(),
            preds_d.len()
        )));
    }
    let mut total: Option<Var> = None;
    for stream in [preds_r, preds_d] {
        for (&p, &w) in stream.iter().zip(weights) {
            let (pn, _, ph, pw) = ctx.value(p).dims4("deep_supervised_loss")?;
            if pn != n {
                return Err(Error::shape("deep_supervised_loss", format!("batch {pn} vs ground truth {n}")));
            }
            let target = resize_gt(gt, ph, pw)?;
            let l = ctx.tape.bce(p, &target, BCE_EPS)?;
            let l = ctx.tape.scale(l, w);
            total = Some(match total {
                Some(t) => ctx.tape.add(t, l)?,
                None => l,
            });
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("no predictions".into()))
}

fn resize_gt(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, gh, gw) = gt.dims4("resize_gt")?;
    if (gh, gw) == (h, w) {
        return Ok(gt.clone());
    }
    let mut out = Vec::with_capacity(n * h * w);
    for plane in gt.data().chunks(gh * gw) {
        out.extend(crate::kernels::resize_nearest_plane(plane, gh, gw, h, w));
    }
    Tensor::new(&[n, 1, h, w], out)
}
