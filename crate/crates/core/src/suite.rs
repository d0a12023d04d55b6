//! Finite-difference gradient checks for every tensor op and attention
//! block on small random instances.
//!
//! Each case reduces its output to a scalar with a fixed random weighting,
//! `L = Σ R ⊙ out`, so that every output element contributes with a
//! distinct coefficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, HeadDims, MacParams, NlParams, SelectiveHeadParams, SmaParams};
use crate::error::Result;
use crate::gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
use crate::nn::{Ctx, Mode};
use crate::ops::NormMode;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradcheckReport,
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type OpCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Objective);
type BlockCase = fn(u64, f64, f64) -> Result<GradcheckReport>;

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `Σ R ⊙ y` for a constant `R` shaped like `y`.
fn weighted_sum(t: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = t.leaf(r.clone());
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

macro_rules! op_case {
    ($shapes:expr, $out:expr, |$t:ident, $v:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let inputs: Vec<Tensor> = $shapes.iter().map(|s: &&[usize]| rand(s, rng)).collect();
            let r = rand(&$out, rng);
            let f: Objective = Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y: Var = $body?;
                weighted_sum($t, y, &r)
            });
            (inputs, f)
        }
    };
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add", op_case!([&[2, 3][..], &[2, 3]], [2, 3], |t, v| t.add(v[0], v[1]))),
        ("sub", op_case!([&[2, 3][..], &[2, 3]], [2, 3], |t, v| t.sub(v[0], v[1]))),
        ("mul", op_case!([&[2, 3][..], &[2, 3]], [2, 3], |t, v| t.mul(v[0], v[1]))),
        (
            "scale",
            op_case!([&[2, 3][..]], [2, 3], |t, v| Ok::<_, crate::Error>(t.scale(v[0], -1.7))),
        ),
        ("scale_by", op_case!([&[2, 3][..], &[1]], [2, 3], |t, v| t.scale_by(v[0], v[1]))),
        ("div_by", |rng: &mut ChaCha8Rng| {
            let x = rand(&[2, 3], rng);
            let s = Tensor::scalar(rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            let r = rand(&[2, 3], rng);
            let f: Objective = Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.div_by(v[0], v[1])?;
                weighted_sum(t, y, &r)
            });
            (vec![x, s], f)
        }),
        ("relu", op_case!([&[3, 4][..]], [3, 4], |t, v| Ok::<_, crate::Error>(t.relu(v[0])))),
        (
            "sigmoid",
            op_case!([&[3, 4][..]], [3, 4], |t, v| Ok::<_, crate::Error>(t.sigmoid(v[0]))),
        ),
        ("exp", op_case!([&[3, 4][..]], [3, 4], |t, v| Ok::<_, crate::Error>(t.exp(v[0])))),
        ("matmul", op_case!([&[3, 4][..], &[4, 2]], [3, 2], |t, v| t.matmul(v[0], v[1]))),
        ("transpose", op_case!([&[3, 4][..]], [4, 3], |t, v| t.transpose(v[0]))),
        ("softmax_rows", op_case!([&[3, 5][..]], [3, 5], |t, v| t.softmax_rows(v[0]))),
        ("reshape", op_case!([&[2, 6][..]], [3, 4], |t, v| t.reshape(v[0], &[3, 4]))),
        (
            "conv2d_3x3",
            op_case!([&[2, 3, 4, 4][..], &[2, 3, 3, 3], &[2]], [2, 2, 4, 4], |t, v| t.conv2d(
                v[0],
                v[1],
                Some(v[2]),
                1,
                1
            )),
        ),
        (
            "conv2d_stride2",
            op_case!([&[1, 2, 5, 5][..], &[3, 2, 3, 3]], [1, 3, 3, 3], |t, v| t
                .conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "conv2d_dilated",
            op_case!([&[1, 2, 5, 4][..], &[2, 2, 3, 3], &[2]], [1, 2, 5, 4], |t, v| t.conv2d(
                v[0],
                v[1],
                Some(v[2]),
                1,
                2
            )),
        ),
        (
            "conv2d_1x1_stride2",
            op_case!([&[2, 3, 4, 4][..], &[2, 3, 1, 1]], [2, 2, 2, 2], |t, v| t
                .conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "max_pool",
            op_case!([&[2, 2, 4, 4][..]], [2, 2, 2, 2], |t, v| t.max_pool(v[0], 2, 2)),
        ),
        (
            "avg_pool",
            op_case!([&[2, 2, 4, 5][..]], [2, 2, 2, 2], |t, v| t.avg_pool(v[0], 2, 2)),
        ),
        (
            "global_avg_pool",
            op_case!([&[2, 3, 3, 2][..]], [2, 3, 1, 1], |t, v| t.global_avg_pool(v[0])),
        ),
        (
            "upsample_bilinear",
            op_case!([&[1, 2, 2, 3][..]], [1, 2, 5, 4], |t, v| t.upsample_bilinear(v[0], 5, 4)),
        ),
        (
            "batch_norm_train",
            op_case!([&[2, 3, 2, 2][..], &[3], &[3]], [2, 3, 2, 2], |t, v| t
                .batch_norm(v[0], v[1], v[2], NormMode::Train)
                .map(|r| r.0)),
        ),
        (
            "batch_norm_eval",
            op_case!([&[2, 3, 2, 2][..], &[3], &[3]], [2, 3, 2, 2], |t, v| t
                .batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    NormMode::Eval {
                        mean: &[0.1, -0.2, 0.3],
                        var: &[0.5, 1.5, 2.0],
                    },
                )
                .map(|r| r.0)),
        ),
        (
            "concat_channels",
            op_case!([&[2, 1, 2, 2][..], &[2, 3, 2, 2]], [2, 4, 2, 2], |t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        (
            "concat_batch",
            op_case!([&[1, 2, 2, 2][..], &[2, 2, 2, 2]], [3, 2, 2, 2], |t, v| t.concat(&[v[0], v[1]], 0)),
        ),
        ("slice_first", op_case!([&[3, 2, 2][..]], [1, 2, 2], |t, v| t.slice_first(v[0], 1))),
        (
            "add_row_bias",
            op_case!([&[3, 4][..], &[4]], [3, 4], |t, v| t.add_row_bias(v[0], v[1])),
        ),
        ("sum", op_case!([&[2, 3][..]], [1], |t, v| Ok::<_, crate::Error>(t.sum(v[0])))),
        ("mean", op_case!([&[2, 3][..]], [1], |t, v| Ok::<_, crate::Error>(t.mean(v[0])))),
        ("bce", |rng: &mut ChaCha8Rng| {
            let p = Tensor::uniform(&[2, 5], 0.05, 0.95, rng);
            let target = Tensor::from_fn(&[2, 5], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let f: Objective = Box::new(move |t: &mut Tape, v: &[Var]| t.bce(v[0], &target, 1e-7));
            (vec![p], f)
        }),
    ]
}

/// Every element of every parameter.
fn all_elements(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).value.numel()).map(move |j| (id, j)))
        .collect()
}

/// Overwrites every parameter with uniform values in [−1, 1], so that the
/// zero-initialized projections do not hide gradients, and spreads the
/// batch-norm running statistics away from the identity. Batch-norm scales
/// keep a magnitude of at least 0.5: a near-zero scale starves every
/// gradient behind it down to the finite-difference roundoff floor.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        p.value = rand(p.value.shape(), rng);
        if p.name.ends_with(".gamma") {
            p.value = p.value.map(|v| v.signum() * (0.5 + v.abs()));
        }
    }
    for b in store.buffers_mut() {
        let (lo, hi) = if b.name.ends_with("running_var") { (0.5, 1.5) } else { (-0.5, 0.5) };
        b.value = Tensor::uniform(b.value.shape(), lo, hi, rng);
    }
}

struct BlockSetup {
    store: ParamStore,
    x_r: ParamId,
    x_d: ParamId,
    r_r: Tensor,
    r_d: Tensor,
}

fn block_setup(shape: &[usize], rng: &mut ChaCha8Rng) -> BlockSetup {
    let mut store = ParamStore::new();
    let x_r = store.add("x_r", rand(shape, rng));
    let x_d = store.add("x_d", rand(shape, rng));
    BlockSetup {
        store,
        x_r,
        x_d,
        r_r: rand(shape, rng),
        r_d: rand(shape, rng),
    }
}

fn pair_loss(ctx: &mut Ctx<'_>, z_r: Var, z_d: Var, r_r: &Tensor, r_d: &Tensor) -> Result<Var> {
    let a = weighted_sum(&mut ctx.tape, z_r, r_r)?;
    let b = weighted_sum(&mut ctx.tape, z_d, r_d)?;
    ctx.tape.add(a, b)
}

fn check_block(
    mut s: BlockSetup,
    rng: &mut ChaCha8Rng,
    mode: Mode,
    h: f64,
    tol: f64,
    f: impl Fn(&mut Ctx<'_>, Var, Var) -> Result<(Var, Var)>,
) -> Result<GradcheckReport> {
    randomize(&mut s.store, rng);
    let elements = all_elements(&s.store);
    let (x_r, x_d, r_r, r_d) = (s.x_r, s.x_d, s.r_r, s.r_d);
    gradcheck_params(
        &mut s.store,
        &elements,
        mode,
        |ctx| {
            let (a, b) = (ctx.param(x_r), ctx.param(x_d));
            let (z_r, z_d) = f(ctx, a, b)?;
            pair_loss(ctx, z_r, z_d, &r_r, &r_d)
        },
        h,
        tol,
    )
}

/// Head widths for the block checks. Blocks containing the selective head
/// run batch norm in evaluation mode: under batch statistics some
/// parameters are exact no-ops (a shift feeding a normalized chain) and a
/// zero gradient cannot be told apart from finite-difference roundoff.
fn small_head() -> HeadDims {
    HeadDims {
        down1: 6,
        down2: 6,
        hidden: 8,
    }
}

fn block_cases() -> Vec<(&'static str, BlockCase)> {
    vec![
        ("nl_block", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 4, 3, 3], &mut rng);
            let p = NlParams::new(&mut s.store, "nl", 4, 2, &mut rng);
            check_block(s, &mut rng, Mode::Train, h, tol, |ctx, a, _| {
                let z = attention::nl_block(ctx, a, &p)?.z;
                Ok((z, z))
            })
        }),
        ("mutual_attention", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 4, 3, 3], &mut rng);
            let p = MacParams::new(&mut s.store, "ma", 4, 2, &mut rng);
            // Y has C' channels; weight it through a fixed reshape of R.
            let m = SmaParams {
                rgb: p.rgb.clone(),
                depth: p.depth.clone(),
            };
            check_block(s, &mut rng, Mode::Train, h, tol, |ctx, a, b| {
                let o = attention::mutual_attention(ctx, a, b, &m.rgb, &m.depth)?;
                let y_r = ctx.tape.concat(&[o.y_r, o.y_r], 1)?;
                let y_d = ctx.tape.concat(&[o.y_d, o.y_d], 1)?;
                Ok((y_r, y_d))
            })
        }),
        ("contrast_attention", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let f = store.add("f", rand(&[5, 5], &mut rng));
            let raw = store.add("log_temperature", Tensor::scalar(rng.gen_range(-1.0..1.0)));
            let r = rand(&[5, 5], &mut rng);
            let elements = all_elements(&store);
            gradcheck_params(
                &mut store,
                &elements,
                Mode::Train,
                |ctx| {
                    let fv = ctx.param(f);
                    let t = ctx.param(raw);
                    let t = ctx.tape.exp(t);
                    let c = attention::contrast_attention(ctx, fv, t)?;
                    weighted_sum(&mut ctx.tape, c, &r)
                },
                h,
                tol,
            )
        }),
        ("mac_block", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 4, 3, 3], &mut rng);
            let p = MacParams::new(&mut s.store, "mac", 4, 2, &mut rng);
            check_block(s, &mut rng, Mode::Train, h, tol, |ctx, a, b| {
                let o = attention::mac_block(ctx, a, b, &p)?;
                Ok((o.z_r, o.z_d))
            })
        }),
        ("selective_alpha", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 3, 4, 4], &mut rng);
            let head = SelectiveHeadParams::new(&mut s.store, "head", 3, 4, 4, small_head(), &mut rng)?;
            s.r_r = rand(&[2, 1], &mut rng);
            s.r_d = s.r_r.clone();
            check_block(s, &mut rng, Mode::Eval, h, tol, |ctx, a, b| {
                let alpha = attention::selective_alpha(ctx, a, b, &head)?;
                Ok((alpha, alpha))
            })
        }),
        ("smac_block", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 3, 4, 4], &mut rng);
            let p = MacParams::new(&mut s.store, "mac", 3, 2, &mut rng);
            let head = SelectiveHeadParams::new(&mut s.store, "head", 3, 4, 4, small_head(), &mut rng)?;
            check_block(s, &mut rng, Mode::Eval, h, tol, |ctx, a, b| {
                let o = attention::smac_block(ctx, a, b, &p, &head)?;
                Ok((o.z_r, o.z_d))
            })
        }),
        ("sma_block", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 4, 3, 3], &mut rng);
            let p = SmaParams::new(&mut s.store, "sma", 4, 2, &mut rng);
            let alpha = s.store.add("alpha", Tensor::zeros(&[2, 1]));
            check_block(s, &mut rng, Mode::Train, h, tol, |ctx, a, b| {
                let al = ctx.param(alpha);
                let o = attention::sma_block(ctx, a, b, &p, al, false)?;
                Ok((o.z_r, o.z_d))
            })
        }),
        ("sma_block_pooled", |seed, h, tol| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = block_setup(&[2, 4, 4, 4], &mut rng);
            let p = SmaParams::new(&mut s.store, "sma", 4, 2, &mut rng);
            let alpha = s.store.add("alpha", Tensor::zeros(&[2, 1]));
            check_block(s, &mut rng, Mode::Train, h, tol, |ctx, a, b| {
                let al = ctx.param(alpha);
                let o = attention::sma_block(ctx, a, b, &p, al, true)?;
                Ok((o.z_r, o.z_d))
            })
        }),
    ]
}

/// Names of all cases, ops first.
pub fn case_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.0).chain(block_cases().iter().map(|c| c.0)).collect()
}

/// Runs every op and block case for each seed.
pub fn run(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = case(&mut rng);
            let report = gradcheck(f, &inputs, h, tol)?;
            out.push(SuiteEntry { name, seed, report });
        }
    }
    for (name, case) in block_cases() {
        for &seed in seeds {
            out.push(SuiteEntry {
                name,
                seed,
                report: case(seed, h, tol)?,
            });
        }
    }
    Ok(out)
}

/// One row per case: worst relative error over seeds and pass/fail.
pub fn table(entries: &[SuiteEntry]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for e in entries {
        if !names.contains(&e.name) {
            names.push(e.name);
        }
    }
    let mut s = format!("{:<22} {:>6} {:>9} {:>13}  result\n", "case", "seeds", "checked", "max_rel_err");
    for name in names {
        let rows: Vec<&SuiteEntry> = entries.iter().filter(|e| e.name == name).collect();
        let worst = rows
            .iter()
            .map(|e| e.report.max_rel_err)
            .fold(0.0f64, |a, b| if b.is_nan() || b > a { b } else { a });
        let checked: usize = rows.iter().map(|e| e.report.checked).sum();
        let pass = rows.iter().all(|e| e.report.pass);
        s.push_str(&format!(
            "{name:<22} {:>6} {checked:>9} {worst:>13.3e}  {}\n",
            rows.len(),
            if pass { "pass" } else { "FAIL" }
        ));
    }
    s
}
