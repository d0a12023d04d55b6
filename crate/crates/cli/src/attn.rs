//! Attention-map export: one row of each attention matrix, reshaped to the
//! key grid, upsampled to the image and stretched to the full gray range.

use std::fs;
use std::path::PathBuf;

use smac_core::io;
use smac_core::kernels::resize_nearest_plane;
use smac_core::nn::{Ctx, Mode};

use crate::commands::{load_model, prepare_pair};
use crate::{CliResult, DumpAttnArgs, Failure, Stage};

/// Half-width of the square drawn at the query position.
const MARK_RADIUS: usize = 1;

fn grid_side(positions: usize) -> Option<usize> {
    let s = (positions as f64).sqrt().round() as usize;
    (s * s == positions).then_some(s)
}

/// Min-max stretch to [0, 1]; a constant row maps to 0.
fn stretch(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn mark(map: &mut [f64], w: usize, h: usize, x: usize, y: usize) {
    for yy in y.saturating_sub(MARK_RADIUS)..=(y + MARK_RADIUS).min(h - 1) {
        for xx in x.saturating_sub(MARK_RADIUS)..=(x + MARK_RADIUS).min(w - 1) {
            map[yy * w + xx] = 1.0;
        }
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Fusion => "fusion",
        Stage::Decoder1 => "decoder1",
        Stage::Decoder2 => "decoder2",
        Stage::Decoder3 => "decoder3",
    }
}

pub fn dump(a: &DumpAttnArgs) -> CliResult {
    let mut model = load_model(&a.checkpoint, a.invert_depth)?;
    let rgb = io::load_rgb(&a.rgb)?;
    let depth = io::load_gray(&a.depth)?;
    let (w, h) = (rgb.width, rgb.height);
    if a.x >= w || a.y >= h {
        return Err(Failure::argument(format!("query ({}, {}) is outside the {w}x{h} image", a.x, a.y)));
    }
    let size = model.net.config.input_size;
    let decoders = model.net.config.sma_decoders;
    let (r, d) = prepare_pair(&rgb, &depth, size, model.invert_depth)?;

    let mut ctx = Ctx::new(&mut model.store, Mode::Eval);
    let (rv, dv) = (ctx.input(r), ctx.input(d));
    let out = model.net.forward(&mut ctx, rv, dv, None)?;
    let alpha = ctx.value(out.alpha).data()[0];
    let maps = match a.stage {
        Stage::Fusion => &out.fusion_maps[0],
        s => {
            let k = s as usize;
            out.decoder_maps
                .get(k - 1)
                .and_then(|m| m.first())
                .filter(|_| k <= decoders)
                .ok_or_else(|| {
                    Failure::argument(format!(
                        "{} has no attention (model has {decoders} attention decoders)",
                        stage_name(s)
                    ))
                })?
        }
    };

    fs::create_dir_all(&a.out).map_err(|e| Failure::new("io", 3, format!("{}: {e}", a.out.display())))?;
    let named = [
        ("rgb", Some(maps.a_r)),
        ("depth", Some(maps.a_d)),
        ("contrast_rgb", maps.c_r),
        ("contrast_depth", maps.c_d),
    ];
    let mut written: Vec<PathBuf> = Vec::new();
    for (label, var) in named {
        let Some(var) = var else { continue };
        let t = ctx.value(var);
        let (queries, keys) = (t.shape()[0], t.shape()[1]);
        let (Some(qs), Some(ks)) = (grid_side(queries), grid_side(keys)) else {
            return Err(Failure::new(
                "shape",
                4,
                format!("attention of shape {queries}x{keys} is not over square grids"),
            ));
        };
        let row = (a.y * qs / h) * qs + a.x * qs / w;
        let keys_row = &t.data()[row * keys..(row + 1) * keys];
        let up = resize_nearest_plane(keys_row, ks, ks, h, w);
        let mut img = stretch(&up);
        mark(&mut img, w, h, a.x, a.y);
        let path = a.out.join(format!("{}_{label}.pgm", stage_name(a.stage)));
        io::save_gray(&path, &img, w, h)?;
        written.push(path);
    }
    println!("stage={} query=({},{}) alpha={alpha:.6}", stage_name(a.stage), a.x, a.y);
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
