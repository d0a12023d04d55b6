//! Deterministic synthetic RGB-D scenes for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{GrayImage, RgbImage};
use crate::trainer::Sample;

/// An elliptical object in front of a textured, graded background.
///
/// The object is brighter and warmer than the background and closer in
/// depth (smaller values). Its mask is 255 inside, 0 outside.
pub fn scene(width: usize, height: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = width as f64 * rng.gen_range(0.4..0.6);
    let cy = height as f64 * rng.gen_range(0.4..0.6);
    let rx = width as f64 * rng.gen_range(0.18..0.26);
    let ry = height as f64 * rng.gen_range(0.18..0.26);
    let fg_color = [rng.gen_range(190..240), rng.gen_range(90..140), rng.gen_range(40..80)];

    let mut rgb = Vec::with_capacity(3 * width * height);
    let mut depth = Vec::with_capacity(width * height);
    let mut gt = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / width as f64, y as f64 / height as f64);
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let inside = dx * dx + dy * dy <= 1.0;
            let noise: i32 = rng.gen_range(-12..=12);
            if inside {
                for c in fg_color {
                    rgb.push((c + noise).clamp(0, 255) as u8);
                }
                depth.push((50.0 + 30.0 * (dx * dx + dy * dy)) as u8);
                gt.push(255);
            } else {
                let base = [40.0 + 60.0 * fx, 70.0 + 50.0 * fy, 110.0 + 40.0 * (1.0 - fx)];
                let stripe = if (x / 6 + y / 6) % 2 == 0 { 10.0 } else { -10.0 };
                for b in base {
                    rgb.push((b + stripe + noise as f64).clamp(0.0, 255.0) as u8);
                }
                depth.push((150.0 + 80.0 * fy) as u8);
                gt.push(0);
            }
        }
    }
    Sample {
        rgb: RgbImage { width, height, data: rgb },
        depth: GrayImage {
            width,
            height,
            data: depth,
        },
        gt: GrayImage { width, height, data: gt },
    }
}
