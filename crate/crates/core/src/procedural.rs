//! Seeded synthetic "clean" scenes used when no image directory is configured.
//!
//! Each scene is a smooth two-colour gradient with a few flat rectangles and
//! discs and a low-amplitude sinusoidal texture, kept inside `[0.05, 0.95]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

struct Shape {
    disc: bool,
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    color: [f32; 3],
}

pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || -> [f32; 3] { [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)] };
    let c0 = color();
    let c1 = color();
    let n_shapes = rng.gen_range(3..7);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            disc: rng.gen_bool(0.5),
            cy: rng.gen_range(0.0..height as f32),
            cx: rng.gen_range(0.0..width as f32),
            ry: rng.gen_range(0.08..0.3) * height as f32,
            rx: rng.gen_range(0.08..0.3) * width as f32,
            color: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        })
        .collect();
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let freq: f32 = rng.gen_range(0.15..0.6);
    let amp: f32 = rng.gen_range(0.02..0.06);
    let (dy, dx) = (angle.sin(), angle.cos());

    Image::from_fn(height, width, 3, |y, x, c| {
        let t = (y as f32 / height.max(2) as f32 * 0.6 + x as f32 / width.max(2) as f32 * 0.4).min(1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for s in &shapes {
            let (ny, nx) = ((y as f32 - s.cy) / s.ry, (x as f32 - s.cx) / s.rx);
            let inside = if s.disc { ny * ny + nx * nx <= 1.0 } else { ny.abs() <= 1.0 && nx.abs() <= 1.0 };
            if inside {
                v = s.color[c];
            }
        }
        v += amp * (freq * (y as f32 * dy + x as f32 * dx)).sin();
        v.clamp(0.05, 0.95)
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn scenes(count: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| scene(height, width, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)))
        .collect()
}
