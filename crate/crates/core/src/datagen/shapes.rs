//! Ten parametric shape families rendered as antialiased grayscale images.

use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};

pub const NUM_FAMILIES: usize = 10;
pub const MIN_SIZE: usize = 8;

pub const FAMILY_NAMES: [&str; NUM_FAMILIES] = [
    "disc", "cross", "triangle", "l_shape", "diagonal", "ring", "plate", "stripes_v", "stripes_h", "stripes_d",
];

/// Per-sample jitter.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    foreground: f64,
    background: f64,
}

fn in_box(x: f64, y: f64, hw: f64, hh: f64) -> bool {
    x.abs() <= hw && y.abs() <= hh
}

/// Half-open stripe test: true on the first half of every period.
fn stripe(t: f64, period: f64) -> bool {
    (t / period).rem_euclid(1.0) < 0.5
}

pub const STRIPE_PERIODS: [f64; 3] = [0.46, 0.68, 0.95];

/// Ink density in shape-local coordinates, where the shape spans roughly
/// `[-1, 1]^2`. The plate and the three stripe families share one square
/// envelope and one mean density, so they differ only in a grating whose
/// period grows from the vertical to the diagonal stripes.
fn density(family: usize, x: f64, y: f64) -> f64 {
    let solid = |b: bool| if b { 1.0 } else { 0.0 };
    let square = in_box(x, y, 0.8, 0.8);
    match family {
        0 => solid(x * x + y * y <= 0.7 * 0.7),
        1 => solid(in_box(x, y, 0.22, 0.85) || in_box(x, y, 0.85, 0.22)),
        2 => solid(y <= 0.7 && y >= -0.8 + 1.75 * x.abs() - 0.1),
        3 => solid(in_box(x + 0.55, y, 0.25, 0.85) || in_box(x, y - 0.6, 0.8, 0.25)),
        4 => solid(in_box(x, y, 0.9, 0.9) && (x - y).abs() <= 0.35),
        5 => {
            let r = (x * x + y * y).sqrt();
            solid((0.45..=0.8).contains(&r))
        }
        6 => {
            if square {
                0.5
            } else {
                0.0
            }
        }
        7 => solid(square && stripe(x, STRIPE_PERIODS[0])),
        8 => solid(square && stripe(y, STRIPE_PERIODS[1])),
        9 => solid(square && stripe((x + y) / std::f64::consts::SQRT_2, STRIPE_PERIODS[2])),
        _ => 0.0,
    }
}

const SUBSAMPLES: usize = 4;

fn render(family: usize, size: usize, pose: Pose) -> Image {
    let mut pixels = Vec::with_capacity(size * size);
    let step = 2.0 / size as f64;
    for row in 0..size {
        for col in 0..size {
            let mut ink = 0.0;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let px = -1.0 + (col as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64) * step;
                    let py = 1.0 - (row as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64) * step;
                    let lx = (px - pose.cx) / pose.scale;
                    let ly = (py - pose.cy) / pose.scale;
                    ink += density(family, lx, ly);
                }
            }
            let coverage = ink / (SUBSAMPLES * SUBSAMPLES) as f64;
            let v = pose.background + (pose.foreground - pose.background) * coverage;
            pixels.push(v as f32);
        }
    }
    Image { size, pixels }
}

/// Renders `n` images of shape family `class_id`. Sample `i` depends only
/// on `(seed, class_id, i)`.
pub fn generate_content(class_id: usize, n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_SIZE}, got {size}")));
    }
    if class_id >= NUM_FAMILIES {
        return Err(Error::Config(format!("class {class_id} outside the {NUM_FAMILIES} shape families")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = rng_from(&[seed, stream::CONTENT, class_id as u64, i as u64]);
            let pose = Pose {
                cx: rng.gen_range(-0.06..0.06),
                cy: rng.gen_range(-0.06..0.06),
                scale: rng.gen_range(0.85..1.0),
                foreground: rng.gen_range(0.7..1.0),
                background: rng.gen_range(0.0..0.2),
            };
            render(class_id, size, pose)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_content(3, 5, 16, 9).unwrap();
        let b = generate_content(3, 5, 16, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|im| &im.pixels).all(|&p| (0.0..=1.0).contains(&p)));
        assert!(generate_content(3, 0, 16, 9).unwrap().is_empty());
        assert!(matches!(generate_content(0, 1, 4, 9), Err(Error::Config(_))));
    }

    #[test]
    fn families_differ_in_mean_render() {
        let means: Vec<Vec<f32>> = (0..NUM_FAMILIES)
            .map(|c| {
                let ims = generate_content(c, 20, 16, 1).unwrap();
                (0..256).map(|p| ims.iter().map(|im| im.pixels[p]).sum::<f32>() / 20.0).collect()
            })
            .collect();
        for a in 0..NUM_FAMILIES {
            for b in a + 1..NUM_FAMILIES {
                let d: f32 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d > 0.5, "families {a} and {b} look alike ({d})");
            }
        }
    }
}
