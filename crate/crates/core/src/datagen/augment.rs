//! Two-view augmentation: pad-and-crop, horizontal flip, brightness and
//! contrast jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::seed::{rng_from, stream};

pub const CROP_PAD: usize = 2;
pub const FLIP_PROB: f64 = 0.5;
pub const JITTER: f64 = 0.2;

fn one_view(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let n = img.size;
    let pad = CROP_PAD as isize;
    let dy = rng.gen_range(-pad..=pad);
    let dx = rng.gen_range(-pad..=pad);
    let flip = rng.gen_bool(FLIP_PROB);
    let brightness = rng.gen_range(-JITTER..=JITTER);
    let contrast = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
    let mean = img.pixels.iter().map(|&p| p as f64).sum::<f64>() / (n * n) as f64;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n as isize {
        for x in 0..n as isize {
            let sx = if flip { n as isize - 1 - x } else { x } + dx;
            let sy = y + dy;
            let v = if (0..n as isize).contains(&sx) && (0..n as isize).contains(&sy) {
                img.pixels[sy as usize * n + sx as usize] as f64
            } else {
                0.0
            };
            pixels.push(((v - mean) * contrast + mean + brightness).clamp(0.0, 1.0) as f32);
        }
    }
    Image { size: n, pixels }
}

/// Two independently augmented views; identical seeds give identical pairs.
pub fn augment(img: &Image, seed: u64) -> (Image, Image) {
    let mut rng = rng_from(&[seed, stream::AUGMENT]);
    let a = one_view(img, &mut rng);
    let b = one_view(img, &mut rng);
    (a, b)
}
