//! Style corruptions with five severities each.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianBlur,
    JpegLike,
    ImpulseNoise,
    None,
}

impl Corruption {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" | "gaussian" => Ok(Self::GaussianBlur),
            "jpeg_like" | "jpeg" => Ok(Self::JpegLike),
            "impulse_noise" | "impulse" => Ok(Self::ImpulseNoise),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown corruption {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlur => "gaussian_blur",
            Self::JpegLike => "jpeg_like",
            Self::ImpulseNoise => "impulse_noise",
            Self::None => "none",
        }
    }
}

pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
pub const IMPULSE_PROB: [f64; 5] = [0.02, 0.05, 0.1, 0.17, 0.25];
pub const JPEG_FACTOR: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 32.0];

/// Standard luminance quantization table.
const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn check_severity(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(Error::Config(format!("severity must be in 1..=5, got {severity}")))
    }
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let n = img.size;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * src[y * n + reflect(x as isize + t as isize - r, n)])
                .sum();
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(y as isize + t as isize - r, n) * n + x])
                .sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image { size: n, pixels: out }
}

pub fn impulse_noise(img: &Image, prob: f64, seed: u64) -> Image {
    let mut rng = rng_from(&[seed, stream::CORRUPTION]);
    let pixels = img
        .pixels
        .iter()
        .map(|&p| {
            if rng.gen_bool(prob) {
                if rng.gen_bool(0.5) { 1.0 } else { 0.0 }
            } else {
                p
            }
        })
        .collect();
    Image { size: img.size, pixels }
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Block DCT quantization on the luminance channel. Blocks hanging over
/// the border are filled by edge replication and cropped afterwards.
pub fn jpeg_like(img: &Image, factor: f64) -> Image {
    let n = img.size;
    let basis = dct_basis();
    let scale = factor / 4.0;
    let mut out = vec![0.0f32; n * n];
    for by in (0..n).step_by(8) {
        for bx in (0..n).step_by(8) {
            let mut block = [[0.0f64; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (sy, sx) = ((by + y).min(n - 1), (bx + x).min(n - 1));
                    *v = img.pixels[sy * n + sx] as f64 * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y][x];
                        }
                    }
                    let q = (LUMA_Q[u * 8 + v] * scale).max(1.0);
                    coef[u][v] = (s / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (oy, ox) = (by + y, bx + x);
                    if oy >= n || ox >= n {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coef[u][v];
                        }
                    }
                    out[oy * n + ox] = ((s + 128.0) / 255.0).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Image { size: n, pixels: out }
}

/// Applies `kind` at `severity` (1..=5). `seed` drives the random
/// corruptions and is ignored by the deterministic ones.
pub fn apply_corruption(img: &Image, kind: Corruption, severity: u8, seed: u64) -> Result<Image> {
    let s = check_severity(severity)?;
    Ok(match kind {
        Corruption::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[s]),
        Corruption::ImpulseNoise => impulse_noise(img, IMPULSE_PROB[s], seed),
        Corruption::JpegLike => jpeg_like(img, JPEG_FACTOR[s]),
        Corruption::None => img.clone(),
    })
}
