//! Scan-like degradations: creases, noise, and small rotations.

use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Transform;
use crate::error::{Error, Result};

use super::render::{GrayImage, BACKGROUND};

pub const MAX_ROTATION_DEG: f64 = 5.0;
/// Half-width of a crease band in pixels.
const CREASE_HALF_WIDTH: f64 = 1.5;

pub fn validate(t: &Transform) -> Result<()> {
    let bad = |m: String| Err(Error::Validation(m));
    match *t {
        Transform::Crease { darkness, .. } if !(0.0..=1.0).contains(&darkness) => {
            bad(format!("crease darkness {darkness} outside [0, 1]"))
        }
        Transform::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
            bad(format!("noise sigma {sigma} must be finite and ≥ 0"))
        }
        Transform::SaltPepper { fraction } if !(0.0..=1.0).contains(&fraction) => {
            bad(format!("salt-and-pepper fraction {fraction} outside [0, 1]"))
        }
        Transform::Rotate { degrees } if !(degrees.abs() <= MAX_ROTATION_DEG) => {
            bad(format!("rotation {degrees}° outside ±{MAX_ROTATION_DEG}°"))
        }
        _ => Ok(()),
    }
}

/// Applies `spec` in order. Each transform draws from its own stream derived
/// from `seed` and its position.
pub fn augment(image: &GrayImage, spec: &[Transform], seed: u64) -> Result<GrayImage> {
    for t in spec {
        validate(t)?;
    }
    let mut img = image.clone();
    for (i, t) in spec.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
        img = match *t {
            Transform::Crease { count, darkness } => crease(&img, count, darkness, &mut rng),
            Transform::GaussianNoise { sigma } => gaussian_noise(&img, sigma, &mut rng),
            Transform::SaltPepper { fraction } => salt_pepper(&img, fraction, &mut rng),
            Transform::Rotate { degrees } => rotate(&img, degrees),
        };
    }
    Ok(img)
}

/// Per-sample draw of transform parameters, each bounded by the listed one.
pub fn jitter(spec: &[Transform], seed: u64) -> Vec<Transform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.iter()
        .map(|t| match *t {
            Transform::Crease { count, darkness } => Transform::Crease {
                count: rng.random_range(0..=count),
                darkness: darkness * rng.random_range(0.5..=1.0),
            },
            Transform::GaussianNoise { sigma } => Transform::GaussianNoise {
                sigma: sigma * rng.random::<f64>(),
            },
            Transform::SaltPepper { fraction } => Transform::SaltPepper {
                fraction: fraction * rng.random::<f64>(),
            },
            Transform::Rotate { degrees } => Transform::Rotate {
                degrees: degrees * rng.random_range(-1.0..=1.0),
            },
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn crease(img: &GrayImage, count: usize, darkness: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut out = img.clone();
    for _ in 0..count {
        let cx = rng.random_range(0.0..img.width as f64);
        let cy = rng.random_range(0.0..img.height as f64);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        // Slight bow so the band is quasi-linear.
        let bow = rng.random_range(-0.001..0.001);
        let (nx, ny) = (-theta.sin(), theta.cos());
        for y in 0..img.height {
            for x in 0..img.width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let along = dx * theta.cos() + dy * theta.sin();
                let dist = (dx * nx + dy * ny - bow * along * along).abs();
                if dist < CREASE_HALF_WIDTH {
                    let k = 1.0 - darkness * (1.0 - dist / CREASE_HALF_WIDTH);
                    let v = f64::from(out.get(x, y)) * k;
                    out.set(x, y, to_u8(v));
                }
            }
        }
    }
    out
}

fn gaussian_noise(img: &GrayImage, sigma: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let pixels = img
        .pixels
        .iter()
        .map(|&p| to_u8(f64::from(p) + normal.sample(rng)))
        .collect();
    GrayImage { pixels, ..*img }
}

/// Sets exactly `round(fraction · M)` distinct pixels to 0 or 255.
fn salt_pepper(img: &GrayImage, fraction: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let m = img.pixels.len();
    let k = ((fraction * m as f64).round() as usize).min(m);
    let mut out = img.clone();
    for i in index::sample(rng, m, k) {
        out.pixels[i] = if rng.random::<bool>() { 255 } else { 0 };
    }
    out
}

/// Bilinear rotation about the image centre; uncovered area is white.
fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sample = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            f64::from(BACKGROUND)
        } else {
            f64::from(img.get(x as usize, y as usize))
        }
    };
    let mut out = GrayImage::filled(w, h, BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
            let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
            out.set(x, y, to_u8(top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}
