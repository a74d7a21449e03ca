//! Synthetic desk-scale dataset: bright soft-edged elliptical blobs on a
//! darker textured background, with the hard ellipse support as the mask.
//!
//! Fully deterministic per (n, size, seed): sample `i` draws from its own
//! derived stream, so datasets of different lengths share a prefix.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::Sample;

/// Foreground fraction every generated mask must land in.
pub const FG_FRACTION: (f64, f64) = (0.01, 0.6);

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    edge: f64,
    color: [f64; 3],
}

impl Blob {
    /// Normalized elliptical radius: < 1 inside the blob.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        (u * u + v * v).sqrt()
    }
}

fn draw_blobs(rng: &mut SeededRng, size: usize, count: usize) -> Vec<Blob> {
    let s = size as f64;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let fg = rng.uniform_in(0.65, 0.95);
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        blobs.push(Blob {
            cx: rng.uniform_in(0.25, 0.75) * s,
            cy: rng.uniform_in(0.25, 0.75) * s,
            a: rng.uniform_in(0.12, 0.30) * s,
            b: rng.uniform_in(0.12, 0.30) * s,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            edge: rng.uniform_in(1.0, 2.5),
            color: [
                fg * rng.uniform_in(0.80, 1.0),
                fg * rng.uniform_in(0.80, 1.0),
                fg * rng.uniform_in(0.80, 1.0),
            ],
        });
    }
    blobs
}

fn mask_of(blobs: &[Blob], size: usize) -> (Vec<f32>, f64) {
    let mut mask = vec![0.0f32; size * size];
    let mut fg = 0usize;
    for y in 0..size {
        for x in 0..size {
            let inside = blobs
                .iter()
                .any(|b| b.radius(x as f64 + 0.5, y as f64 + 0.5) <= 1.0);
            if inside {
                mask[y * size + x] = 1.0;
                fg += 1;
            }
        }
    }
    let frac = fg as f64 / (size * size) as f64;
    (mask, frac)
}

fn generate_sample(index: usize, size: usize, seed: u64) -> Sample {
    let mut rng = SeededRng::derive(seed, index as u64);

    // blob geometry, redrawn until the foreground fraction lands in range;
    // later attempts fall back to a single blob, which always fits
    let (blobs, mask) = {
        let mut attempt = 0;
        loop {
            let count = if attempt < 16 { 1 + rng.below(3) } else { 1 };
            let blobs = draw_blobs(&mut rng, size, count);
            let (mask, frac) = mask_of(&blobs, size);
            if frac > FG_FRACTION.0 && frac < FG_FRACTION.1 {
                break (blobs, mask);
            }
            attempt += 1;
        }
    };

    // textured background: tinted base plus a few low-frequency sinusoids
    let base = rng.uniform_in(0.15, 0.40);
    let tint = [
        rng.uniform_in(0.80, 1.10),
        rng.uniform_in(0.80, 1.10),
        rng.uniform_in(0.80, 1.10),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_in(0.02, 0.06),
                rng.uniform_in(0.5, 3.0),
                rng.uniform_in(0.5, 3.0),
                rng.uniform_in(0.0, std::f64::consts::TAU),
            )
        })
        .collect();

    let s = size as f64;
    let plane = size * size;
    let mut image = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(amp, kx, ky, phase)| {
                    amp * (std::f64::consts::TAU * (kx * fx / s + ky * fy / s) + phase).sin()
                })
                .sum();
            for c in 0..3 {
                let mut v = (base * tint[c] + texture).clamp(0.0, 1.0);
                for blob in &blobs {
                    let r = blob.radius(fx, fy);
                    // logistic edge of ~`edge` pixels around the ellipse rim
                    let k = (blob.a.min(blob.b) / blob.edge).max(1.0);
                    let alpha = 1.0 / (1.0 + ((r - 1.0) * k).exp());
                    v += (blob.color[c] - v) * alpha;
                }
                image[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Sample {
        id: format!("synth{index:04}"),
        image: Tensor::new(vec![3, size, size], image).expect("shape by construction"),
        mask: Tensor::new(vec![1, size, size], mask).expect("shape by construction"),
    }
}

/// Generates `n` samples of `size x size`, deterministically per
/// (n, size, seed).
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("synth dataset wants n >= 1".into()));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "synth size must be a positive multiple of 16, got {size}"
        )));
    }
    Ok((0..n).map(|i| generate_sample(i, size, seed)).collect())
}
