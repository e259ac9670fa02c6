//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ccq::coding::{build_codebook, Codebook, EncodingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn cfg(l: u32, n: u32, s: u32) -> EncodingConfig {
    EncodingConfig::new(l, n, s).unwrap()
}

/// Every config the families use, plus the small two-bit example.
pub fn all_configs() -> Vec<EncodingConfig> {
    vec![cfg(2, 3, 1), cfg(4, 3, 2), cfg(3, 3, 2), cfg(3, 4, 2), cfg(6, 4, 3)]
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Squared error of one row of a materialized codebook, summed left to right.
pub fn row_error(sub: &[f32], row: &[u8], scale: f64, zp: u32) -> f64 {
    let mut e = 0.0f64;
    for (&x, &s) in sub.iter().zip(row) {
        let d = x as f64 - (s as f64 - zp as f64) * scale;
        e += d * d;
    }
    e
}

/// Exhaustive argmin over a materialized codebook; first (smallest) code wins ties.
pub fn oracle_search(sub: &[f32], scale: f64, zp: u32, book: &Codebook) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (k, row) in book.rows().enumerate() {
        let e = row_error(sub, row, scale, zp);
        if e < best.0 {
            best = (e, k as u32);
        }
    }
    best.1
}

pub fn codebook(c: EncodingConfig) -> Codebook {
    build_codebook(c)
}

/// `sum (w - s q)^2` for fixed centered codes.
pub fn scale_objective(w: &[f32], q: &[i32], s: f64) -> f64 {
    w.iter()
        .zip(q)
        .map(|(&w, &q)| {
            let d = w as f64 - s * q as f64;
            d * d
        })
        .sum()
}

/// Nested grid search on `[lo, hi]`: each level evaluates `points` values and
/// zooms into the two cells around the best one.
pub fn grid_search_scale(w: &[f32], q: &[i32], lo: f64, hi: f64, points: usize, levels: usize) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut best = lo;
    for _ in 0..levels {
        let step = (hi - lo) / (points - 1) as f64;
        let mut best_e = f64::INFINITY;
        for i in 0..points {
            let s = lo + step * i as f64;
            let e = scale_objective(w, q, s);
            if e < best_e {
                best_e = e;
                best = s;
            }
        }
        lo = (best - step).max(0.0);
        hi = best + step;
    }
    best
}

pub fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
