//! Deterministic parallel reductions.
//!
//! Sums are computed over fixed-size index chunks (each chunk sequential),
//! then combined in chunk order. The result is bit-identical for any worker
//! count, which the ensemble determinism guarantees rely on.

use rayon::prelude::*;

pub const CHUNK: usize = 1 << 15;

/// Deterministic sum of `f(i)` over `0..n` mapped per chunk.
pub fn det_sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic dot product.
pub fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let chunks = a.len().div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(a.len());
            let mut s = 0.0;
            for i in lo..hi {
                s += a[i] * b[i];
            }
            s
        })
        .collect();
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential_structure() {
        let n: usize = 100_000;
        let v: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 * 1e-3).collect();
        let a = det_dot(&v, &v);
        // Reference: same fixed chunking, sequentially.
        let mut partials = Vec::new();
        for c in 0..n.div_ceil(CHUNK) {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            partials.push(v[lo..hi].iter().map(|x| x * x).sum::<f64>());
        }
        let b: f64 = partials.iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
