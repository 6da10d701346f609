//! Rotary position encoding over interleaved pairs `(2i, 2i+1)`.

/// `theta^(-2i/head_dim)` for each pair.
pub fn inverse_frequencies(head_dim: usize, theta: f64) -> Vec<f64> {
    (0..head_dim / 2).map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64)).collect()
}

/// Rotates `v` in place by `position` using precomputed frequencies.
pub fn rotate_in_place(v: &mut [f32], position: usize, inv_freq: &[f64]) {
    for (pair, &f) in v.chunks_exact_mut(2).zip(inv_freq) {
        let (sin, cos) = (position as f64 * f).sin_cos();
        let (x, y) = (pair[0] as f64, pair[1] as f64);
        pair[0] = (x * cos - y * sin) as f32;
        pair[1] = (x * sin + y * cos) as f32;
    }
}

/// Rotary encoding of `v` at `position`. `v.len()` must be even.
pub fn apply_rope(v: &[f32], position: usize, theta: f64) -> Vec<f32> {
    assert!(v.len() % 2 == 0, "rotary encoding needs an even head_dim");
    let mut out = v.to_vec();
    rotate_in_place(&mut out, position, &inverse_frequencies(v.len(), theta));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    fn random(seed: u64, n: usize) -> Vec<f32> {
        let mut r = rng::stream(seed, Purpose::Workload, 7, 0);
        (0..n).map(|_| rng::normal(&mut r) as f32).collect()
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    fn dot64(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let v = random(1, 32);
        assert_eq!(apply_rope(&v, 0, 10_000.0), v);
    }

    #[test]
    fn preserves_norm() {
        for p in [1, 17, 500, 4095] {
            let v = random(p as u64, 32);
            let r = apply_rope(&v, p, 10_000.0);
            assert!((norm(&r) - norm(&v)).abs() <= 1e-6 * norm(&v).max(1.0));
        }
    }

    #[test]
    fn depends_on_relative_position_only() {
        for (m, n) in [(5usize, 2usize), (40, 39), (300, 7), (9, 0)] {
            let q = random(m as u64, 16);
            let k = random(n as u64 + 1000, 16);
            let lhs = dot64(&apply_rope(&q, m, 10_000.0), &apply_rope(&k, n, 10_000.0));
            let rhs = dot64(&apply_rope(&q, m - n, 10_000.0), &k);
            assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
