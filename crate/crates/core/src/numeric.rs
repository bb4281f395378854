//! Small numeric helpers shared across stages.

use sha2::{Digest, Sha256};

/// Correctly rounded sum of `xs` (Shewchuk's algorithm, as in Python's
/// `math.fsum`). The result does not depend on the order of `xs`.
pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &value in xs {
        let mut x = value;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // half-way case: round towards the sign of the remaining partials
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Gaussian kernel `exp(-|p - q|^2 / bandwidth^2)`. The default bandwidth of
/// 1 gives `exp(-|p - q|^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    pub bandwidth: f64,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self { bandwidth: 1.0 }
    }
}

impl GaussianKernel {
    #[inline]
    pub fn eval(&self, a: &[f32], b: &[f32]) -> f64 {
        let sq = squared_distance(a, b);
        if self.bandwidth == 1.0 {
            (-sq).exp()
        } else {
            (-sq / (self.bandwidth * self.bandwidth)).exp()
        }
    }
}

/// Derives an independent 64-bit seed for a named stream from a parent seed.
///
/// Stages call this with their own name so that running a stage on its own
/// yields the same random stream as running it inside the full pipeline.
pub fn derive_seed(parent: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seed for item `index` of a named stream (e.g. one per cluster).
pub fn derive_indexed_seed(parent: u64, stream: &str, index: usize) -> u64 {
    derive_seed(parent, &format!("{stream}/{index}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_handles_cancellation() {
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[0.1; 10]), 1.0);
        assert_eq!(exact_sum(&[]), 0.0);
    }

    #[test]
    fn kernel_values() {
        let k = GaussianKernel::default();
        assert_eq!(k.eval(&[0.3, 0.4], &[0.3, 0.4]), 1.0);
        let d = (2f64.ln()).sqrt() as f32;
        assert!((k.eval(&[0.0, 0.0], &[d, 0.0]) - 0.5).abs() < 1e-7);
        let wide = GaussianKernel { bandwidth: 2.0 };
        assert!((wide.eval(&[0.0], &[2.0]) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(7, "cluster"), derive_seed(7, "select"));
        assert_eq!(derive_seed(7, "cluster"), derive_seed(7, "cluster"));
        assert_ne!(derive_indexed_seed(7, "d", 0), derive_indexed_seed(7, "d", 1));
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_independent(mut xs in prop::collection::vec(-1e3f64..1e3, 0..64), seed in any::<u64>()) {
            let a = exact_sum(&xs);
            // deterministic shuffle
            let n = xs.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                xs.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a.to_bits(), exact_sum(&xs).to_bits());
        }
    }
}
