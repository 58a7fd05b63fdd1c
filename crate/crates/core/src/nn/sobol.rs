//! Unscrambled Sobol sequence, Gray-code ordering, 32-bit resolution.
//!
//! The all-zero first point is skipped, so row 0 of any sample is the
//! second point of the canonical sequence.

use ndarray::Array2;

use super::sobol_table::{MAX_DEGREE, MAX_DIM, M_INIT, POLY};

const BITS: usize = 32;

/// Largest supported dimensionality.
pub const SOBOL_MAX_DIM: usize = MAX_DIM;

#[derive(Debug, Clone)]
pub struct Sobol {
    dim: usize,
    /// `v[d][i]` is the direction integer for bit `i` (0-based) of dimension `d`.
    v: Vec<[u32; BITS]>,
}

impl Sobol {
    pub fn new(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "Sobol dimension must be in 1..={MAX_DIM}");
        let v = (0..dim).map(direction_numbers).collect();
        Sobol { dim, v }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Integer coordinates of canonical point `k` (point 0 is the origin).
    fn point_bits(&self, k: u64) -> Vec<u32> {
        assert!(k < (1u64 << BITS), "Sobol index exceeds 2^32");
        let gray = k ^ (k >> 1);
        (0..self.dim)
            .map(|d| {
                let mut x = 0u32;
                for (i, &vi) in self.v[d].iter().enumerate() {
                    if gray >> i & 1 == 1 {
                        x ^= vi;
                    }
                }
                x
            })
            .collect()
    }

    /// `n` points starting after `offset` skipped points (origin excluded).
    pub fn sample(&self, n: usize, offset: u64) -> Array2<f64> {
        let scale = 1.0 / (1u64 << BITS) as f64;
        let mut out = Array2::zeros((n, self.dim));
        if n == 0 {
            return out;
        }
        let mut k = offset + 1;
        let mut x = self.point_bits(k);
        for r in 0..n {
            for d in 0..self.dim {
                out[(r, d)] = x[d] as f64 * scale;
            }
            // Gray-code step k -> k + 1 flips the direction of the lowest zero bit of k.
            let c = (!k).trailing_zeros() as usize;
            k += 1;
            if r + 1 < n {
                for d in 0..self.dim {
                    x[d] ^= self.v[d][c];
                }
            }
        }
        out
    }
}

/// Convenience wrapper: `n × dim` points after skipping `offset`.
pub fn sobol_sample(dim: usize, n: usize, offset: u64) -> Array2<f64> {
    Sobol::new(dim).sample(n, offset)
}

fn direction_numbers(d: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if d == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (BITS - 1 - i);
        }
        return v;
    }
    let poly = POLY[d];
    let s = (31 - poly.leading_zeros()) as usize;
    debug_assert!(s <= MAX_DEGREE);
    // Interior coefficients a_1..a_{s-1}, most significant first.
    let a = (poly >> 1) & ((1 << (s - 1)) - 1);
    for i in 0..s.min(BITS) {
        v[i] = M_INIT[d][i] << (BITS - 1 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}
