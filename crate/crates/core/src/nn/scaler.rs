use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension min-max map onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Scaler {
    pub fn new(ranges: &[(f64, f64)]) -> Result<Self> {
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invariant(
                    format!("scaler[{i}]"),
                    format!("need finite min < max, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(Scaler {
            lo: ranges.iter().map(|r| r.0).collect(),
            hi: ranges.iter().map(|r| r.1).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.lo[i], self.hi[i])
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn scale_one(&self, i: usize, x: f64) -> f64 {
        (x - self.lo[i]) / (self.hi[i] - self.lo[i])
    }

    pub fn unscale_one(&self, i: usize, u: f64) -> f64 {
        self.lo[i] + u * (self.hi[i] - self.lo[i])
    }

    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        x.iter().enumerate().map(|(i, &v)| self.scale_one(i, v)).collect()
    }

    pub fn unscale(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.dim());
        u.iter().enumerate().map(|(i, &v)| self.unscale_one(i, v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_round_trip() {
        let s = Scaler::new(&[(-3.0, 5.0), (0.0, 1e-3), (-200.0, -100.0)]).unwrap();
        assert_eq!(s.scale(&[-3.0, 0.0, -200.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(s.scale(&[5.0, 1e-3, -100.0]), vec![1.0, 1.0, 1.0]);
        let x = [1.234, 7.7e-4, -123.456];
        for (a, b) in x.iter().zip(s.unscale(&s.scale(&x))) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        assert!(Scaler::new(&[(1.0, 1.0)]).is_err());
    }
}
