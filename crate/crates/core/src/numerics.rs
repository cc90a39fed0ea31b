//! Numerically stable scalar and vector primitives shared by the losses and metrics.
//!
//! Everything here works in `f64`. Angles are obtained from a cosine clamped to
//! `[-1 + COS_CLAMP, 1 - COS_CLAMP]` so that `arccos` and its derivative stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance kept from `±1` before taking `arccos`.
pub const COS_CLAMP: f64 = 1e-7;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `log Σ exp(v_i)` with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log_sum_exp(v) - v[target]`, accurate to a few ulps of the result itself rather than of
/// the largest logit.
pub fn cross_entropy(v: &[f64], target: usize) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let (arg, max) = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    Ok((max - v[target]) + rest.ln_1p())
}

pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|x| (x - lse).exp()).collect())
}

/// Clamps a cosine into the open interval used before `arccos`.
/// Returns the clamped value and whether clamping was active.
#[inline]
pub fn clamp_cos(cos: f64) -> (f64, bool) {
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    if cos > hi {
        (hi, true)
    } else if cos < lo {
        (lo, true)
    } else {
        (cos, false)
    }
}

/// Cosine similarity (clamped) and the angle between `z` and `w`.
pub fn cosine_and_angle(z: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    if z.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            actual: w.len(),
        });
    }
    let nz = norm(z);
    let nw = norm(w);
    if nz == 0.0 || nw == 0.0 || !nz.is_finite() || !nw.is_finite() {
        return Err(Error::DegenerateVector);
    }
    let (cos, _) = clamp_cos(dot(z, w) / (nz * nw));
    Ok((cos, cos.acos()))
}

/// Plain cosine similarity without clamping; zero vectors score 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{LN_2, PI};

    #[test]
    fn log_sum_exp_uniform() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_large_entries() {
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (1000.0 + LN_2)).abs() < 1e-12);
        assert!(log_sum_exp(&[1e8, -1e8, 1e8]).unwrap().is_finite());
    }

    #[test]
    fn log_sum_exp_empty() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyVector)));
        assert_eq!(log_sum_exp(&[]).unwrap_err().to_string(), "empty vector");
        assert!(stable_softmax(&[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let (c, t) = cosine_and_angle(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-6 && t.abs() < 1e-3);
        let (c, t) = cosine_and_angle(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
        assert!((t - PI / 2.0).abs() < 1e-15);
        let (c, t) = cosine_and_angle(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((c + 1.0).abs() < 1e-6 && (t - PI).abs() < 1e-3);
        assert!(c > -1.0 && t < PI);
    }

    #[test]
    fn cosine_degenerate() {
        let err = cosine_and_angle(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate vector");
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = stable_softmax(&[5.0, 1005.0]).unwrap();
        assert!(p[0] < 1e-300 && (p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Direct exp(v_i) / Σ exp(v_j) is exact enough for small magnitudes.
        let v = [0.3, -1.2, 2.5, 0.0, -0.7];
        let denom: f64 = v.iter().map(|x: &f64| x.exp()).sum();
        let p = stable_softmax(&v).unwrap();
        for (pi, vi) in p.iter().zip(&v) {
            assert!((pi - vi.exp() / denom).abs() < 1e-15);
        }
    }

    fn any_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![-10.0..10.0f64, -1e6..1e6f64, -1e8..1e8f64],
            1..20,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one(v in any_vec()) {
            let p = stable_softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }

        #[test]
        fn softmax_equals_exp_minus_lse(v in prop::collection::vec(-30.0..30.0f64, 1..12)) {
            let p = stable_softmax(&v).unwrap();
            let lse = log_sum_exp(&v).unwrap();
            for (pi, vi) in p.iter().zip(&v) {
                prop_assert!(*pi > 0.0);
                prop_assert!((pi - (vi - lse).exp()).abs() <= 1e-15);
            }
        }

        #[test]
        fn log_sum_exp_shift(v in prop::collection::vec(-100.0..100.0f64, 1..20), c in -1e3..1e3f64) {
            let a = log_sum_exp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = log_sum_exp(&shifted).unwrap();
            prop_assert!(((b - (a + c)) / b.abs().max(1.0)).abs() < 1e-12);
        }

        #[test]
        fn cosine_range(z in prop::collection::vec(-5.0..5.0f64, 3), w in prop::collection::vec(-5.0..5.0f64, 3)) {
            prop_assume!(norm(&z) > 1e-9 && norm(&w) > 1e-9);
            let (c, t) = cosine_and_angle(&z, &w).unwrap();
            prop_assert!(c >= -1.0 + COS_CLAMP && c <= 1.0 - COS_CLAMP);
            prop_assert!((0.0..=PI).contains(&t));
        }
    }
}
