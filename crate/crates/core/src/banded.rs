//! Symmetric banded matrices and their Cholesky factorization.
//!
//! The normal equations of a sliding window only couple neighbouring
//! states, so the Hessian is banded with a half-bandwidth of a few state
//! blocks. Only the lower band is stored, column by column.

#[derive(Clone, Debug)]
pub(crate) struct BandMatrix {
    n: usize,
    /// Half-bandwidth: entries with `i - j > bw` are zero.
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        BandMatrix { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.bw);
        j * (self.bw + 1) + (i - j)
    }

    /// Entry `(i, j)` of the symmetric matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to the lower-triangle entry `(i, j)`, `i >= j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, v) in d.iter().enumerate() {
            self.add_lower(i, i, *v);
        }
    }

    /// In-place Cholesky `A = L L^T`; `None` if `A` is not positive definite.
    pub fn cholesky(mut self) -> Option<BandCholesky> {
        let n = self.n;
        let bw = self.bw;
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = d;
            let hi = (j + bw).min(n - 1);
            for i in j + 1..=hi {
                let mut s = self.data[self.idx(i, j)];
                for k in i.saturating_sub(bw).max(lo)..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / d;
            }
        }
        Some(BandCholesky { l: self })
    }
}

pub(crate) struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.n;
        let bw = self.l.bw;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..=(i + bw).min(n - 1) {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_dense_solve(
            n in 1usize..30,
            bw in 0usize..6,
            seed in proptest::collection::vec(-1.0f64..1.0, 30 * 7),
            rhs in proptest::collection::vec(-10.0f64..10.0, 30),
        ) {
            let mut band = BandMatrix::zeros(n, bw);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                for i in j..=(j + band.bw).min(n - 1) {
                    let v = if i == j { 10.0 + seed[j * 7].abs() } else { seed[j * 7 + (i - j)] };
                    band.add_lower(i, j, v);
                    dense[(i, j)] = v;
                    dense[(j, i)] = v;
                }
            }
            let x = band.cholesky().unwrap().solve(&rhs[..n]);
            let expected = dense.cholesky().unwrap().solve(&DVector::from_column_slice(&rhs[..n]));
            for i in 0..n {
                prop_assert!((x[i] - expected[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut m = BandMatrix::zeros(2, 1);
        m.add_lower(0, 0, 1.0);
        m.add_lower(1, 0, 2.0);
        m.add_lower(1, 1, 1.0);
        assert!(m.cholesky().is_none());
    }
}
