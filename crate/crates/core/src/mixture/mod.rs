//! Gaussian mixtures over a residual space and their estimation.
//!
//! A [`GaussianMixture`] stores each component by weight, mean and
//! information matrix (the inverse covariance); the upper-triangular square
//! root of the information is cached because every consumer downstream
//! (densities, the Sum-Mixture residual, the solver) works with it.
//!
//! Estimation comes in three flavours:
//!
//! - [`em`]: maximum-likelihood EM with a covariance floor.
//! - [`vbi`]: variational Bayes with a Normal prior on each mean and a
//!   Wishart prior on each information matrix, no Dirichlet prior on the
//!   weights (so weights can collapse to zero and be pruned).
//! - [`vbi::complexity_learning`]: one add-a-component-then-fit step that
//!   lets the number of components follow the data over time.

pub mod em;
pub mod text;
pub mod vbi;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One weighted Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    info: DMatrix<f64>,
    sqrt_info: DMatrix<f64>,
}

impl GaussianComponent {
    /// Build from an information matrix; it must be symmetric positive definite.
    pub fn from_info(weight: f64, mean: DVector<f64>, info: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return invalid("component dimension must be at least 1");
        }
        if info.nrows() != d || info.ncols() != d {
            return invalid(format!(
                "information matrix is {}x{}, mean has dimension {d}",
                info.nrows(),
                info.ncols()
            ));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return invalid(format!("component weight must be non-negative, got {weight}"));
        }
        if !mean.iter().chain(info.iter()).all(|v| v.is_finite()) {
            return invalid("component parameters must be finite");
        }
        if (&info - info.transpose()).abs().max() > 1e-9 * info.abs().max() {
            return invalid("information matrix is not symmetric");
        }
        let sqrt_info = upper_sqrt(&info)
            .ok_or_else(|| Error::InvalidArgument("information matrix is not positive definite".into()))?;
        Ok(GaussianComponent { weight, mean, info, sqrt_info })
    }

    /// Build from a covariance matrix.
    pub fn from_covariance(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let info = spd_inverse(&cov)
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        Self::from_info(weight, mean, info)
    }

    /// Scalar component with mean `mean` and information `info` (1/m^2).
    pub fn scalar(weight: f64, mean: f64, info: f64) -> Result<Self> {
        Self::from_info(weight, DVector::from_element(1, mean), DMatrix::from_element(1, 1, info))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn info(&self) -> &DMatrix<f64> {
        &self.info
    }

    /// Upper-triangular `U` with `U^T U = info`.
    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    pub fn det_sqrt_info(&self) -> f64 {
        self.sqrt_info.diagonal().product()
    }

    /// `c_k = w_k det(sqrt_info_k)`.
    pub fn scale(&self) -> f64 {
        self.weight * self.det_sqrt_info()
    }

    /// Squared Mahalanobis distance `|U (e - mean)|^2`.
    pub fn mahalanobis_sq(&self, e: &[f64]) -> f64 {
        quad_form(&self.info, e, self.mean.as_slice())
    }
}

/// K weighted Gaussians over a D-dimensional space; the weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    /// Validate; the weights must already sum to one within 1e-12.
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return invalid("a mixture needs at least one component");
        };
        let d = first.dim();
        if components.iter().any(|c| c.dim() != d) {
            return invalid("mixture components differ in dimension");
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(GaussianMixture { components })
    }

    /// Like [`GaussianMixture::new`] but rescales weights with any positive total.
    pub fn normalized(mut components: Vec<GaussianComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return invalid("mixture weights must have a positive finite sum");
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    /// Single zero-mean standard component, mostly useful in tests.
    pub fn standard(dim: usize) -> Self {
        let c = GaussianComponent::from_info(1.0, DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity information is valid");
        GaussianMixture { components: vec![c] }
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub(crate) fn check_dim(&self, e: &DVector<f64>) -> Result<()> {
        if e.len() != self.dim() {
            return invalid(format!(
                "residual has dimension {}, mixture has dimension {}",
                e.len(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// Normalization constant `gamma = sum_k w_k det(sqrt_info_k)`.
    pub fn normalizer(&self) -> f64 {
        self.components.iter().map(GaussianComponent::scale).sum()
    }

    /// Per-component log terms `ln c_k - 0.5 |U_k (e - mu_k)|^2`.
    pub(crate) fn log_terms(&self, e: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.components
                .iter()
                .map(|c| c.scale().ln() - 0.5 * c.mahalanobis_sq(e)),
        );
    }

    /// Unnormalized likelihood kernel `L(e) = sum_k c_k exp(-0.5 q_k)`.
    pub fn kernel(&self, e: &DVector<f64>) -> Result<f64> {
        self.check_dim(e)?;
        let mut terms = Vec::with_capacity(self.len());
        self.log_terms(e.as_slice(), &mut terms);
        Ok(log_sum_exp(&terms).exp())
    }

    /// Probability density of the mixture at `e`.
    pub fn density(&self, e: &DVector<f64>) -> Result<f64> {
        let d = self.dim() as f64;
        Ok(self.kernel(e)? * (-0.5 * d * LN_2PI).exp())
    }

    /// Log density, evaluated without underflow.
    pub fn log_density(&self, e: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.len());
        self.log_terms(e, &mut terms);
        log_sum_exp(&terms) - 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Sample log-likelihood `sum_n ln p(e_n)`.
    pub fn log_likelihood(&self, samples: &[DVector<f64>]) -> f64 {
        samples.iter().map(|e| self.log_density(e.as_slice())).sum()
    }

    /// Evenly sized contiguous groups along the first coordinate give the
    /// means and weights; every component starts with the pooled sample
    /// covariance (floored). Deterministic starting point for EM and VBI
    /// that stays well conditioned when groups hold only a few samples.
    pub fn from_quantiles(samples: &[DVector<f64>], k: usize, covariance_floor: f64) -> Result<Self> {
        let n = samples.len();
        if k == 0 {
            return invalid("component count must be at least 1");
        }
        if n < k {
            return invalid(format!("need at least {k} samples, got {n}"));
        }
        let d = samples[0].len();
        let total_mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let r = s - &total_mean;
            cov += &r * r.transpose();
        }
        cov /= n as f64;
        let cov = floor_eigenvalues(&cov, covariance_floor);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| samples[a][0].total_cmp(&samples[b][0]));
        let mut components = Vec::with_capacity(k);
        for g in 0..k {
            let idx = &order[g * n / k..(g + 1) * n / k];
            let m = idx.len() as f64;
            let mean = idx.iter().fold(DVector::zeros(d), |acc, &i| acc + &samples[i]) / m;
            components.push(GaussianComponent::from_covariance(m / n as f64, mean, cov.clone())?);
        }
        GaussianMixture::normalized(components)
    }
}

/// Wrap scalar samples into one-dimensional vectors.
pub fn scalar_samples(values: &[f64]) -> Vec<DVector<f64>> {
    values.iter().map(|&v| DVector::from_element(1, v)).collect()
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `(e - m)^T A (e - m)` without allocating.
pub(crate) fn quad_form(a: &DMatrix<f64>, e: &[f64], m: &[f64]) -> f64 {
    let d = e.len();
    if d == 1 {
        let r = e[0] - m[0];
        return a[(0, 0)] * r * r;
    }
    let mut acc = 0.0;
    for i in 0..d {
        let ri = e[i] - m[i];
        let mut row = 0.0;
        for j in 0..d {
            row += a[(i, j)] * (e[j] - m[j]);
        }
        acc += ri * row;
    }
    acc
}

/// Upper-triangular square root `U` with `U^T U = a`.
pub(crate) fn upper_sqrt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    Some(chol.l().transpose())
}

pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().cholesky()?.inverse();
    Some(symmetrize(inv))
}

pub(crate) fn ln_det_spd(a: &DMatrix<f64>) -> Option<f64> {
    let chol = a.clone().cholesky()?;
    Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub(crate) fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Clamp the eigenvalues of a symmetric matrix from below.
pub(crate) fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if a.nrows() == 1 {
        return DMatrix::from_element(1, 1, a[(0, 0)].max(floor));
    }
    let eig = symmetrize(a.clone()).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
        (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_mixture(parts: &[(f64, f64, f64)]) -> GaussianMixture {
        GaussianMixture::normalized(
            parts
                .iter()
                .map(|&(w, m, i)| GaussianComponent::scalar(w, m, i).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn density_examples() {
        let g = GaussianMixture::standard(1);
        assert!((g.density(&v1(0.0)).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);

        let g = scalar_mixture(&[(0.5, -1.0, 1.0), (0.5, 1.0, 1.0)]);
        let expected = 0.5 * normal_pdf(0.0, -1.0, 1.0) + 0.5 * normal_pdf(0.0, 1.0, 1.0);
        assert!((g.density(&v1(0.0)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.241_970_724_519_143_37).abs() < 1e-12);

        assert!(g.density(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(GaussianMixture::standard(1).normalizer(), 1.0);
        // sqrt_info (1, 2) means information (1, 4)
        let g = scalar_mixture(&[(0.5, 0.0, 1.0), (0.5, 3.0, 4.0)]);
        assert!((g.normalizer() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_mixtures() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![GaussianComponent::scalar(0.7, 0.0, 1.0).unwrap()]).is_err());
        assert!(GaussianComponent::scalar(1.0, 0.0, -1.0).is_err());
        assert!(GaussianComponent::scalar(-0.1, 0.0, 1.0).is_err());
        let a = GaussianComponent::scalar(0.5, 0.0, 1.0).unwrap();
        let b = GaussianComponent::from_info(0.5, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(GaussianMixture::new(vec![a, b]).is_err());
    }

    #[test]
    fn multivariate_density_matches_closed_form() {
        let info = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = GaussianComponent::from_info(1.0, DVector::from_vec(vec![1.0, -1.0]), info.clone()).unwrap();
        assert!((c.sqrt_info().transpose() * c.sqrt_info() - &info).abs().max() < 1e-12);
        let g = GaussianMixture::new(vec![c]).unwrap();
        let e = DVector::from_vec(vec![0.3, 0.2]);
        let r = &e - DVector::from_vec(vec![1.0, -1.0]);
        let q = (r.transpose() * &info * &r)[(0, 0)];
        let expected = info.determinant().sqrt() / (2.0 * std::f64::consts::PI) * (-0.5 * q).exp();
        assert!((g.density(&e).unwrap() - expected).abs() < 1e-14);
    }

    /// Mass of the mixture over [a, b] by composite Simpson quadrature of the
    /// component pdfs written out independently of the mixture code.
    fn simpson_mass(parts: &[(f64, f64, f64)], a: f64, b: f64, n: usize) -> f64 {
        let f = |x: f64| -> f64 {
            parts.iter().map(|&(w, m, info)| w * normal_pdf(x, m, 1.0 / info)).sum()
        };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn density_is_derivative_of_integrated_mass() {
        let parts = [(0.6, -2.0, 0.8), (0.3, 1.5, 4.0), (0.1, 6.0, 0.05)];
        let g = scalar_mixture(&parts);
        for &x in &[-3.0, -0.4, 1.5, 2.2, 7.0] {
            // central difference of the quadrature mass with one Richardson step
            let diff = |h: f64| simpson_mass(&parts, x - h, x + h, 2_000) / (2.0 * h);
            let numeric = (4.0 * diff(5e-3) - diff(1e-2)) / 3.0;
            let analytic = g.density(&v1(x)).unwrap();
            assert!((numeric - analytic).abs() < 1e-8, "x={x}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn quantile_init_splits_sorted_samples() {
        let s = scalar_samples(&[5.0, 1.0, 2.0, 6.0, 0.0, 7.0]);
        let g = GaussianMixture::from_quantiles(&s, 2, 1e-6).unwrap();
        assert!((g.components()[0].mean[0] - 1.0).abs() < 1e-12);
        assert!((g.components()[1].mean[0] - 6.0).abs() < 1e-12);
        assert!(GaussianMixture::from_quantiles(&s, 7, 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn normalizer_bounds_kernel(
            parts in proptest::collection::vec((0.05f64..1.0, -20.0f64..20.0, 0.01f64..10.0), 1..5),
            points in proptest::collection::vec(-50.0f64..50.0, 1000),
        ) {
            let g = scalar_mixture(&parts);
            let gamma = g.normalizer();
            for p in points {
                prop_assert!(g.kernel(&v1(p)).unwrap() <= gamma * (1.0 + 1e-12));
            }
        }
    }
}
