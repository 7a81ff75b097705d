//! Error models turning a raw factor error into a least-squares residual.
//!
//! Every model returns a residual whose squared norm is the factor's cost
//! contribution, together with its derivative with respect to the raw
//! error. The Gaussian cost carries the usual one-half, so a model with
//! raw error `e` contributes `0.5 |U (e - mu)|^2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::mixture::{log_sum_exp, upper_sqrt, GaussianMixture};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Residual and its Jacobian with respect to the raw error (rows = residual
/// dimension, columns = error dimension).
#[derive(Clone, Debug, PartialEq)]
pub struct Whitened {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RobustModel {
    Gaussian { mean: DVector<f64>, sqrt_info: DMatrix<f64> },
    SumMixture(GaussianMixture),
    MaxMixture(GaussianMixture),
    /// Dynamic covariance scaling on the whitened error `sqrt_info e`.
    Dcs { phi: f64, sqrt_info: DMatrix<f64> },
    /// Closed-form log cost on `e / sigma`.
    Cdce { sigma: f64 },
}

impl RobustModel {
    pub fn gaussian(mean: DVector<f64>, sqrt_info: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if sqrt_info.shape() != (d, d) {
            return invalid("sqrt_info shape does not match the mean");
        }
        Ok(RobustModel::Gaussian { mean, sqrt_info })
    }

    /// Zero-mean scalar Gaussian with standard deviation `sigma`.
    pub fn scalar_gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return invalid(format!("sigma must be positive, got {sigma}"));
        }
        Ok(RobustModel::Gaussian { mean: DVector::zeros(1), sqrt_info: DMatrix::from_element(1, 1, 1.0 / sigma) })
    }

    pub fn dcs(phi: f64, sqrt_info: DMatrix<f64>) -> Result<Self> {
        if !(phi > 0.0) {
            return invalid(format!("DCS phi must be positive, got {phi}"));
        }
        Ok(RobustModel::Dcs { phi, sqrt_info })
    }

    pub fn cdce(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return invalid(format!("cDCE sigma must be positive, got {sigma}"));
        }
        Ok(RobustModel::Cdce { sigma })
    }

    /// Dimension of the raw error this model accepts, if fixed.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            RobustModel::Gaussian { mean, .. } => Some(mean.len()),
            RobustModel::SumMixture(g) | RobustModel::MaxMixture(g) => Some(g.dim()),
            RobustModel::Dcs { sqrt_info, .. } => Some(sqrt_info.ncols()),
            RobustModel::Cdce { .. } => None,
        }
    }

    pub fn residual_dim(&self, input_dim: usize) -> usize {
        match self {
            RobustModel::SumMixture(_) | RobustModel::MaxMixture(_) => 1,
            _ => input_dim,
        }
    }

    /// The mixture carried by this model, if any.
    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            RobustModel::SumMixture(g) | RobustModel::MaxMixture(g) => Some(g),
            _ => None,
        }
    }

    pub fn evaluate(&self, e: &[f64]) -> Result<Whitened> {
        if let Some(d) = self.input_dim() {
            if e.len() != d {
                return invalid(format!("error has dimension {}, model expects {d}", e.len()));
            }
        }
        Ok(match self {
            RobustModel::Gaussian { mean, sqrt_info } => Whitened {
                residual: gaussian_residual(e, mean.as_slice(), sqrt_info),
                jacobian: sqrt_info * FRAC_1_SQRT_2,
            },
            RobustModel::SumMixture(g) => {
                let r = sum_mixture_residual(e, g);
                Whitened { residual: DVector::from_element(1, r), jacobian: sum_mixture_gradient(e, g, r) }
            }
            RobustModel::MaxMixture(g) => {
                let (r, k) = max_mixture_cost(e, g);
                let c = &g.components()[k];
                let jacobian = if r > 0.0 {
                    let diff = DVector::from_column_slice(e) - &c.mean;
                    row(&(c.info() * diff / (2.0 * r)))
                } else {
                    c.sqrt_info().rows(0, 1).into_owned() * FRAC_1_SQRT_2
                };
                Whitened { residual: DVector::from_element(1, r), jacobian }
            }
            RobustModel::Dcs { phi, sqrt_info } => {
                let phi = *phi;
                let white = sqrt_info * DVector::from_column_slice(e);
                let q = white.norm_squared();
                let s = dcs_weight(q, phi);
                let g = (s / 2.0).sqrt();
                // dg/dq is zero inside the clamp, -0.5 sqrt(phi) (phi + q)^-1.5 outside
                let dg = if q > phi { -0.5 * phi.sqrt() * (phi + q).powf(-1.5) } else { 0.0 };
                radial(white, sqrt_info, g, dg)
            }
            RobustModel::Cdce { sigma } => {
                let white = DVector::from_column_slice(e) / *sigma;
                let q = white.norm_squared();
                let (g, dg) = if q <= 1.0 {
                    (FRAC_1_SQRT_2, 0.0)
                } else {
                    let g = ((1.0 + q.ln()) / (2.0 * q)).sqrt();
                    (g, -q.ln() / (4.0 * g * q * q))
                };
                let scale = DMatrix::identity(e.len(), e.len()) / *sigma;
                radial(white, &scale, g, dg)
            }
        })
    }
}

/// Residual `g(q) w` for whitened `w = A e`, `q = |w|^2`, with Jacobian
/// `(g I + 2 g'(q) w w^T) A`.
fn radial(white: DVector<f64>, a: &DMatrix<f64>, g: f64, dg: f64) -> Whitened {
    let d = white.len();
    let inner = DMatrix::identity(d, d) * g + &white * white.transpose() * (2.0 * dg);
    Whitened { jacobian: inner * a, residual: white * g }
}

fn row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// `(1/sqrt 2) U (e - mu)`.
pub fn gaussian_residual(e: &[f64], mean: &[f64], sqrt_info: &DMatrix<f64>) -> DVector<f64> {
    let diff = DVector::from_column_slice(e) - DVector::from_column_slice(mean);
    sqrt_info * diff * FRAC_1_SQRT_2
}

/// `sqrt(-ln(L(e) / gamma))` with `L(e) = sum_k c_k exp(-q_k / 2)`.
pub fn sum_mixture_residual(e: &[f64], gmm: &GaussianMixture) -> f64 {
    let comps = gmm.components();
    if comps.len() == 1 {
        return (0.5 * comps[0].mahalanobis_sq(e)).sqrt();
    }
    let gamma = gmm.normalizer();
    // 1 - L/gamma as a sum of non-negative terms, accurate near the minimum
    let deficit: f64 = comps
        .iter()
        .map(|c| c.scale() / gamma * -(-0.5 * c.mahalanobis_sq(e)).exp_m1())
        .sum();
    let neg_log = if deficit < 0.5 {
        -(-deficit).ln_1p()
    } else {
        let mut terms = Vec::with_capacity(comps.len());
        gmm.log_terms(e, &mut terms);
        gamma.ln() - log_sum_exp(&terms)
    };
    neg_log.max(0.0).sqrt()
}

/// Derivative of [`sum_mixture_residual`] with respect to `e` (1 x D).
/// Where the residual is exactly zero the one-sided limit of the Gaussian
/// case is used: the first row of `(1/sqrt 2) chol(sum_k pi_k I_k)`.
pub fn sum_mixture_gradient(e: &[f64], gmm: &GaussianMixture, r: f64) -> DMatrix<f64> {
    let d = gmm.dim();
    let mut terms = Vec::with_capacity(gmm.len());
    gmm.log_terms(e, &mut terms);
    let lse = log_sum_exp(&terms);
    let x = DVector::from_column_slice(e);
    if r > 0.0 {
        let mut grad = DVector::zeros(d);
        for (c, t) in gmm.components().iter().zip(&terms) {
            let pi = (t - lse).exp();
            grad += c.info() * (&x - &c.mean) * pi;
        }
        return row(&(grad / (2.0 * r)));
    }
    let mut h = DMatrix::zeros(d, d);
    for (c, t) in gmm.components().iter().zip(&terms) {
        h += c.info() * (t - lse).exp();
    }
    let u = upper_sqrt(&h).unwrap_or_else(|| gmm.components()[0].sqrt_info().clone());
    u.rows(0, 1).into_owned() * FRAC_1_SQRT_2
}

/// Chain rule: derivative of the Sum-Mixture residual with respect to the
/// state, given `de_dx` (D x M).
pub fn sum_mixture_jacobian(e: &[f64], de_dx: &DMatrix<f64>, gmm: &GaussianMixture) -> Result<DMatrix<f64>> {
    if de_dx.nrows() != gmm.dim() || e.len() != gmm.dim() {
        return invalid("error Jacobian rows must match the mixture dimension");
    }
    let r = sum_mixture_residual(e, gmm);
    Ok(sum_mixture_gradient(e, gmm, r) * de_dx)
}

/// Max-Mixture: selects the dominant component (ties to the lower index) and
/// returns `sqrt(q*/2 + ln(c_max / c*))` with the selected index.
pub fn max_mixture_cost(e: &[f64], gmm: &GaussianMixture) -> (f64, usize) {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut c_max = 0.0f64;
    for (k, c) in gmm.components().iter().enumerate() {
        let score = c.scale().ln() - 0.5 * c.mahalanobis_sq(e);
        if score > best_score {
            best_score = score;
            best = k;
        }
        c_max = c_max.max(c.scale());
    }
    let c = &gmm.components()[best];
    let cost = 0.5 * c.mahalanobis_sq(e) + (c_max / c.scale()).ln();
    (cost.max(0.0).sqrt(), best)
}

/// DCS scale `min(1, 2 phi / (phi + r2))`.
pub fn dcs_weight(r2: f64, phi: f64) -> f64 {
    (2.0 * phi / (phi + r2)).min(1.0)
}

/// cDCE cost: `r2` up to 1, `1 + ln r2` beyond.
pub fn cdce_cost(r2: f64) -> f64 {
    if r2 <= 1.0 {
        r2
    } else {
        1.0 + r2.ln()
    }
}

const SCALAR_MAX_COMPONENTS: usize = 16;

/// Allocation-free form of a [`RobustModel`] on one-dimensional errors,
/// used on the optimizer's hot path. Agrees with [`RobustModel::evaluate`].
#[derive(Clone, Debug)]
pub struct ScalarModel {
    kind: ScalarKind,
}

#[derive(Clone, Debug)]
enum ScalarKind {
    Gaussian { mean: f64, s: f64 },
    Mixture(ScalarMixture),
    Dcs { phi: f64, s: f64 },
    Cdce { sigma: f64 },
}

#[derive(Clone, Debug)]
struct ScalarMixture {
    max: bool,
    k: usize,
    mean: [f64; SCALAR_MAX_COMPONENTS],
    info: [f64; SCALAR_MAX_COMPONENTS],
    sqrt_info: [f64; SCALAR_MAX_COMPONENTS],
    ln_c: [f64; SCALAR_MAX_COMPONENTS],
    /// `c_k / gamma`
    c_rel: [f64; SCALAR_MAX_COMPONENTS],
    ln_gamma: f64,
    ln_c_max: f64,
}

impl ScalarMixture {
    fn new(g: &GaussianMixture, max: bool) -> Option<Self> {
        let k = g.len();
        if g.dim() != 1 || k > SCALAR_MAX_COMPONENTS {
            return None;
        }
        let gamma = g.normalizer();
        let mut m = ScalarMixture {
            max,
            k,
            mean: [0.0; SCALAR_MAX_COMPONENTS],
            info: [0.0; SCALAR_MAX_COMPONENTS],
            sqrt_info: [0.0; SCALAR_MAX_COMPONENTS],
            ln_c: [0.0; SCALAR_MAX_COMPONENTS],
            c_rel: [0.0; SCALAR_MAX_COMPONENTS],
            ln_gamma: gamma.ln(),
            ln_c_max: f64::NEG_INFINITY,
        };
        let mut c_max = 0.0f64;
        for (j, c) in g.components().iter().enumerate() {
            m.mean[j] = c.mean[0];
            m.info[j] = c.info()[(0, 0)];
            m.sqrt_info[j] = c.sqrt_info()[(0, 0)];
            m.ln_c[j] = c.scale().ln();
            m.c_rel[j] = c.scale() / gamma;
            c_max = c_max.max(c.scale());
        }
        m.ln_c_max = c_max.ln();
        Some(m)
    }

    #[inline]
    fn q(&self, j: usize, e: f64) -> f64 {
        let d = e - self.mean[j];
        self.info[j] * d * d
    }

    fn evaluate_sum(&self, e: f64) -> (f64, f64) {
        if self.k == 1 {
            let r = (0.5 * self.q(0, e)).sqrt();
            let jac = if r > 0.0 { self.info[0] * (e - self.mean[0]) / (2.0 * r) } else { self.sqrt_info[0] * FRAC_1_SQRT_2 };
            return (r, jac);
        }
        let mut t_max = f64::NEG_INFINITY;
        let mut deficit = 0.0;
        for j in 0..self.k {
            let q = self.q(j, e);
            t_max = t_max.max(self.ln_c[j] - 0.5 * q);
            deficit += self.c_rel[j] * -(-0.5 * q).exp_m1();
        }
        let mut sum = 0.0;
        for j in 0..self.k {
            sum += (self.ln_c[j] - 0.5 * self.q(j, e) - t_max).exp();
        }
        let lse = t_max + sum.ln();
        let neg_log = if deficit < 0.5 { -(-deficit).ln_1p() } else { self.ln_gamma - lse };
        let r = neg_log.max(0.0).sqrt();
        let mut acc = 0.0;
        for j in 0..self.k {
            let pi = (self.ln_c[j] - 0.5 * self.q(j, e) - lse).exp();
            acc += if r > 0.0 { pi * self.info[j] * (e - self.mean[j]) } else { pi * self.info[j] };
        }
        let jac = if r > 0.0 { acc / (2.0 * r) } else { acc.sqrt() * FRAC_1_SQRT_2 };
        (r, jac)
    }

    fn evaluate_max(&self, e: f64) -> (f64, f64) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..self.k {
            let score = self.ln_c[j] - 0.5 * self.q(j, e);
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        let r = (0.5 * self.q(best, e) + (self.ln_c_max - self.ln_c[best])).max(0.0).sqrt();
        let jac = if r > 0.0 {
            self.info[best] * (e - self.mean[best]) / (2.0 * r)
        } else {
            self.sqrt_info[best] * FRAC_1_SQRT_2
        };
        (r, jac)
    }
}

impl ScalarModel {
    /// `None` unless the model acts on one-dimensional errors (and, for
    /// mixtures, has at most 16 components).
    pub fn new(model: &RobustModel) -> Option<Self> {
        if model.input_dim().is_some_and(|d| d != 1) {
            return None;
        }
        let kind = match model {
            RobustModel::Gaussian { mean, sqrt_info } => ScalarKind::Gaussian { mean: mean[0], s: sqrt_info[(0, 0)] },
            RobustModel::SumMixture(g) => ScalarKind::Mixture(ScalarMixture::new(g, false)?),
            RobustModel::MaxMixture(g) => ScalarKind::Mixture(ScalarMixture::new(g, true)?),
            RobustModel::Dcs { phi, sqrt_info } => ScalarKind::Dcs { phi: *phi, s: sqrt_info[(0, 0)] },
            RobustModel::Cdce { sigma } => ScalarKind::Cdce { sigma: *sigma },
        };
        Some(ScalarModel { kind })
    }

    /// Residual and its derivative with respect to the error.
    pub fn evaluate(&self, e: f64) -> (f64, f64) {
        match &self.kind {
            ScalarKind::Gaussian { mean, s } => (s * (e - mean) * FRAC_1_SQRT_2, s * FRAC_1_SQRT_2),
            ScalarKind::Mixture(m) if m.max => m.evaluate_max(e),
            ScalarKind::Mixture(m) => m.evaluate_sum(e),
            ScalarKind::Dcs { phi, s } => {
                let white = s * e;
                let q = white * white;
                let g = (dcs_weight(q, *phi) / 2.0).sqrt();
                let dg = if q > *phi { -0.5 * phi.sqrt() * (phi + q).powf(-1.5) } else { 0.0 };
                (g * white, (g + 2.0 * dg * q) * s)
            }
            ScalarKind::Cdce { sigma } => {
                let white = e / sigma;
                let q = white * white;
                let (g, dg) = if q <= 1.0 {
                    (FRAC_1_SQRT_2, 0.0)
                } else {
                    let g = ((1.0 + q.ln()) / (2.0 * q)).sqrt();
                    (g, -q.ln() / (4.0 * g * q * q))
                };
                (g * white, (g + 2.0 * dg * q) / sigma)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianComponent;
    use proptest::prelude::*;

    fn scalar_mixture(parts: &[(f64, f64, f64)]) -> GaussianMixture {
        GaussianMixture::normalized(parts.iter().map(|&(w, m, i)| GaussianComponent::scalar(w, m, i).unwrap()).collect())
            .unwrap()
    }

    fn kernel_direct(e: f64, parts: &[(f64, f64, f64)]) -> (f64, f64) {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut l = 0.0;
        let mut gamma = 0.0;
        for &(w, m, i) in parts {
            let c = w / total * i.sqrt();
            l += c * (-0.5 * i * (e - m) * (e - m)).exp();
            gamma += c;
        }
        (l, gamma)
    }

    #[test]
    fn gaussian_examples() {
        let u = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(gaussian_residual(&[0.0], &[0.0], &u)[0], 0.0);
        assert!((gaussian_residual(&[3.0], &[0.0], &u)[0] - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        let r1 = gaussian_residual(&[1.3], &[0.2], &u).norm_squared();
        let r2 = gaussian_residual(&[1.3], &[0.2], &(&u * 2f64.sqrt())).norm_squared();
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn sum_mixture_examples() {
        let g = scalar_mixture(&[(0.5, 0.0, 1.0), (0.5, 10.0, 1.0)]);
        let expected = (-(0.5 + 0.5 * (-50f64).exp()).ln()).sqrt();
        assert!((sum_mixture_residual(&[0.0], &g) - expected).abs() < 1e-12);
        assert!((expected - 0.832_554_611_157_697_7).abs() < 1e-9);

        let single = scalar_mixture(&[(1.0, 1.0, 4.0)]);
        let r = sum_mixture_residual(&[2.5], &single);
        assert!((r - FRAC_1_SQRT_2 * 2.0 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn single_component_models_agree() {
        let g = scalar_mixture(&[(1.0, -0.5, 2.5)]);
        let gauss = RobustModel::gaussian(DVector::from_element(1, -0.5), DMatrix::from_element(1, 1, 2.5f64.sqrt())).unwrap();
        for e in [-3.0, -0.5, 0.1, 7.0] {
            let a = sum_mixture_residual(&[e], &g);
            let (b, k) = max_mixture_cost(&[e], &g);
            let c = gauss.evaluate(&[e]).unwrap().residual[0].abs();
            assert_eq!(k, 0);
            assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_limits() {
        let single = scalar_mixture(&[(1.0, 0.0, 4.0)]);
        let j = sum_mixture_jacobian(&[0.0], &DMatrix::from_element(1, 1, 3.0), &single).unwrap();
        assert!((j[(0, 0)] - FRAC_1_SQRT_2 * 2.0 * 3.0).abs() < 1e-12);
        let j = sum_mixture_jacobian(&[-1.0], &DMatrix::identity(1, 1), &single).unwrap();
        assert!((j[(0, 0)] + FRAC_1_SQRT_2 * 2.0).abs() < 1e-12);
        let sym = scalar_mixture(&[(0.5, -2.0, 1.0), (0.5, 2.0, 1.0)]);
        let j = sum_mixture_jacobian(&[0.0], &DMatrix::identity(1, 1), &sym).unwrap();
        assert!(j[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn max_mixture_ties_and_nearest() {
        let g = scalar_mixture(&[(0.5, -1.0, 1.0), (0.5, 1.0, 1.0)]);
        assert_eq!(max_mixture_cost(&[0.0], &g).1, 0);
        assert_eq!(max_mixture_cost(&[0.2], &g).1, 1);
        assert_eq!(max_mixture_cost(&[-0.2], &g).1, 0);
    }

    #[test]
    fn dcs_and_cdce_examples() {
        assert_eq!(dcs_weight(0.0, 1.0), 1.0);
        assert_eq!(dcs_weight(1.0, 1.0), 1.0);
        assert!((dcs_weight(3.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(cdce_cost(0.0), 0.0);
        assert_eq!(cdce_cost(1.0), 1.0);
        assert!((cdce_cost(std::f64::consts::E) - 2.0).abs() < 1e-15);
        // one-sided derivatives at the knee
        let h = 1e-7;
        let left = (cdce_cost(1.0) - cdce_cost(1.0 - h)) / h;
        let right = (cdce_cost(1.0 + h) - cdce_cost(1.0)) / h;
        assert!((left - 1.0).abs() < 1e-6 && (right - 1.0).abs() < 1e-6);
    }

    #[test]
    fn robust_residual_costs_match_definitions() {
        let dcs = RobustModel::dcs(1.0, DMatrix::from_element(1, 1, 0.5)).unwrap();
        let r = dcs.evaluate(&[4.0]).unwrap().residual[0];
        // whitened 2, r2 = 4, s = 0.4, cost = s r2 / 2
        assert!((r * r - 0.4 * 4.0 / 2.0).abs() < 1e-12);
        let cdce = RobustModel::cdce(2.0).unwrap();
        let r = cdce.evaluate(&[-6.0]).unwrap().residual[0];
        assert!(r < 0.0);
        assert!((r * r - cdce_cost(9.0) / 2.0).abs() < 1e-12);
    }

    fn finite_difference(model: &RobustModel, e: &[f64]) -> DMatrix<f64> {
        let base = model.evaluate(e).unwrap();
        let mut j = DMatrix::zeros(base.residual.len(), e.len());
        for i in 0..e.len() {
            let h = 1e-6 * e[i].abs().max(1.0);
            let mut p = e.to_vec();
            let mut m = e.to_vec();
            p[i] += h;
            m[i] -= h;
            let d = (model.evaluate(&p).unwrap().residual - model.evaluate(&m).unwrap().residual) / (2.0 * h);
            j.set_column(i, &d);
        }
        j
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol * b.abs().max().max(1e-3)
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            parts in proptest::collection::vec((0.05f64..1.0, -30.0f64..30.0, 0.01f64..10.0), 1..6),
            e in -60.0f64..60.0,
        ) {
            let g = scalar_mixture(&parts);
            let r = sum_mixture_residual(&[e], &g);
            let (l, gamma) = kernel_direct(e, &parts);
            prop_assume!(l > 1e-280);
            prop_assert!(r >= 0.0);
            prop_assert!(((-r * r).exp() * gamma - l).abs() <= 1e-9 * l);
        }

        #[test]
        fn permutation_invariant(
            parts in proptest::collection::vec((0.05f64..1.0, -30.0f64..30.0, 0.01f64..10.0), 2..6),
            e in -40.0f64..40.0,
        ) {
            let mut rev = parts.clone();
            rev.reverse();
            let a = sum_mixture_residual(&[e], &scalar_mixture(&parts));
            let b = sum_mixture_residual(&[e], &scalar_mixture(&rev));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn max_versus_sum_bound(
            parts in proptest::collection::vec((0.05f64..1.0, -30.0f64..30.0, 0.01f64..10.0), 1..6),
            e in -40.0f64..40.0,
        ) {
            let g = scalar_mixture(&parts);
            let s = sum_mixture_residual(&[e], &g);
            let (m, _) = max_mixture_cost(&[e], &g);
            prop_assert!(m * m >= s * s - (g.len() as f64).ln() - 1e-9);
        }

        #[test]
        fn mixture_jacobians_match_finite_differences(
            parts in proptest::collection::vec((0.05f64..1.0, -10.0f64..10.0, 0.05f64..5.0), 1..5),
            e in -20.0f64..20.0,
            m in -3.0f64..3.0,
        ) {
            let g = scalar_mixture(&parts);
            let de_dx = DMatrix::from_row_slice(1, 2, &[m, 1.0]);
            let analytic = sum_mixture_jacobian(&[e], &de_dx, &g).unwrap();
            let r = sum_mixture_residual(&[e], &g);
            prop_assume!(r > 1e-3);
            let fd = finite_difference(&RobustModel::SumMixture(g.clone()), &[e]) * &de_dx;
            prop_assert!(close(&analytic, &fd, 1e-5), "{analytic} vs {fd}");
            let mm = RobustModel::MaxMixture(g.clone());
            let (rm, _) = max_mixture_cost(&[e], &g);
            prop_assume!(rm > 1e-3);
            let a = mm.evaluate(&[e]).unwrap().jacobian;
            prop_assert!(close(&a, &finite_difference(&mm, &[e]), 1e-5));
        }

        #[test]
        fn m_estimator_jacobians_match_finite_differences(
            e in proptest::collection::vec(-20.0f64..20.0, 2),
            phi in 0.1f64..5.0,
            sigma in 0.5f64..5.0,
        ) {
            let u = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.0, 1.1]);
            for model in [RobustModel::dcs(phi, u.clone()).unwrap(), RobustModel::cdce(sigma).unwrap()] {
                let white = match &model { RobustModel::Dcs { .. } => (&u * DVector::from_column_slice(&e)).norm_squared(), _ => DVector::from_column_slice(&e).norm_squared() / (sigma * sigma) };
                let knee = if matches!(model, RobustModel::Dcs { .. }) { phi } else { 1.0 };
                prop_assume!((white - knee).abs() > 1e-3);
                let a = model.evaluate(&e).unwrap().jacobian;
                prop_assert!(close(&a, &finite_difference(&model, &e), 1e-5));
            }
        }
    }

    proptest! {
        #[test]
        fn scalar_path_matches_general_evaluation(
            k in 1usize..6,
            params in proptest::collection::vec((0.05f64..1.0, -30.0f64..30.0, 0.005f64..2.0), 6),
            e in -80.0f64..80.0,
        ) {
            let comps: Vec<GaussianComponent> = params[..k]
                .iter()
                .map(|&(w, m, i)| GaussianComponent::scalar(w, m, i).unwrap())
                .collect();
            let g = GaussianMixture::normalized(comps).unwrap();
            let models = [
                RobustModel::SumMixture(g.clone()),
                RobustModel::MaxMixture(g),
                RobustModel::scalar_gaussian(2.5).unwrap(),
                RobustModel::dcs(1.0, DMatrix::from_element(1, 1, 0.4)).unwrap(),
                RobustModel::cdce(3.0).unwrap(),
            ];
            for m in &models {
                let fast = ScalarModel::new(m).unwrap().evaluate(e);
                let slow = m.evaluate(&[e]).unwrap();
                let (r, j) = (slow.residual[0], slow.jacobian[(0, 0)]);
                prop_assert!((fast.0 - r).abs() <= 1e-12 * r.abs().max(1.0), "{m:?}: {} vs {r}", fast.0);
                prop_assert!((fast.1 - j).abs() <= 1e-10 * j.abs().max(1.0), "{m:?}: {} vs {j}", fast.1);
            }
        }
    }
}
