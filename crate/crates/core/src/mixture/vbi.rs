//! Variational Bayesian mixture fitting without a weight prior, and the
//! complexity-learning step built on it.
//!
//! Each component k carries a Normal factor `N(m_k, Lambda_k^-1)` on its
//! mean and a Wishart factor `W(nu_k, V_k)` on its information matrix, with
//! `E[I_k] = nu_k V_k^-1`. Weights are point estimates `N_k / N`, so a
//! component that explains no data has its weight driven to zero and is
//! removed once it drops below the pruning threshold.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use super::em::{remove_lightest, HasWeight};
use super::{ln_det_spd, log_sum_exp, quad_form, spd_inverse, symmetrize, GaussianComponent, GaussianMixture, LN_2PI};
use crate::error::{invalid, Error, Result};

/// Priors shared by every component: `mu ~ N(0, (beta0 I)^-1)`, `I ~ W(nu0, V0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePriors {
    pub beta0: f64,
    pub v0: DMatrix<f64>,
    pub nu0: f64,
}

impl MixturePriors {
    pub fn new(beta0: f64, v0: DMatrix<f64>, nu0: f64) -> Result<Self> {
        let d = v0.nrows();
        if !(beta0 > 0.0) || !beta0.is_finite() {
            return invalid(format!("beta0 must be positive, got {beta0}"));
        }
        if !(nu0 >= d as f64) || !nu0.is_finite() {
            return invalid(format!("nu0 must be at least the dimension {d}, got {nu0}"));
        }
        if v0.ncols() != d || d == 0 || v0.clone().cholesky().is_none() {
            return invalid("V0 must be symmetric positive definite");
        }
        Ok(MixturePriors { beta0, v0, nu0 })
    }

    pub fn dim(&self) -> usize {
        self.v0.nrows()
    }

    /// Information matrix of a freshly added component, `nu0 V0^-1`.
    pub fn prior_information(&self) -> Result<DMatrix<f64>> {
        wishart_expectation(self.nu0, &self.v0)
    }
}

/// How the Wishart scale is derived from the error variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorScale {
    /// `V0 = var / nu0`, so the prior expected information is `nu0^2 / var`.
    #[default]
    VarianceOverDof,
    /// `V0 = nu0 var`, so the prior expected information is `1 / var`.
    MatchedInformation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorOptions {
    pub nu0: f64,
    pub beta0: f64,
    /// Lower bound on each diagonal entry of V0 (m^2).
    pub variance_floor: f64,
    pub scale: PriorScale,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions { nu0: 2.0, beta0: 1e-6, variance_floor: 1e-4, scale: PriorScale::VarianceOverDof }
    }
}

/// Build priors from error samples: `V0` is diagonal with the per-dimension
/// unbiased sample variance divided by `nu0` (or multiplied, see [`PriorScale`]).
pub fn prior_from_errors(samples: &[DVector<f64>], opts: &PriorOptions) -> Result<MixturePriors> {
    let n = samples.len();
    if n < 2 {
        return invalid(format!("need at least 2 error samples for a prior, got {n}"));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return invalid("error samples differ in dimension");
    }
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n as f64;
    let mut var = DVector::zeros(d);
    for s in samples {
        let dev = s - &mean;
        var += dev.component_mul(&dev);
    }
    var /= (n - 1) as f64;
    let diag = var.map(|v| {
        let scaled = match opts.scale {
            PriorScale::VarianceOverDof => v / opts.nu0,
            PriorScale::MatchedInformation => v * opts.nu0,
        };
        scaled.max(opts.variance_floor)
    });
    MixturePriors::new(opts.beta0, DMatrix::from_diagonal(&diag), opts.nu0)
}

/// Expected information of a Wishart factor, `nu V^-1`.
pub fn wishart_expectation(nu: f64, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(nu >= v.nrows() as f64) {
        return invalid(format!("degrees of freedom {nu} below dimension {}", v.nrows()));
    }
    let inv = spd_inverse(v).ok_or_else(|| Error::InvalidArgument("Wishart scale matrix is singular".into()))?;
    Ok(inv * nu)
}

/// `E[ln det I]` under `W(nu, V)`.
pub fn expected_log_det(nu: f64, v: &DMatrix<f64>) -> Result<f64> {
    let d = v.nrows();
    let ln_det_v = ln_det_spd(v).ok_or_else(|| Error::InvalidArgument("Wishart scale matrix is singular".into()))?;
    let psi: f64 = (1..=d).map(|i| digamma((nu + 1.0 - i as f64) / 2.0)).sum();
    Ok(psi + d as f64 * std::f64::consts::LN_2 - ln_det_v)
}

fn multi_digamma(x: f64, d: usize) -> f64 {
    (1..=d).map(|i| digamma(x + (1.0 - i as f64) / 2.0)).sum()
}

fn multi_ln_gamma(x: f64, d: usize) -> f64 {
    let d_f = d as f64;
    d_f * (d_f - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=d).map(|i| ln_gamma(x + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalComponent {
    pub weight: f64,
    pub m: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub nu: f64,
    pub v: DMatrix<f64>,
}

impl HasWeight for VariationalComponent {
    fn weight(&self) -> f64 {
        self.weight
    }
    fn set_weight(&mut self, w: f64) {
        self.weight = w;
    }
}

impl VariationalComponent {
    pub fn expected_information(&self) -> Result<DMatrix<f64>> {
        wishart_expectation(self.nu, &self.v)
    }
}

/// Factorized posterior over K components plus the responsibilities of the
/// last fit (N x K, empty before any fit).
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    dim: usize,
    components: Vec<VariationalComponent>,
    responsibilities: DMatrix<f64>,
}

impl VariationalPosterior {
    pub fn empty(dim: usize) -> Self {
        VariationalPosterior { dim, components: Vec::new(), responsibilities: DMatrix::zeros(0, 0) }
    }

    pub fn new(dim: usize, components: Vec<VariationalComponent>) -> Result<Self> {
        for c in &components {
            if c.m.len() != dim || c.lambda.shape() != (dim, dim) || c.v.shape() != (dim, dim) {
                return invalid("variational component dimension mismatch");
            }
            if !(c.weight >= 0.0) || !(c.nu >= dim as f64) {
                return invalid("variational component has negative weight or too few degrees of freedom");
            }
            if c.lambda.clone().cholesky().is_none() || c.v.clone().cholesky().is_none() {
                return invalid("variational component factors must be positive definite");
            }
        }
        if !components.is_empty() {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return invalid(format!("posterior weights sum to {total}, expected 1"));
            }
        }
        Ok(VariationalPosterior { dim, components, responsibilities: DMatrix::zeros(0, 0) })
    }

    /// Posterior that reproduces `gmm` as its expected mixture, as if each
    /// component had been fit to `n * w_k` samples.
    pub fn from_mixture(gmm: &GaussianMixture, priors: &MixturePriors, n: usize) -> Self {
        let d = gmm.dim();
        let components = gmm
            .components()
            .iter()
            .map(|c| {
                let nk = n as f64 * c.weight;
                let nu = priors.nu0 + nk;
                let v = spd_inverse(c.info()).expect("component information is SPD") * nu;
                VariationalComponent {
                    weight: c.weight,
                    m: c.mean.clone(),
                    lambda: DMatrix::identity(d, d) * priors.beta0 + c.info() * nk,
                    nu,
                    v,
                }
            })
            .collect();
        VariationalPosterior { dim: d, components, responsibilities: DMatrix::zeros(0, 0) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[VariationalComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn responsibilities(&self) -> &DMatrix<f64> {
        &self.responsibilities
    }

    /// Point mixture with means `m_k`, information `nu_k V_k^-1`, weights `w_k`.
    pub fn expected_mixture(&self) -> Result<GaussianMixture> {
        if self.components.is_empty() {
            return Err(Error::AllComponentsPruned);
        }
        let comps = self
            .components
            .iter()
            .map(|c| GaussianComponent::from_info(c.weight, c.m.clone(), symmetrize(c.expected_information()?)))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::normalized(comps)
    }
}

/// Append a prior-initialized component and give it weight `1/(K+1)`.
pub fn add_component(posterior: &VariationalPosterior, priors: &MixturePriors) -> Result<VariationalPosterior> {
    let d = posterior.dim;
    if priors.dim() != d {
        return invalid(format!("priors have dimension {}, posterior {d}", priors.dim()));
    }
    let k = posterior.len() as f64;
    let mut components = posterior.components.clone();
    for c in &mut components {
        c.weight *= k / (k + 1.0);
    }
    components.push(VariationalComponent {
        weight: 1.0 / (k + 1.0),
        m: DVector::zeros(d),
        lambda: DMatrix::identity(d, d) * priors.beta0,
        nu: priors.nu0,
        v: priors.v0.clone(),
    });
    Ok(VariationalPosterior { dim: d, components, responsibilities: DMatrix::zeros(0, 0) })
}

/// Pruning threshold policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightThreshold {
    /// `1/N` with N the current sample count.
    InverseSampleCount,
    Fixed(f64),
}

impl WeightThreshold {
    pub fn value(&self, n: usize) -> f64 {
        match *self {
            WeightThreshold::InverseSampleCount => 1.0 / n as f64,
            WeightThreshold::Fixed(w) => w,
        }
    }
}

/// Quantity whose relative change stops the VBI loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvergenceMeasure {
    /// The variational lower bound.
    #[default]
    LowerBound,
    /// Sample log-likelihood of the expected-parameter mixture.
    ExpectedLikelihood,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityConfig {
    pub k_max: usize,
    pub w_min: WeightThreshold,
    pub i_max: usize,
    pub dl_min: f64,
    pub measure: ConvergenceMeasure,
    /// Seed the first responsibility pass of every fit from the expected
    /// mixture instead of the full variational expectation. The variational
    /// form charges a fresh component `tr(E[I] Lambda^-1) ~ E[I] / beta0`,
    /// which would zero its responsibilities before it sees any data.
    pub point_estimate_start: bool,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            k_max: 8,
            w_min: WeightThreshold::InverseSampleCount,
            i_max: 1000,
            dl_min: 1e-6,
            measure: ConvergenceMeasure::LowerBound,
            point_estimate_start: true,
        }
    }
}

impl ComplexityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 || self.i_max < 1 || !(self.dl_min > 0.0) {
            return invalid("complexity config needs k_max >= 1, i_max >= 1, dl_min > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VbiFit {
    pub posterior: VariationalPosterior,
    pub iterations: usize,
    /// Value of the convergence measure after each iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Per-component quantities needed by the responsibility update.
struct Expectations {
    info: Vec<DMatrix<f64>>,
    /// `ln w + 0.5 E[ln det I] - D/2 ln 2pi - 0.5 tr(E[I] Lambda^-1)`
    offset: Vec<f64>,
    lambda_inv: Vec<DMatrix<f64>>,
    ln_det: Vec<f64>,
}

fn expectations(components: &[VariationalComponent], d: usize, point_estimate: bool) -> Result<Expectations> {
    let mut out = Expectations {
        info: Vec::with_capacity(components.len()),
        offset: Vec::with_capacity(components.len()),
        lambda_inv: Vec::with_capacity(components.len()),
        ln_det: Vec::with_capacity(components.len()),
    };
    for c in components {
        let info = symmetrize(wishart_expectation(c.nu, &c.v)?);
        let lambda_inv = spd_inverse(&c.lambda)
            .ok_or_else(|| Error::NumericalFailure("posterior mean information is not positive definite".into()))?;
        let (ln_det, trace) = if point_estimate {
            let ld = ln_det_spd(&info)
                .ok_or_else(|| Error::NumericalFailure("expected information is not positive definite".into()))?;
            (ld, 0.0)
        } else {
            (expected_log_det(c.nu, &c.v)?, (&info * &lambda_inv).trace())
        };
        out.offset.push(c.weight.ln() + 0.5 * ln_det - 0.5 * d as f64 * LN_2PI - 0.5 * trace);
        out.info.push(info);
        out.lambda_inv.push(lambda_inv);
        out.ln_det.push(ln_det);
    }
    Ok(out)
}

/// Responsibilities and the per-row log normalizers.
fn responsibilities(samples: &[DVector<f64>], components: &[VariationalComponent], ex: &Expectations) -> DMatrix<f64> {
    let k = components.len();
    let mut r = DMatrix::zeros(samples.len(), k);
    let mut terms = vec![0.0; k];
    for (i, s) in samples.iter().enumerate() {
        for j in 0..k {
            terms[j] = ex.offset[j] - 0.5 * quad_form(&ex.info[j], s.as_slice(), components[j].m.as_slice());
        }
        let lse = log_sum_exp(&terms);
        for j in 0..k {
            r[(i, j)] = (terms[j] - lse).exp();
        }
    }
    r
}

/// One literal responsibility evaluation under the current posterior.
pub fn vbi_responsibilities(samples: &[DVector<f64>], posterior: &VariationalPosterior) -> Result<DMatrix<f64>> {
    for s in samples {
        if s.len() != posterior.dim {
            return invalid("sample dimension does not match the posterior");
        }
    }
    let ex = expectations(&posterior.components, posterior.dim, false)?;
    Ok(responsibilities(samples, &posterior.components, &ex))
}

/// Cyclic mean-field updates: responsibilities, mean factors, information
/// factors, weights, then pruning, until `i_max` iterations or a relative
/// change of the convergence measure below `dl_min`.
pub fn vbi_fit(
    samples: &[DVector<f64>],
    posterior: &VariationalPosterior,
    priors: &MixturePriors,
    cfg: &ComplexityConfig,
) -> Result<VbiFit> {
    cfg.validate()?;
    let n = samples.len();
    let d = posterior.dim;
    if n == 0 {
        return invalid("vbi_fit needs at least one sample");
    }
    if posterior.is_empty() {
        return invalid("vbi_fit needs at least one component");
    }
    if priors.dim() != d || samples.iter().any(|s| s.len() != d) {
        return invalid("sample, prior and posterior dimensions disagree");
    }
    if !samples.iter().all(|s| s.iter().all(|v| v.is_finite())) {
        return invalid("samples must be finite");
    }
    let w_min = cfg.w_min.value(n);
    let mut comps = posterior.components.clone();
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.i_max {
        let first = iterations == 0;
        iterations += 1;
        let ex = expectations(&comps, d, first && cfg.point_estimate_start)?;
        let r = responsibilities(samples, &comps, &ex);

        for (j, c) in comps.iter_mut().enumerate() {
            let col = r.column(j);
            let nk: f64 = col.sum();
            let info = &ex.info[j];
            let mut weighted_sum = DVector::zeros(d);
            for (s, &rn) in samples.iter().zip(col.iter()) {
                weighted_sum.axpy(rn, s, 1.0);
            }
            let lambda = symmetrize(DMatrix::identity(d, d) * priors.beta0 + info * nk);
            let lambda_inv = spd_inverse(&lambda)
                .ok_or_else(|| Error::NumericalFailure("posterior mean information is not positive definite".into()))?;
            let m = &lambda_inv * (info * weighted_sum);
            let mut scatter = DMatrix::zeros(d, d);
            for (s, &rn) in samples.iter().zip(col.iter()) {
                let dev = s - &m;
                scatter.ger(rn, &dev, &dev, 1.0);
            }
            let v = symmetrize(&priors.v0 + scatter + &lambda_inv * nk);
            if v.clone().cholesky().is_none() {
                return Err(Error::NumericalFailure("Wishart scale lost positive definiteness".into()));
            }
            c.m = m;
            c.lambda = lambda;
            c.nu = priors.nu0 + nk;
            c.v = v;
            c.weight = nk / n as f64;
        }

        let bound = match cfg.measure {
            ConvergenceMeasure::LowerBound => Some(lower_bound(samples, &comps, &r, priors)?),
            ConvergenceMeasure::ExpectedLikelihood => None,
        };

        let keep: Vec<bool> = comps.iter().map(|c| c.weight >= w_min).collect();
        if keep.iter().all(|k| !k) {
            return Err(Error::AllComponentsPruned);
        }
        if keep.iter().any(|k| !k) {
            let mut it = keep.iter();
            comps.retain(|_| *it.next().unwrap());
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            for c in &mut comps {
                c.weight /= total;
            }
        }

        let value = match bound {
            Some(b) => b,
            None => expected_log_likelihood(samples, &comps)?,
        };
        trace.push(value);
        if let Some(p) = prev {
            if (value - p).abs() / p.abs() < cfg.dl_min {
                converged = true;
                break;
            }
        }
        prev = Some(value);
    }

    let ex = expectations(&comps, d, false)?;
    let responsibilities = responsibilities(samples, &comps, &ex);
    Ok(VbiFit {
        posterior: VariationalPosterior { dim: d, components: comps, responsibilities },
        iterations,
        trace,
        converged,
    })
}

fn expected_log_likelihood(samples: &[DVector<f64>], comps: &[VariationalComponent]) -> Result<f64> {
    let k = comps.len();
    let d = samples[0].len();
    let mut info = Vec::with_capacity(k);
    let mut offset = Vec::with_capacity(k);
    for c in comps {
        let i = symmetrize(c.expected_information()?);
        let ld = ln_det_spd(&i).ok_or_else(|| Error::NumericalFailure("expected information is singular".into()))?;
        offset.push(c.weight.ln() + 0.5 * ld - 0.5 * d as f64 * LN_2PI);
        info.push(i);
    }
    let mut terms = vec![0.0; k];
    let mut ll = 0.0;
    for s in samples {
        for j in 0..k {
            terms[j] = offset[j] - 0.5 * quad_form(&info[j], s.as_slice(), comps[j].m.as_slice());
        }
        ll += log_sum_exp(&terms);
    }
    Ok(ll)
}

/// Variational lower bound for responsibilities `r` (computed under the
/// previous parameters) and the freshly updated factors `comps`.
fn lower_bound(
    samples: &[DVector<f64>],
    comps: &[VariationalComponent],
    r: &DMatrix<f64>,
    priors: &MixturePriors,
) -> Result<f64> {
    let d = priors.dim();
    let d_f = d as f64;
    let ln_det_v0 =
        ln_det_spd(&priors.v0).ok_or_else(|| Error::NumericalFailure("V0 is not positive definite".into()))?;
    let mut bound = 0.0;
    for (j, c) in comps.iter().enumerate() {
        let info = symmetrize(c.expected_information()?);
        let lambda_inv = spd_inverse(&c.lambda)
            .ok_or_else(|| Error::NumericalFailure("posterior mean information is not positive definite".into()))?;
        let e_ln_det = expected_log_det(c.nu, &c.v)?;
        let ln_w = c.weight.ln();
        let base = 0.5 * e_ln_det - 0.5 * d_f * LN_2PI - 0.5 * (&info * &lambda_inv).trace();
        for (i, s) in samples.iter().enumerate() {
            let rn = r[(i, j)];
            if rn > 0.0 {
                bound += rn * (ln_w + base - 0.5 * quad_form(&info, s.as_slice(), c.m.as_slice()) - rn.ln());
            }
        }
        let ln_det_lambda = ln_det_spd(&c.lambda)
            .ok_or_else(|| Error::NumericalFailure("posterior mean information is not positive definite".into()))?;
        let kl_mean = 0.5
            * (priors.beta0 * lambda_inv.trace() + priors.beta0 * c.m.norm_squared() - d_f + ln_det_lambda
                - d_f * priors.beta0.ln());
        let ln_det_v = ln_det_spd(&c.v).ok_or_else(|| Error::NumericalFailure("V is not positive definite".into()))?;
        let v_inv = spd_inverse(&c.v).ok_or_else(|| Error::NumericalFailure("V is not positive definite".into()))?;
        let kl_info = (c.nu - priors.nu0) / 2.0 * multi_digamma(c.nu / 2.0, d) - multi_ln_gamma(c.nu / 2.0, d)
            + multi_ln_gamma(priors.nu0 / 2.0, d)
            + priors.nu0 / 2.0 * (ln_det_v - ln_det_v0)
            + c.nu / 2.0 * ((&priors.v0 * v_inv).trace() - d_f);
        bound -= kl_mean + kl_info;
    }
    Ok(bound)
}

/// One complexity-learning step: copy the previous posterior, drop its
/// lightest component if it is at `k_max`, add a prior-initialized one and
/// refit with pruning.
pub fn complexity_learning(
    samples: &[DVector<f64>],
    previous: &VariationalPosterior,
    priors: &MixturePriors,
    cfg: &ComplexityConfig,
) -> Result<VbiFit> {
    cfg.validate()?;
    let mut start = previous.clone();
    if start.len() >= cfg.k_max {
        remove_lightest(&mut start.components);
    }
    let start = add_component(&start, priors)?;
    vbi_fit(samples, &start, priors, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::em::{em_fit, EmOptions};
    use crate::mixture::scalar_samples;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(seed: u64, n: usize, mean: f64, std: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + std * z
            })
            .collect()
    }

    fn scalar_priors(beta0: f64, v0: f64, nu0: f64) -> MixturePriors {
        MixturePriors::new(beta0, DMatrix::from_element(1, 1, v0), nu0).unwrap()
    }

    #[test]
    fn wishart_expectation_examples() {
        let e = wishart_expectation(2.0, &(DMatrix::identity(1, 1) * 2.0)).unwrap();
        assert!((e[(0, 0)] - 1.0).abs() < 1e-15);
        let e = wishart_expectation(4.0, &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]))).unwrap();
        assert!((e - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]))).abs().max() < 1e-15);
        assert!(wishart_expectation(2.0, &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn wishart_expectation_with_error_prior() {
        // V0 = var/nu0 gives E[I] = nu0 / V0 = nu0^2 / var, i.e. 4/var at nu0 = 2.
        let var = 9.0;
        let e = wishart_expectation(2.0, &DMatrix::from_element(1, 1, var / 2.0)).unwrap();
        assert!((e[(0, 0)] - 4.0 / var).abs() < 1e-15);
        // Matched scale recovers 1/var.
        let e = wishart_expectation(2.0, &DMatrix::from_element(1, 1, var * 2.0)).unwrap();
        assert!((e[(0, 0)] - 1.0 / var).abs() < 1e-15);
    }

    #[test]
    fn prior_examples() {
        // unbiased variance 12
        let s = scalar_samples(&[-3.0, 3.0, -3.0, 3.0]);
        let p = prior_from_errors(&s, &PriorOptions::default()).unwrap();
        assert!((p.v0[(0, 0)] - 12.0 / 2.0).abs() < 1e-12);
        let s = scalar_samples(&[0.0, 6.0, 0.0, 6.0, 0.0, 6.0, 0.0, 6.0, 3.0]);
        // unbiased variance 9
        let p = prior_from_errors(&s, &PriorOptions::default()).unwrap();
        assert!((p.v0[(0, 0)] - 4.5).abs() < 1e-12);
        assert_eq!(p.nu0, 2.0);
        let p = prior_from_errors(&scalar_samples(&[1.0; 10]), &PriorOptions::default()).unwrap();
        assert_eq!(p.v0[(0, 0)], 1e-4);
        assert!(prior_from_errors(&scalar_samples(&[1.0]), &PriorOptions::default()).is_err());
    }

    #[test]
    fn add_component_examples() {
        let priors = scalar_priors(1e-6, 4.5, 2.0);
        let one = add_component(&VariationalPosterior::empty(1), &priors).unwrap();
        assert_eq!(one.weights(), vec![1.0]);
        let two = add_component(&one, &priors).unwrap();
        assert_eq!(two.weights(), vec![0.5, 0.5]);
        let fresh = &two.components()[1];
        assert_eq!(fresh.m[0], 0.0);
        assert_eq!(fresh.expected_information().unwrap(), priors.prior_information().unwrap());
    }

    /// Scalar responsibilities written directly from the update formula.
    fn scalar_rho(e: f64, w: &[f64], m: &[f64], lambda: &[f64], nu: &[f64], v: &[f64]) -> Vec<f64> {
        let ln_rho: Vec<f64> = (0..w.len())
            .map(|k| {
                let ei = nu[k] / v[k];
                let eld = digamma(nu[k] / 2.0) + 2f64.ln() - v[k].ln();
                w[k].ln() + 0.5 * eld - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * (ei * (e - m[k]).powi(2) + ei / lambda[k])
            })
            .collect();
        let max = ln_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ln_rho.iter().map(|l| (l - max).exp()).sum();
        ln_rho.iter().map(|l| (l - max).exp() / z).collect()
    }

    proptest! {
        #[test]
        fn responsibilities_match_scalar_formula(
            e in proptest::collection::vec(-20.0f64..20.0, 1..=20),
            params in proptest::collection::vec((0.1f64..1.0, -10.0f64..10.0, 0.01f64..100.0, 1.0f64..50.0, 0.1f64..50.0), 1..=2),
        ) {
            let total: f64 = params.iter().map(|p| p.0).sum();
            let comps: Vec<VariationalComponent> = params.iter().map(|&(w, m, l, nu, v)| VariationalComponent {
                weight: w / total,
                m: DVector::from_element(1, m),
                lambda: DMatrix::from_element(1, 1, l),
                nu,
                v: DMatrix::from_element(1, 1, v),
            }).collect();
            let post = VariationalPosterior::new(1, comps.clone()).unwrap();
            let r = vbi_responsibilities(&scalar_samples(&e), &post).unwrap();
            let w: Vec<f64> = comps.iter().map(|c| c.weight).collect();
            let m: Vec<f64> = comps.iter().map(|c| c.m[0]).collect();
            let l: Vec<f64> = comps.iter().map(|c| c.lambda[(0, 0)]).collect();
            let nu: Vec<f64> = comps.iter().map(|c| c.nu).collect();
            let v: Vec<f64> = comps.iter().map(|c| c.v[(0, 0)]).collect();
            for (i, &x) in e.iter().enumerate() {
                let oracle = scalar_rho(x, &w, &m, &l, &nu, &v);
                let row_sum: f64 = r.row(i).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12);
                for k in 0..w.len() {
                    prop_assert!(r[(i, k)] >= 0.0);
                    prop_assert!((r[(i, k)] - oracle[k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn weights_stay_normalized_and_above_threshold() {
        let s = scalar_samples(&normal_samples(3, 500, 0.0, 1.0));
        let priors = prior_from_errors(&s, &PriorOptions::default()).unwrap();
        let mut post = VariationalPosterior::empty(1);
        for _ in 0..3 {
            let fit = complexity_learning(&s, &post, &priors, &ComplexityConfig::default()).unwrap();
            post = fit.posterior;
            let total: f64 = post.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(post.weights().iter().all(|&w| w >= 1.0 / 500.0));
            assert!(post.len() <= 8);
            let r = post.responsibilities();
            assert_eq!(r.shape(), (500, post.len()));
            for i in 0..500 {
                assert!((r.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_threshold_zero_keeps_components() {
        let s = scalar_samples(&normal_samples(4, 300, 0.0, 1.0));
        let init = GaussianMixture::from_quantiles(&s, 3, 1e-6).unwrap();
        let priors = prior_from_errors(&s, &PriorOptions::default()).unwrap();
        let post = VariationalPosterior::from_mixture(&init, &priors, s.len());
        let cfg = ComplexityConfig { w_min: WeightThreshold::Fixed(0.0), ..Default::default() };
        let fit = vbi_fit(&s, &post, &priors, &cfg).unwrap();
        assert_eq!(fit.posterior.len(), 3);
    }

    #[test]
    fn weak_prior_matches_em() {
        let mut v = normal_samples(11, 600, -4.0, 1.0);
        v.extend(normal_samples(12, 400, 6.0, 1.5));
        let s = scalar_samples(&v);
        let init = GaussianMixture::from_quantiles(&s, 2, 1e-6).unwrap();
        let em = em_fit(&s, &init, &EmOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let priors = scalar_priors(1e-12, 1e-9, 1.0);
        let post = VariationalPosterior::from_mixture(&init, &priors, s.len());
        let cfg = ComplexityConfig { dl_min: 1e-12, ..Default::default() };
        let fit = vbi_fit(&s, &post, &priors, &cfg).unwrap();
        assert_eq!(fit.posterior.len(), 2);
        for (a, b) in fit.posterior.components().iter().zip(em.mixture.components()) {
            assert!((a.m[0] - b.mean[0]).abs() < 1e-2, "{} vs {}", a.m[0], b.mean[0]);
        }
    }

    #[test]
    fn all_pruned_is_an_error() {
        let s = scalar_samples(&[0.0, 1.0]);
        let priors = scalar_priors(1e-6, 1.0, 2.0);
        let post = add_component(&VariationalPosterior::empty(1), &priors).unwrap();
        let cfg = ComplexityConfig { w_min: WeightThreshold::Fixed(2.0), ..Default::default() };
        assert!(matches!(vbi_fit(&s, &post, &priors, &cfg), Err(Error::AllComponentsPruned)));
    }

    #[test]
    fn lower_bound_trace_is_finite() {
        let s = scalar_samples(&normal_samples(5, 200, 1.0, 2.0));
        let priors = prior_from_errors(&s, &PriorOptions::default()).unwrap();
        let post = add_component(&VariationalPosterior::empty(1), &priors).unwrap();
        let fit = vbi_fit(&s, &post, &priors, &ComplexityConfig::default()).unwrap();
        assert!(fit.trace.iter().all(|v| v.is_finite()));
        assert!((fit.posterior.components()[0].m[0] - 1.0).abs() < 0.5);
    }
}
