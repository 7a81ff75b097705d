//! Maximum-likelihood mixture fitting by expectation maximization.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{floor_eigenvalues, log_sum_exp, GaussianComponent, GaussianMixture};
use crate::error::{invalid, Error, Result};

/// Components whose effective sample count falls below this are degenerate.
const DEGENERATE_COUNT: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood gain falls below this.
    pub tol: f64,
    /// Lower bound on every covariance eigenvalue (m^2).
    pub covariance_floor: f64,
    /// Remove components whose weight drops below this after each M-step.
    pub prune_below: Option<f64>,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iter: 1000, tol: 1e-6, covariance_floor: 1e-6, prune_below: None }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Sample log-likelihood before the first M-step and after each one.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    /// Set when some component lost (almost) all of its support.
    pub degenerate: bool,
}

/// Fit a mixture to `samples` starting from `init`; K is taken from `init`.
pub fn em_fit(samples: &[DVector<f64>], init: &GaussianMixture, opts: &EmOptions) -> Result<EmFit> {
    let n = samples.len();
    if n == 0 {
        return invalid("em_fit needs at least one sample");
    }
    if n < init.len() && opts.prune_below.is_none() {
        return invalid(format!("em_fit with K={} needs at least K samples, got {n}", init.len()));
    }
    for s in samples {
        init.check_dim(s)?;
    }
    if !samples.iter().all(|s| s.iter().all(|v| v.is_finite())) {
        return invalid("samples must be finite");
    }
    let d = init.dim();
    let mut mixture = init.clone();
    let mut resp = DMatrix::zeros(n, mixture.len());
    let mut ll = e_step(&mixture, samples, &mut resp);
    let mut ll_trace = vec![ll];
    let mut degenerate = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let k = mixture.len();
        let mut components = Vec::with_capacity(k);
        for j in 0..k {
            let col = resp.column(j);
            let nk: f64 = col.sum();
            let old = &mixture.components()[j];
            if nk < DEGENERATE_COUNT {
                degenerate = true;
                let cov = DMatrix::identity(d, d) * opts.covariance_floor;
                components.push(GaussianComponent::from_covariance(nk / n as f64, old.mean.clone(), cov)?);
                continue;
            }
            let mut mean = DVector::zeros(d);
            for (s, &r) in samples.iter().zip(col.iter()) {
                mean.axpy(r, s, 1.0);
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for (s, &r) in samples.iter().zip(col.iter()) {
                let dev = s - &mean;
                cov.ger(r, &dev, &dev, 1.0);
            }
            cov /= nk;
            let cov = floor_eigenvalues(&cov, opts.covariance_floor);
            components.push(GaussianComponent::from_covariance(nk / n as f64, mean, cov)?);
        }
        if let Some(w_min) = opts.prune_below {
            components.retain(|c| c.weight >= w_min);
            if components.is_empty() {
                return Err(Error::AllComponentsPruned);
            }
        }
        mixture = GaussianMixture::normalized(components)?;
        if resp.ncols() != mixture.len() {
            resp = DMatrix::zeros(n, mixture.len());
        }
        let new_ll = e_step(&mixture, samples, &mut resp);
        ll_trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain.abs() <= opts.tol * ll.abs().max(1.0) {
            break;
        }
    }
    if degenerate {
        warn!("em_fit: degenerate component, covariance floor applied");
    }
    Ok(EmFit { mixture, ll_trace, iterations, degenerate })
}

/// Fill `resp` with responsibilities and return the sample log-likelihood.
fn e_step(mixture: &GaussianMixture, samples: &[DVector<f64>], resp: &mut DMatrix<f64>) -> f64 {
    let mut terms = Vec::with_capacity(mixture.len());
    let mut ll = 0.0;
    for (i, s) in samples.iter().enumerate() {
        mixture.log_terms(s.as_slice(), &mut terms);
        let lse = log_sum_exp(&terms);
        for (j, t) in terms.iter().enumerate() {
            resp[(i, j)] = (t - lse).exp();
        }
        ll += lse;
    }
    ll - samples.len() as f64 * 0.5 * mixture.dim() as f64 * super::LN_2PI
}

/// One EM flavoured complexity-learning step: drop the lightest component
/// when at `k_max`, add a zero-mean component with information `new_info`,
/// then run EM with pruning below `w_min`.
pub fn em_complexity_learning(
    samples: &[DVector<f64>],
    previous: Option<&GaussianMixture>,
    new_info: DMatrix<f64>,
    k_max: usize,
    w_min: f64,
    opts: &EmOptions,
) -> Result<EmFit> {
    let d = new_info.nrows();
    let mut components: Vec<GaussianComponent> = previous.map(|m| m.components().to_vec()).unwrap_or_default();
    if components.len() >= k_max.max(1) {
        remove_lightest(&mut components);
    }
    let k = components.len() as f64;
    for c in &mut components {
        c.weight *= k / (k + 1.0);
    }
    components.push(GaussianComponent::from_info(1.0 / (k + 1.0), DVector::zeros(d), new_info)?);
    let init = GaussianMixture::normalized(components)?;
    let opts = EmOptions { prune_below: Some(w_min), ..opts.clone() };
    em_fit(samples, &init, &opts)
}

/// Remove the smallest-weight component; ties go to the highest index.
pub(crate) fn remove_lightest<T: HasWeight>(components: &mut Vec<T>) {
    let mut idx = 0;
    for (i, c) in components.iter().enumerate() {
        if c.weight() <= components[idx].weight() {
            idx = i;
        }
    }
    components.remove(idx);
    let total: f64 = components.iter().map(HasWeight::weight).sum();
    if total > 0.0 {
        for c in components.iter_mut() {
            c.set_weight(c.weight() / total);
        }
    }
}

pub(crate) trait HasWeight {
    fn weight(&self) -> f64;
    fn set_weight(&mut self, w: f64);
}

impl HasWeight for GaussianComponent {
    fn weight(&self) -> f64 {
        self.weight
    }
    fn set_weight(&mut self, w: f64) {
        self.weight = w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::scalar_samples;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_mode(seed: u64, n: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(10.0, 2.0).unwrap();
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..n)
            .map(|_| if u.sample(&mut rng) < 0.7 { a.sample(&mut rng) } else { b.sample(&mut rng) })
            .collect();
        scalar_samples(&v)
    }

    #[test]
    fn constant_samples_hit_floor() {
        let s = scalar_samples(&[0.0; 50]);
        let init = GaussianMixture::from_quantiles(&s, 1, 1e-6).unwrap();
        let fit = em_fit(&s, &init, &EmOptions::default()).unwrap();
        let c = &fit.mixture.components()[0];
        assert_eq!(c.mean[0], 0.0);
        assert!((1.0 / c.info()[(0, 0)] - 1e-6).abs() < 1e-18);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn recovers_two_modes() {
        let s = two_mode(7, 2000);
        let init = GaussianMixture::from_quantiles(&s, 2, 1e-6).unwrap();
        let fit = em_fit(&s, &init, &EmOptions::default()).unwrap();
        let c = fit.mixture.components();
        assert!((c[0].weight - 0.7).abs() < 0.05);
        assert!(c[0].mean[0].abs() < 0.3 && (c[1].mean[0] - 10.0).abs() < 0.3);
        assert!((1.0 / c[0].info()[(0, 0)] - 1.0).abs() < 0.3);
        assert!((1.0 / c[1].info()[(0, 0)] - 4.0).abs() < 1.2);
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn symmetric_start_stays_symmetric() {
        let v: Vec<f64> = (1..=50).flat_map(|i| [i as f64 * 0.1 + 2.0, -(i as f64 * 0.1 + 2.0)]).collect();
        let s = scalar_samples(&v);
        let init = GaussianMixture::new(vec![
            GaussianComponent::scalar(0.5, -1.0, 1.0).unwrap(),
            GaussianComponent::scalar(0.5, 1.0, 1.0).unwrap(),
        ])
        .unwrap();
        let fit = em_fit(&s, &init, &EmOptions::default()).unwrap();
        let c = fit.mixture.components();
        assert!((c[0].mean[0] + c[1].mean[0]).abs() < 1e-9);
    }

    #[test]
    fn rejects_empty_samples() {
        assert!(em_fit(&[], &GaussianMixture::standard(1), &EmOptions::default()).is_err());
    }

    #[test]
    fn lightest_removal_prefers_highest_index_on_ties() {
        let mut c = vec![
            GaussianComponent::scalar(0.25, 0.0, 1.0).unwrap(),
            GaussianComponent::scalar(0.5, 1.0, 1.0).unwrap(),
            GaussianComponent::scalar(0.25, 2.0, 1.0).unwrap(),
        ];
        remove_lightest(&mut c);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].mean[0], 0.0);
        assert!((c[0].weight - 1.0 / 3.0).abs() < 1e-15);
    }
}
