//! Online sliding-window estimation with alternating mixture fitting and
//! state optimization, plus the baseline error models.
//!
//! Each epoch appends a state predicted from odometry and the clock drift,
//! trims the window, evaluates the raw pseudorange errors at that prediction,
//! refits the error model, swaps it into every pseudorange factor and solves
//! the window.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::factors::cced_sqrt_info;
use crate::mixture::em::{em_complexity_learning, em_fit, EmOptions};
use crate::mixture::vbi::{
    add_component, complexity_learning, prior_from_errors, vbi_fit, ComplexityConfig, ConvergenceMeasure, MixturePriors,
    PriorOptions, PriorScale, VariationalPosterior, WeightThreshold,
};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::model::{
    trim_window, ClockState, Measurement, OdometryMeasurement, PoseState, PseudorangeMeasurement, StateWindow,
    Timestamp, WindowState,
};
use crate::robust::RobustModel;
use crate::solver::{block_of, solve, Factor, Problem, SolveReport, SolverOptions};

/// Pseudorange error model used by a pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelector {
    /// Single Gaussian with the configured standard deviation.
    Gaussian,
    /// Dynamic covariance scaling.
    Dcs,
    /// Closed-form dynamic covariance estimation.
    Cdce,
    /// Sum-mixture with a fixed number of components fit by EM.
    SmEm,
    /// Sum-mixture with a fixed number of components fit by VBI.
    SmVbi,
    /// Sum-mixture with EM plus add-one/prune complexity learning.
    SmEmCl,
    /// Sum-mixture with VBI plus add-one/prune complexity learning.
    Ivm,
}

impl ModelSelector {
    pub const ALL: [ModelSelector; 7] = [
        ModelSelector::Gaussian,
        ModelSelector::Dcs,
        ModelSelector::Cdce,
        ModelSelector::SmEm,
        ModelSelector::SmVbi,
        ModelSelector::SmEmCl,
        ModelSelector::Ivm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelSelector::Gaussian => "gaussian",
            ModelSelector::Dcs => "dcs",
            ModelSelector::Cdce => "cdce",
            ModelSelector::SmEm => "sm_em",
            ModelSelector::SmVbi => "sm_vbi",
            ModelSelector::SmEmCl => "sm_em_cl",
            ModelSelector::Ivm => "ivm",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelSelector::Gaussian => "Gaussian",
            ModelSelector::Dcs => "DCS",
            ModelSelector::Cdce => "cDCE",
            ModelSelector::SmEm => "SM+EM",
            ModelSelector::SmVbi => "SM+VBI",
            ModelSelector::SmEmCl => "SM+EM+CL",
            ModelSelector::Ivm => "IVM",
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, ModelSelector::SmEm | ModelSelector::SmVbi | ModelSelector::SmEmCl | ModelSelector::Ivm)
    }
}

impl fmt::Display for ModelSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelSelector::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ModelSelector::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown model `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Complexity-learning settings as they appear in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexitySettings {
    pub k_max: usize,
    /// Pruning threshold; omitted means `1/N`.
    pub w_min: Option<f64>,
    pub i_max: usize,
    pub dl_min: f64,
    /// `lower_bound` or `expected_likelihood`.
    pub measure: String,
    pub point_estimate_start: bool,
}

impl Default for ComplexitySettings {
    fn default() -> Self {
        let c = ComplexityConfig::default();
        ComplexitySettings {
            k_max: c.k_max,
            w_min: None,
            i_max: c.i_max,
            dl_min: c.dl_min,
            measure: "lower_bound".into(),
            point_estimate_start: c.point_estimate_start,
        }
    }
}

impl ComplexitySettings {
    pub fn to_config(&self) -> Result<ComplexityConfig> {
        let measure = match self.measure.as_str() {
            "lower_bound" => ConvergenceMeasure::LowerBound,
            "expected_likelihood" => ConvergenceMeasure::ExpectedLikelihood,
            other => return invalid(format!("unknown convergence measure `{other}`")),
        };
        let w_min = match self.w_min {
            None => WeightThreshold::InverseSampleCount,
            Some(w) if (0.0..1.0).contains(&w) => WeightThreshold::Fixed(w),
            Some(w) => return invalid(format!("w_min must be in [0, 1), got {w}")),
        };
        let cfg = ComplexityConfig {
            k_max: self.k_max,
            w_min,
            i_max: self.i_max,
            dl_min: self.dl_min,
            measure,
            point_estimate_start: self.point_estimate_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prior hyper-parameters; the Wishart scale is recomputed from the window
/// errors at every fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    pub nu0: f64,
    pub beta0: f64,
    pub variance_floor: f64,
    /// `variance_over_dof` (V0 = var/nu0) or `matched_information` (V0 = nu0 var).
    pub scale: String,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let p = PriorOptions::default();
        PriorSettings { nu0: p.nu0, beta0: p.beta0, variance_floor: p.variance_floor, scale: "variance_over_dof".into() }
    }
}

impl PriorSettings {
    pub fn to_options(&self) -> Result<PriorOptions> {
        let scale = match self.scale.as_str() {
            "variance_over_dof" => PriorScale::VarianceOverDof,
            "matched_information" => PriorScale::MatchedInformation,
            other => return invalid(format!("unknown prior scale `{other}`")),
        };
        if !(self.nu0 > 0.0 && self.beta0 > 0.0 && self.variance_floor > 0.0) {
            return invalid("nu0, beta0 and variance_floor must be positive");
        }
        Ok(PriorOptions { nu0: self.nu0, beta0: self.beta0, variance_floor: self.variance_floor, scale })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub covariance_floor: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        let o = EmOptions::default();
        EmSettings { max_iter: o.max_iter, tol: o.tol, covariance_floor: o.covariance_floor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_rejections: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverSettings {
            lambda_init: o.lambda_init,
            lambda_factor: o.lambda_factor,
            rel_cost_tol: o.rel_cost_tol,
            grad_tol: o.grad_tol,
            max_iter: o.max_iter,
            max_rejections: o.max_rejections,
        }
    }
}

impl SolverSettings {
    pub fn to_options(&self) -> SolverOptions {
        SolverOptions {
            lambda_init: self.lambda_init,
            lambda_factor: self.lambda_factor,
            rel_cost_tol: self.rel_cost_tol,
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            max_rejections: self.max_rejections,
        }
    }
}

/// Full pipeline configuration, readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelSelector,
    /// Sliding-window span in seconds.
    pub window: f64,
    /// Component count of the fixed-K mixture modes.
    pub fixed_k: usize,
    /// Pseudorange standard deviation of the Gaussian model and of the
    /// whitening used by the M-estimators (m).
    pub pseudorange_std: f64,
    /// DCS threshold on the squared whitened error.
    pub dcs_phi: f64,
    /// Clock square-root information per second of elapsed time
    /// (offset, drift).
    pub clock_sqrt_info: [f64; 2],
    /// Square-root information of the weak prior on heading and clock drift
    /// of the oldest window state.
    pub anchor_sqrt_info: f64,
    pub complexity: ComplexitySettings,
    pub priors: PriorSettings,
    pub em: EmSettings,
    pub solver: SolverSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelSelector::Ivm,
            window: StateWindow::DEFAULT_SPAN,
            fixed_k: 3,
            pseudorange_std: 3.0,
            dcs_phi: 1.0,
            clock_sqrt_info: [10.0, 10.0],
            anchor_sqrt_info: 1e-3,
            complexity: ComplexitySettings::default(),
            priors: PriorSettings::default(),
            em: EmSettings::default(),
            solver: SolverSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_model(model: ModelSelector) -> Self {
        PipelineConfig { model, ..Default::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.window > 0.0 && self.window.is_finite()) {
            problems.push(format!("window must be positive, got {}", self.window));
        }
        if self.fixed_k == 0 {
            problems.push("fixed_k must be at least 1".to_string());
        }
        if !(self.pseudorange_std > 0.0) {
            problems.push(format!("pseudorange_std must be positive, got {}", self.pseudorange_std));
        }
        if !(self.dcs_phi > 0.0) {
            problems.push(format!("dcs_phi must be positive, got {}", self.dcs_phi));
        }
        if !self.clock_sqrt_info.iter().all(|v| *v > 0.0 && v.is_finite()) {
            problems.push("clock_sqrt_info entries must be positive".to_string());
        }
        if !(self.anchor_sqrt_info > 0.0) {
            problems.push("anchor_sqrt_info must be positive".to_string());
        }
        if let Err(e) = self.complexity.to_config() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.priors.to_options() {
            problems.push(e.to_string());
        }
        if self.em.max_iter == 0 || !(self.em.tol > 0.0) || !(self.em.covariance_floor > 0.0) {
            problems.push("em settings need max_iter >= 1 and positive tol and covariance_floor".to_string());
        }
        let s = &self.solver;
        if s.max_iter == 0 || !(s.lambda_init > 0.0) || !(s.lambda_factor > 1.0) || s.max_rejections == 0 {
            problems.push("solver settings need max_iter >= 1, lambda_init > 0, lambda_factor > 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// All measurements sharing one timestamp. The odometry record, if any,
/// describes the motion from this epoch to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub time: Timestamp,
    pub pseudoranges: Vec<PseudorangeMeasurement>,
    pub odometry: Option<OdometryMeasurement>,
}

impl Epoch {
    pub fn new(time: Timestamp) -> Self {
        Epoch { time, pseudoranges: Vec::new(), odometry: None }
    }

    fn add(&mut self, m: Measurement) -> Result<()> {
        match m {
            Measurement::Pseudorange(p) => self.pseudoranges.push(p),
            Measurement::Odometry(o) => {
                if self.odometry.is_some() {
                    return invalid(format!("two odometry records at t = {}", self.time));
                }
                self.odometry = Some(o);
            }
        }
        Ok(())
    }
}

/// Group a time-ordered stream into epochs.
pub fn group_epochs(measurements: &[Measurement]) -> Result<Vec<Epoch>> {
    let mut epochs: Vec<Epoch> = Vec::new();
    for (i, m) in measurements.iter().enumerate() {
        let t = m.time();
        match epochs.last_mut() {
            Some(e) if e.time == t => e.add(m.clone())?,
            Some(e) if t < e.time => {
                return Err(Error::OutOfOrder { line: i + 1, record: format!("{m:?}") });
            }
            _ => {
                let mut e = Epoch::new(t);
                e.add(m.clone())?;
                epochs.push(e);
            }
        }
    }
    Ok(epochs)
}

/// Estimate and model snapshot after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    pub time: Timestamp,
    pub pose: PoseState,
    pub clock: ClockState,
    /// Pseudorange mixture used in this epoch's solve (mixture modes only).
    pub mixture: Option<GaussianMixture>,
    /// Wall-clock seconds for the whole epoch, excluding I/O.
    pub runtime: f64,
    /// Part of `runtime` spent fitting the error model.
    pub fit_runtime: f64,
    /// Part of `runtime` spent in the optimizer.
    pub solve_runtime: f64,
    /// The mixture fit failed and the previous model was kept.
    pub fallback: bool,
    pub states_in_window: usize,
}

impl EpochResult {
    /// Components of the pseudorange model; 1 for single-kernel models.
    pub fn k(&self) -> usize {
        self.mixture.as_ref().map_or(1, |m| m.len())
    }
}

#[derive(Clone, Debug)]
enum FitState {
    None,
    Em(GaussianMixture),
    Vbi(VariationalPosterior),
}

/// Sliding-window estimator for one model selector.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    complexity: ComplexityConfig,
    prior_opts: PriorOptions,
    em_opts: EmOptions,
    solver_opts: SolverOptions,
    window: StateWindow,
    measurements: Vec<Measurement>,
    model: RobustModel,
    fit: FitState,
    last_report: Option<SolveReport>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let complexity = cfg.complexity.to_config()?;
        let prior_opts = cfg.priors.to_options()?;
        let em_opts = EmOptions {
            max_iter: cfg.em.max_iter,
            tol: cfg.em.tol,
            covariance_floor: cfg.em.covariance_floor,
            prune_below: None,
        };
        let solver_opts = cfg.solver.to_options();
        let window = StateWindow::new(cfg.window)?;
        let model = RobustModel::scalar_gaussian(cfg.pseudorange_std)?;
        Ok(Pipeline {
            cfg,
            complexity,
            prior_opts,
            em_opts,
            solver_opts,
            window,
            measurements: Vec::new(),
            model,
            fit: FitState::None,
            last_report: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn is_initialized(&self) -> bool {
        !self.window.is_empty()
    }

    pub fn window(&self) -> &StateWindow {
        &self.window
    }

    /// Current pseudorange error model.
    pub fn model(&self) -> &RobustModel {
        &self.model
    }

    /// Variational posterior of the VBI modes.
    pub fn posterior(&self) -> Option<&VariationalPosterior> {
        match &self.fit {
            FitState::Vbi(p) => Some(p),
            _ => None,
        }
    }

    pub fn last_solve(&self) -> Option<&SolveReport> {
        self.last_report.as_ref()
    }

    /// Process one epoch: the first call initializes, later calls run the
    /// predict / trim / fit / solve cycle.
    pub fn step(&mut self, epoch: &Epoch) -> Result<EpochResult> {
        match self.window.last() {
            None => self.initialize(epoch),
            Some(last) if epoch.time <= last.time => {
                invalid(format!("epoch at t = {} is not after the previous one at t = {}", epoch.time, last.time))
            }
            Some(_) => self.advance(epoch),
        }
    }

    /// Gaussian least-squares solve of the first epoch, then two fits of the
    /// error model on its residuals.
    pub fn initialize(&mut self, epoch: &Epoch) -> Result<EpochResult> {
        if self.is_initialized() {
            return Err(Error::Initialization("pipeline is already initialized".into()));
        }
        let n = epoch.pseudoranges.len();
        if n < 4 {
            return Err(Error::Initialization(format!(
                "first epoch at t = {} has {n} pseudoranges, at least 4 are needed",
                epoch.time
            )));
        }
        let start = Instant::now();
        self.window.push(WindowState { time: epoch.time, pose: PoseState::default(), clock: ClockState::default() })?;
        self.absorb(epoch);
        self.model = RobustModel::scalar_gaussian(self.cfg.pseudorange_std)?;
        let solve_start = Instant::now();
        let init_opts = SolverOptions { max_iter: self.solver_opts.max_iter.max(100), ..self.solver_opts.clone() };
        self.solve_window(&init_opts)?;
        let solve_runtime = solve_start.elapsed().as_secs_f64();

        let fit_start = Instant::now();
        let errors = self.window_errors()?;
        let fallback = match self.initial_fit(&errors) {
            Ok(()) => false,
            Err(e) => {
                log::warn!("initial error model fit failed at t = {}: {e}; keeping the Gaussian model", epoch.time);
                true
            }
        };
        if !fallback && self.cfg.model.is_mixture() {
            self.model = RobustModel::SumMixture(self.current_mixture()?);
        } else if !self.cfg.model.is_mixture() {
            self.model = self.baseline_model()?;
        }
        let fit_runtime = fit_start.elapsed().as_secs_f64();
        Ok(self.result(epoch.time, start, fit_runtime, solve_runtime, fallback))
    }

    fn advance(&mut self, epoch: &Epoch) -> Result<EpochResult> {
        let start = Instant::now();
        let last = *self.window.last().expect("initialized");
        let dt = epoch.time.0 - last.time.0;
        let odo = self.measurements.iter().rev().find_map(|m| match m {
            Measurement::Odometry(o) if o.time == last.time => Some(o),
            _ => None,
        });
        let pose = match odo {
            Some(o) => dead_reckon(&last.pose, o),
            None => last.pose,
        };
        let clock = ClockState {
            delta: last.clock.delta + last.clock.delta_dot * dt,
            delta_dot: last.clock.delta_dot,
        };
        self.window.push(WindowState { time: epoch.time, pose, clock })?;
        self.absorb(epoch);
        let window = std::mem::replace(&mut self.window, StateWindow::new(self.cfg.window)?);
        let measurements = std::mem::take(&mut self.measurements);
        let (window, measurements) = trim_window(window, measurements, epoch.time);
        self.window = window;
        self.measurements = measurements;

        let fit_start = Instant::now();
        let mut fallback = false;
        if self.cfg.model.is_mixture() {
            let errors = self.window_errors()?;
            match self.refit(&errors).and_then(|_| self.current_mixture()) {
                Ok(mixture) => self.model = RobustModel::SumMixture(mixture),
                Err(e) => {
                    log::warn!("error model fit failed at t = {}: {e}; keeping the previous model", epoch.time);
                    fallback = true;
                }
            }
        }
        let fit_runtime = fit_start.elapsed().as_secs_f64();

        let solve_start = Instant::now();
        let opts = self.solver_opts.clone();
        self.solve_window(&opts)?;
        let solve_runtime = solve_start.elapsed().as_secs_f64();
        Ok(self.result(epoch.time, start, fit_runtime, solve_runtime, fallback))
    }

    fn result(&self, time: Timestamp, start: Instant, fit: f64, solve: f64, fallback: bool) -> EpochResult {
        let last = self.window.last().expect("initialized");
        EpochResult {
            time,
            pose: last.pose,
            clock: last.clock,
            mixture: self.model.mixture().cloned(),
            runtime: start.elapsed().as_secs_f64(),
            fit_runtime: fit,
            solve_runtime: solve,
            fallback,
            states_in_window: self.window.len(),
        }
    }

    fn absorb(&mut self, epoch: &Epoch) {
        self.measurements.extend(epoch.pseudoranges.iter().cloned().map(Measurement::Pseudorange));
        if let Some(o) = &epoch.odometry {
            self.measurements.push(Measurement::Odometry(o.clone()));
        }
    }

    fn baseline_model(&self) -> Result<RobustModel> {
        let sigma = self.cfg.pseudorange_std;
        match self.cfg.model {
            ModelSelector::Gaussian => RobustModel::scalar_gaussian(sigma),
            ModelSelector::Dcs => RobustModel::dcs(self.cfg.dcs_phi, nalgebra::DMatrix::from_element(1, 1, 1.0 / sigma)),
            ModelSelector::Cdce => RobustModel::cdce(sigma),
            _ => unreachable!("mixture modes use the fitted model"),
        }
    }

    fn priors(&self, errors: &[DVector<f64>]) -> Result<MixturePriors> {
        prior_from_errors(errors, &self.prior_opts)
    }

    fn fixed_k_config(&self) -> ComplexityConfig {
        ComplexityConfig { w_min: WeightThreshold::Fixed(0.0), ..self.complexity.clone() }
    }

    fn em_cl_info(&self, errors: &[DVector<f64>]) -> Result<nalgebra::DMatrix<f64>> {
        self.priors(errors)?.prior_information()
    }

    fn initial_fit(&mut self, errors: &[DVector<f64>]) -> Result<()> {
        let k = self.cfg.fixed_k;
        self.fit = match self.cfg.model {
            ModelSelector::Gaussian | ModelSelector::Dcs | ModelSelector::Cdce => FitState::None,
            ModelSelector::SmEm => {
                let init = GaussianMixture::from_quantiles(errors, k.min(errors.len()), self.em_opts.covariance_floor)?;
                FitState::Em(em_fit(errors, &init, &self.em_opts)?.mixture)
            }
            ModelSelector::SmVbi => {
                let priors = self.priors(errors)?;
                let init = GaussianMixture::from_quantiles(errors, k.min(errors.len()), self.em_opts.covariance_floor)?;
                let start = VariationalPosterior::from_mixture(&init, &priors, errors.len());
                FitState::Vbi(vbi_fit(errors, &start, &priors, &self.fixed_k_config())?.posterior)
            }
            ModelSelector::SmEmCl => {
                let info = self.em_cl_info(errors)?;
                let w_min = self.complexity.w_min.value(errors.len());
                let k_max = self.complexity.k_max;
                let first = em_complexity_learning(errors, None, info.clone(), k_max, w_min, &self.em_opts)?;
                let second =
                    em_complexity_learning(errors, Some(&first.mixture), info, k_max, w_min, &self.em_opts)?;
                FitState::Em(second.mixture)
            }
            ModelSelector::Ivm => {
                let priors = self.priors(errors)?;
                let empty = VariationalPosterior::empty(1);
                let first = complexity_learning(errors, &empty, &priors, &self.complexity)?;
                let second = complexity_learning(errors, &first.posterior, &priors, &self.complexity)?;
                FitState::Vbi(second.posterior)
            }
        };
        Ok(())
    }

    fn refit(&mut self, errors: &[DVector<f64>]) -> Result<()> {
        let next = match (&self.fit, self.cfg.model) {
            (FitState::Em(prev), ModelSelector::SmEm) => {
                let start = reseed_em(prev, self.em_cl_info(errors)?, errors.len())?;
                let fit = em_fit(errors, &start, &self.em_opts)?;
                log::debug!("em: {} iterations, degenerate = {}", fit.iterations, fit.degenerate);
                FitState::Em(fit.mixture)
            }
            (FitState::Em(prev), ModelSelector::SmEmCl) => {
                let info = self.em_cl_info(errors)?;
                let w_min = self.complexity.w_min.value(errors.len());
                let fit = em_complexity_learning(errors, Some(prev), info, self.complexity.k_max, w_min, &self.em_opts)?;
                FitState::Em(fit.mixture)
            }
            (FitState::Vbi(prev), ModelSelector::SmVbi) => {
                let priors = self.priors(errors)?;
                let start = reseed_vbi(prev, &priors, errors.len())?;
                FitState::Vbi(vbi_fit(errors, &start, &priors, &self.fixed_k_config())?.posterior)
            }
            (FitState::Vbi(prev), ModelSelector::Ivm) => {
                let priors = self.priors(errors)?;
                let fit = complexity_learning(errors, prev, &priors, &self.complexity)?;
                log::debug!("complexity learning: {} iterations, K = {}", fit.iterations, fit.posterior.len());
                FitState::Vbi(fit.posterior)
            }
            // the initial fit failed: start over on the current errors
            (FitState::None, _) => {
                self.initial_fit(errors)?;
                return Ok(());
            }
            _ => unreachable!("fit state matches the selector"),
        };
        self.fit = next;
        Ok(())
    }

    fn current_mixture(&self) -> Result<GaussianMixture> {
        match &self.fit {
            FitState::Em(m) => Ok(m.clone()),
            FitState::Vbi(p) => p.expected_mixture(),
            FitState::None => invalid("no mixture has been fit"),
        }
    }

    /// Raw pseudorange errors of the window at the current states.
    pub fn window_errors(&self) -> Result<Vec<DVector<f64>>> {
        let problem = self.build_problem()?;
        Ok(problem.compute_window_errors()?.into_iter().map(|s| s.value).collect())
    }

    fn build_problem(&self) -> Result<Problem> {
        let states: Vec<WindowState> = self.window.states().to_vec();
        let index_of = |t: Timestamp| states.binary_search_by(|s| s.time.cmp(&t)).ok();
        let mut factors = Vec::new();
        for m in &self.measurements {
            match m {
                Measurement::Pseudorange(p) => {
                    if let Some(i) = index_of(p.time) {
                        factors.push(Factor::Pseudorange { state: i, meas: p.clone() });
                    }
                }
                Measurement::Odometry(o) => {
                    if let Some(i) = index_of(o.time) {
                        if i + 1 < states.len() {
                            factors.push(Factor::odometry(i, i + 1, o.clone())?);
                        }
                    }
                }
            }
        }
        for i in 1..states.len() {
            let dt = states[i].time.0 - states[i - 1].time.0;
            factors.push(Factor::ClockDrift {
                from: i - 1,
                to: i,
                dt,
                sqrt_info: cced_sqrt_info(dt, self.cfg.clock_sqrt_info),
            });
        }
        if let Some(first) = states.first() {
            let a = self.cfg.anchor_sqrt_info;
            factors.push(Factor::Prior { state: 0, mean: block_of(first), sqrt_info: [0.0, 0.0, 0.0, a, 0.0, a] });
        }
        Problem::new(states, factors, self.model.clone())
    }

    fn solve_window(&mut self, opts: &SolverOptions) -> Result<()> {
        let mut problem = self.build_problem()?;
        let report = solve(&mut problem, opts)?;
        log::debug!(
            "solve: {} iterations, {:?}, cost {} -> {}",
            report.iterations,
            report.termination,
            report.initial_cost,
            report.final_cost
        );
        for (dst, src) in self.window.states_mut().iter_mut().zip(&problem.states) {
            *dst = *src;
        }
        self.last_report = Some(report);
        Ok(())
    }
}

/// Fixed-K modes never prune, but a component can lose all its weight and
/// then never win responsibility again. Components below one sample's worth
/// of weight are replaced by fresh zero-mean ones, the same component that
/// complexity learning adds, so that all K stay in play.
fn reseed_em(prev: &GaussianMixture, info: nalgebra::DMatrix<f64>, n: usize) -> Result<GaussianMixture> {
    let floor = 1.0 / n as f64;
    let dead = prev.components().iter().filter(|c| c.weight < floor).count();
    if dead == 0 {
        return Ok(prev.clone());
    }
    let d = prev.dim();
    let k = prev.len() as f64;
    let mut comps: Vec<GaussianComponent> = prev.components().iter().filter(|c| c.weight >= floor).cloned().collect();
    for c in &mut comps {
        c.weight *= (k - dead as f64) / k;
    }
    for _ in 0..dead {
        comps.push(GaussianComponent::from_info(1.0 / k, DVector::zeros(d), info.clone())?);
    }
    GaussianMixture::normalized(comps)
}

fn reseed_vbi(prev: &VariationalPosterior, priors: &MixturePriors, n: usize) -> Result<VariationalPosterior> {
    let floor = 1.0 / n as f64;
    let live: Vec<_> = prev.components().iter().filter(|c| c.weight >= floor).cloned().collect();
    let dead = prev.len() - live.len();
    if dead == 0 {
        return Ok(prev.clone());
    }
    let total: f64 = live.iter().map(|c| c.weight).sum();
    let live = live
        .into_iter()
        .map(|mut c| {
            c.weight /= total;
            c
        })
        .collect();
    let mut out = VariationalPosterior::new(prev.dim(), live)?;
    for _ in 0..dead {
        out = add_component(&out, priors)?;
    }
    Ok(out)
}

/// Predict the next pose from the previous one and a body-frame increment.
pub fn dead_reckon(pose: &PoseState, odo: &OdometryMeasurement) -> PoseState {
    let (s, c) = pose.phi.sin_cos();
    PoseState {
        x: pose.x + c * odo.forward - s * odo.lateral,
        y: pose.y + s * odo.forward + c * odo.lateral,
        z: pose.z + odo.vertical,
        phi: crate::model::wrap(pose.phi + odo.dyaw),
    }
}

/// Run a whole time-ordered stream through a fresh pipeline.
pub fn run(measurements: &[Measurement], cfg: &PipelineConfig) -> Result<Vec<EpochResult>> {
    let epochs = group_epochs(measurements)?;
    let mut pipeline = Pipeline::new(cfg.clone())?;
    epochs.iter().map(|e| pipeline.step(e)).collect()
}

pub const ESTIMATE_HEADER: &str = "time,x,y,z,phi,delta,delta_dot,K,runtime_s";

/// Per-epoch estimates as CSV with [`ESTIMATE_HEADER`].
pub fn estimates_csv(results: &[EpochResult]) -> String {
    let mut out = String::from(ESTIMATE_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.time.0,
            r.pose.x,
            r.pose.y,
            r.pose.z,
            r.pose.phi,
            r.clock.delta,
            r.clock.delta_dot,
            r.k(),
            r.runtime
        ));
    }
    out
}

/// One serialized mixture per epoch, each preceded by `epoch <time>`.
pub fn mixture_trace(results: &[EpochResult]) -> String {
    let mut out = String::new();
    for r in results {
        if let Some(m) = &r.mixture {
            out.push_str(&format!("epoch {}\n", r.time.0));
            out.push_str(&crate::mixture::text::write_mixture(m));
        }
    }
    out
}
