//! Levenberg-Marquardt over a window of states.
//!
//! Every state contributes a six-dimensional block `(x, y, z, phi, delta,
//! delta_dot)`. Factors only couple states a few positions apart, so the
//! normal equations are assembled and factored as a banded matrix.

use log::debug;
use nalgebra::{DVector, Matrix2, Matrix4};

use crate::banded::BandMatrix;
use crate::error::{invalid, Error, Result};
use crate::factors::{clock_cced_error, odometry_error, pseudorange_error};
use crate::model::{wrap, ErrorSample, OdometryMeasurement, PseudorangeMeasurement, WindowState};
use crate::robust::{RobustModel, ScalarModel};

pub const BLOCK: usize = 6;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// Pseudorange on one state, weighted by the problem's shared model.
    Pseudorange { state: usize, meas: PseudorangeMeasurement },
    /// Odometry between two states; its noise is Gaussian with the
    /// measurement's information matrix.
    Odometry { from: usize, to: usize, meas: OdometryMeasurement, sqrt_info: Matrix4<f64> },
    /// Constant clock drift between two states.
    ClockDrift { from: usize, to: usize, dt: f64, sqrt_info: Matrix2<f64> },
    /// Independent Gaussian prior on each coordinate of one state block.
    Prior { state: usize, mean: [f64; BLOCK], sqrt_info: [f64; BLOCK] },
}

impl Factor {
    pub fn odometry(from: usize, to: usize, meas: OdometryMeasurement) -> Result<Self> {
        let chol = meas
            .info
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("odometry information is not positive definite".into()))?;
        Ok(Factor::Odometry { from, to, sqrt_info: chol.l().transpose(), meas })
    }

    fn states(&self) -> (usize, usize) {
        match *self {
            Factor::Pseudorange { state, .. } | Factor::Prior { state, .. } => (state, state),
            Factor::Odometry { from, to, .. } | Factor::ClockDrift { from, to, .. } => (from, to),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Factor::Pseudorange { .. } => "pseudorange",
            Factor::Odometry { .. } => "odometry",
            Factor::ClockDrift { .. } => "clock drift",
            Factor::Prior { .. } => "prior",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub states: Vec<WindowState>,
    pub factors: Vec<Factor>,
    /// Error model shared by every pseudorange factor.
    pub pseudorange_model: RobustModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_rejections: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lambda_init: 1e-4,
            lambda_factor: 10.0,
            rel_cost_tol: 1e-8,
            grad_tol: 1e-10,
            max_iter: 100,
            max_rejections: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    RelativeCostChange,
    Gradient,
    MaxIterations,
    /// No factors or no states: nothing to optimize.
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// The undamped normal equations were singular at the initial point.
    pub rank_deficient: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

/// One factor's whitened residual and its Jacobian blocks, on the stack.
struct Linearized {
    rows: usize,
    residual: [f64; BLOCK],
    /// `(state index, rows x 6 Jacobian)`, `nblocks` of them in use.
    blocks: [(usize, [[f64; BLOCK]; BLOCK]); 2],
    nblocks: usize,
}

impl Linearized {
    fn new(rows: usize) -> Self {
        Linearized { rows, residual: [0.0; BLOCK], blocks: [(0, [[0.0; BLOCK]; BLOCK]); 2], nblocks: 0 }
    }

    fn cost(&self) -> f64 {
        self.residual[..self.rows].iter().map(|r| r * r).sum()
    }
}

/// The pseudorange model, in its allocation-free form when one exists.
enum Evaluator<'a> {
    Scalar(ScalarModel),
    General(&'a RobustModel),
}

impl<'a> Evaluator<'a> {
    fn new(model: &'a RobustModel) -> Self {
        ScalarModel::new(model).map_or(Evaluator::General(model), Evaluator::Scalar)
    }
}

impl Problem {
    pub fn new(states: Vec<WindowState>, factors: Vec<Factor>, pseudorange_model: RobustModel) -> Result<Self> {
        let p = Problem { states, factors, pseudorange_model };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.factors.iter().enumerate() {
            let (a, b) = f.states();
            if a >= self.states.len() || b >= self.states.len() {
                return invalid(format!("factor {i} ({}) references a missing state", f.kind()));
            }
        }
        if let Some(d) = self.pseudorange_model.input_dim() {
            if d != 1 {
                return invalid("pseudorange model must be one-dimensional");
            }
        }
        Ok(())
    }

    fn bandwidth(&self) -> usize {
        let gap = self
            .factors
            .iter()
            .map(|f| {
                let (a, b) = f.states();
                a.abs_diff(b)
            })
            .max()
            .unwrap_or(0);
        BLOCK * gap + BLOCK - 1
    }

    fn linearize(&self, f: &Factor, model: &Evaluator, with_jacobian: bool) -> Result<Linearized> {
        let st = &self.states;
        Ok(match f {
            Factor::Pseudorange { state, meas } => {
                let s = &st[*state];
                let (e, de) = pseudorange_error(&s.pose, &s.clock, meas)?;
                match model {
                    Evaluator::Scalar(m) => {
                        let (r, dr) = m.evaluate(e);
                        let mut lin = Linearized::new(1);
                        lin.residual[0] = r;
                        if with_jacobian {
                            lin.nblocks = 1;
                            lin.blocks[0].0 = *state;
                            for c in 0..BLOCK {
                                lin.blocks[0].1[0][c] = dr * de[c];
                            }
                        }
                        lin
                    }
                    Evaluator::General(m) => {
                        let w = m.evaluate(&[e])?;
                        let rows = w.residual.len();
                        if rows > BLOCK {
                            return invalid("pseudorange model residual has more than 6 rows");
                        }
                        let mut lin = Linearized::new(rows);
                        lin.residual[..rows].copy_from_slice(w.residual.as_slice());
                        if with_jacobian {
                            lin.nblocks = 1;
                            lin.blocks[0].0 = *state;
                            for r in 0..rows {
                                for c in 0..BLOCK {
                                    lin.blocks[0].1[r][c] = w.jacobian[(r, 0)] * de[c];
                                }
                            }
                        }
                        lin
                    }
                }
            }
            Factor::Odometry { from, to, meas, sqrt_info } => {
                let (e, j0, j1) = odometry_error(&st[*from].pose, &st[*to].pose, meas);
                let u = sqrt_info * FRAC_1_SQRT_2;
                let r = u * e;
                let mut lin = Linearized::new(4);
                lin.residual[..4].copy_from_slice(r.as_slice());
                if with_jacobian {
                    let (a, b) = (u * j0, u * j1);
                    lin.nblocks = 2;
                    lin.blocks[0].0 = *from;
                    lin.blocks[1].0 = *to;
                    for i in 0..4 {
                        for j in 0..4 {
                            lin.blocks[0].1[i][j] = a[(i, j)];
                            lin.blocks[1].1[i][j] = b[(i, j)];
                        }
                    }
                }
                lin
            }
            Factor::ClockDrift { from, to, dt, sqrt_info } => {
                let (e, j0, j1) = clock_cced_error(&st[*from].clock, &st[*to].clock, *dt);
                let u = sqrt_info * FRAC_1_SQRT_2;
                let r = u * e;
                let mut lin = Linearized::new(2);
                lin.residual[..2].copy_from_slice(r.as_slice());
                if with_jacobian {
                    let (a, b) = (u * j0, u * j1);
                    lin.nblocks = 2;
                    lin.blocks[0].0 = *from;
                    lin.blocks[1].0 = *to;
                    for i in 0..2 {
                        for j in 0..2 {
                            lin.blocks[0].1[i][4 + j] = a[(i, j)];
                            lin.blocks[1].1[i][4 + j] = b[(i, j)];
                        }
                    }
                }
                lin
            }
            Factor::Prior { state, mean, sqrt_info } => {
                let x = block_of(&st[*state]);
                let mut lin = Linearized::new(BLOCK);
                for i in 0..BLOCK {
                    let d = if i == 3 { wrap(x[i] - mean[i]) } else { x[i] - mean[i] };
                    lin.residual[i] = FRAC_1_SQRT_2 * sqrt_info[i] * d;
                }
                if with_jacobian {
                    lin.nblocks = 1;
                    lin.blocks[0].0 = *state;
                    for i in 0..BLOCK {
                        lin.blocks[0].1[i][i] = FRAC_1_SQRT_2 * sqrt_info[i];
                    }
                }
                lin
            }
        })
    }

    fn checked_cost(&self, index: usize, model: &Evaluator) -> Result<f64> {
        let f = &self.factors[index];
        let c = self.linearize(f, model, false)?.cost();
        if !c.is_finite() {
            return Err(Error::NumericalFailure(format!("factor {index} ({}) has a non-finite residual", f.kind())));
        }
        Ok(c)
    }

    /// Cost of a single factor, `|residual|^2`.
    pub fn factor_cost(&self, index: usize) -> Result<f64> {
        if index >= self.factors.len() {
            return invalid(format!("no factor {index}"));
        }
        self.checked_cost(index, &Evaluator::new(&self.pseudorange_model))
    }

    /// Total cost, the sum of squared residual norms over all factors.
    pub fn evaluate_cost(&self) -> Result<f64> {
        let model = Evaluator::new(&self.pseudorange_model);
        let mut total = 0.0;
        for i in 0..self.factors.len() {
            total += self.checked_cost(i, &model)?;
        }
        Ok(total)
    }

    /// Raw pseudorange errors at the current states, one per pseudorange factor.
    pub fn compute_window_errors(&self) -> Result<Vec<ErrorSample>> {
        let mut out = Vec::new();
        for (i, f) in self.factors.iter().enumerate() {
            if let Factor::Pseudorange { state, meas } = f {
                let s = &self.states[*state];
                let (e, _) = pseudorange_error(&s.pose, &s.clock, meas)?;
                out.push(ErrorSample { value: DVector::from_element(1, e), source_factor: i, time: meas.time });
            }
        }
        Ok(out)
    }

    /// Gauss-Newton system `H = J^T J` (banded) and gradient `g = J^T r`.
    fn normal_equations(&self) -> Result<(BandMatrix, Vec<f64>, f64)> {
        let n = self.states.len() * BLOCK;
        let mut h = BandMatrix::zeros(n, self.bandwidth());
        let mut g = vec![0.0; n];
        let mut cost = 0.0;
        let model = Evaluator::new(&self.pseudorange_model);
        for (fi, f) in self.factors.iter().enumerate() {
            let lin = self.linearize(f, &model, true)?;
            let c = lin.cost();
            if !c.is_finite() {
                return Err(Error::NumericalFailure(format!("factor {fi} ({}) has a non-finite residual", f.kind())));
            }
            cost += c;
            let rows = lin.rows;
            let blocks = &lin.blocks[..lin.nblocks];
            for (sa, ja) in blocks {
                let oa = sa * BLOCK;
                for col in 0..BLOCK {
                    let mut acc = 0.0;
                    for row in 0..rows {
                        acc += ja[row][col] * lin.residual[row];
                    }
                    g[oa + col] += acc;
                }
                for (sb, jb) in blocks {
                    let ob = sb * BLOCK;
                    if ob > oa {
                        continue;
                    }
                    // lower triangle: global row oa + i >= global column ob + j
                    for i in 0..BLOCK {
                        for j in 0..BLOCK {
                            if oa + i < ob + j {
                                continue;
                            }
                            let mut acc = 0.0;
                            for row in 0..rows {
                                acc += ja[row][i] * jb[row][j];
                            }
                            if acc != 0.0 {
                                h.add_lower(oa + i, ob + j, acc);
                            }
                        }
                    }
                }
            }
        }
        Ok((h, g, cost))
    }

    fn apply_step(&mut self, dx: &[f64]) {
        for (i, s) in self.states.iter_mut().enumerate() {
            let d = &dx[i * BLOCK..(i + 1) * BLOCK];
            s.pose.x += d[0];
            s.pose.y += d[1];
            s.pose.z += d[2];
            s.pose.phi = wrap(s.pose.phi + d[3]);
            s.clock.delta += d[4];
            s.clock.delta_dot += d[5];
        }
    }
}

pub(crate) fn block_of(s: &WindowState) -> [f64; BLOCK] {
    [s.pose.x, s.pose.y, s.pose.z, s.pose.phi, s.clock.delta, s.clock.delta_dot]
}

/// Minimize the problem's cost in place.
///
/// A trial step whose cost differs from the current one by less than the
/// relative tolerance counts as convergence whether or not it is accepted,
/// since no further progress is measurable at that point.
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveReport> {
    problem.validate()?;
    let initial_cost = problem.evaluate_cost()?;
    let mut report = SolveReport {
        iterations: 0,
        initial_cost,
        final_cost: initial_cost,
        converged: false,
        termination: Termination::MaxIterations,
        rank_deficient: false,
        cost_trace: vec![initial_cost],
    };
    if problem.states.is_empty() || problem.factors.is_empty() {
        report.converged = true;
        report.termination = Termination::Empty;
        return Ok(report);
    }
    let mut lambda = opts.lambda_init;
    let mut cost = initial_cost;
    let mut rejections = 0;
    let mut relinearize = true;
    let mut system = None;

    while report.iterations < opts.max_iter {
        if relinearize {
            let (h, g, c) = problem.normal_equations()?;
            debug_assert!((c - cost).abs() <= 1e-9 * cost.max(1.0));
            if report.iterations == 0 {
                report.rank_deficient = h.clone().cholesky().is_none();
            }
            system = Some((h, g));
            relinearize = false;
        }
        let (h, g) = system.as_ref().expect("system assembled above");
        let grad_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm < opts.grad_tol {
            report.converged = true;
            report.termination = Termination::Gradient;
            break;
        }
        report.iterations += 1;

        let mut damped = h.clone();
        let diag: Vec<f64> = h.diagonal().iter().map(|d| lambda * d.clamp(1e-6, 1e32)).collect();
        damped.add_diagonal(&diag);
        let step = damped.cholesky().map(|chol| {
            let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
            chol.solve(&neg_g)
        });

        let trial = match step {
            Some(dx) if dx.iter().all(|v| v.is_finite()) => {
                let saved = problem.states.clone();
                problem.apply_step(&dx);
                match problem.evaluate_cost() {
                    Ok(c) if c.is_finite() => Some((c, saved)),
                    _ => {
                        problem.states = saved;
                        None
                    }
                }
            }
            _ => None,
        };

        match trial {
            Some((new_cost, _)) if new_cost < cost => {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                debug!("lm iter {} cost {new_cost:.9e} lambda {lambda:.1e} accepted", report.iterations);
                cost = new_cost;
                report.cost_trace.push(cost);
                lambda = (lambda / opts.lambda_factor).max(1e-15);
                rejections = 0;
                relinearize = true;
                if rel < opts.rel_cost_tol {
                    report.converged = true;
                    report.termination = Termination::RelativeCostChange;
                    break;
                }
            }
            other => {
                let stalled = matches!(&other, Some((c, _)) if (c - cost).abs() <= opts.rel_cost_tol * cost);
                if let Some((c, saved)) = other {
                    debug!("lm iter {} cost {c:.9e} lambda {lambda:.1e} rejected", report.iterations);
                    problem.states = saved;
                }
                if stalled {
                    report.converged = true;
                    report.termination = Termination::RelativeCostChange;
                    break;
                }
                lambda *= opts.lambda_factor;
                rejections += 1;
                if rejections >= opts.max_rejections {
                    return Err(Error::NumericalFailure(format!(
                        "{rejections} consecutive rejected steps (cost {cost:.6e})"
                    )));
                }
            }
        }
    }
    report.final_cost = cost;
    Ok(report)
}
