//! Domain types shared by the estimator: time, states, measurements and the
//! sliding window of states.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DVector, Matrix4, Vector3};

use crate::error::{invalid, Result};

/// Seconds since scenario start.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn new(seconds: f64) -> Result<Self> {
        if !seconds.is_finite() || seconds < 0.0 {
            return invalid(format!("timestamp must be finite and non-negative, got {seconds}"));
        }
        Ok(Timestamp(seconds))
    }

    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl Eq for Timestamp {}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return invalid(format!("angle must be finite, got {a}"));
    }
    Ok(wrap(a))
}

/// Infallible variant of [`normalize_angle`] for values already known to be
/// finite.
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid can land on -pi after the shift; the interval is open there
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Vehicle pose: position in meters and heading about the upright axis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
}

impl PoseState {
    pub fn new(x: f64, y: f64, z: f64, phi: f64) -> Result<Self> {
        if ![x, y, z, phi].iter().all(|v| v.is_finite()) {
            return invalid("pose coordinates must be finite");
        }
        Ok(PoseState { x, y, z, phi: wrap(phi) })
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Receiver clock offset (meters, i.e. pre-multiplied by c) and drift (m/s).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClockState {
    pub delta: f64,
    pub delta_dot: f64,
}

impl ClockState {
    /// Default sanity bound on |delta_dot| in m/s.
    pub const MAX_DRIFT: f64 = 1e3;

    pub fn new(delta: f64, delta_dot: f64) -> Result<Self> {
        Self::with_drift_bound(delta, delta_dot, Self::MAX_DRIFT)
    }

    pub fn with_drift_bound(delta: f64, delta_dot: f64, bound: f64) -> Result<Self> {
        if !delta.is_finite() || !delta_dot.is_finite() {
            return invalid("clock state must be finite");
        }
        if delta_dot.abs() >= bound {
            return invalid(format!("clock drift {delta_dot} m/s exceeds bound {bound}"));
        }
        Ok(ClockState { delta, delta_dot })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudorangeMeasurement {
    pub time: Timestamp,
    pub sat_id: u32,
    pub sat_pos: Vector3<f64>,
    /// Measured range in meters.
    pub range: f64,
    pub nominal_std: f64,
}

impl PseudorangeMeasurement {
    pub fn new(
        time: Timestamp,
        sat_id: u32,
        sat_pos: Vector3<f64>,
        range: f64,
        nominal_std: f64,
    ) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() {
            return invalid(format!("pseudorange must be positive, got {range}"));
        }
        if !(nominal_std > 0.0) || !nominal_std.is_finite() {
            return invalid(format!("nominal std must be positive, got {nominal_std}"));
        }
        if !sat_pos.iter().all(|v| v.is_finite()) {
            return invalid("satellite position must be finite");
        }
        Ok(PseudorangeMeasurement { time, sat_id, sat_pos, range, nominal_std })
    }
}

/// Body-frame motion from the state at `time` to the state `dt` seconds
/// later. The information matrix orders its axes as (forward, lateral,
/// vertical, yaw).
#[derive(Clone, Debug, PartialEq)]
pub struct OdometryMeasurement {
    pub time: Timestamp,
    pub dt: f64,
    pub forward: f64,
    pub lateral: f64,
    pub vertical: f64,
    pub dyaw: f64,
    pub info: Matrix4<f64>,
}

impl OdometryMeasurement {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        time: Timestamp,
        dt: f64,
        forward: f64,
        lateral: f64,
        vertical: f64,
        dyaw: f64,
        info: Matrix4<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return invalid(format!("odometry dt must be positive, got {dt}"));
        }
        if ![forward, lateral, vertical, dyaw].iter().all(|v| v.is_finite()) {
            return invalid("odometry increments must be finite");
        }
        if (info - info.transpose()).abs().max() > 1e-9 * info.abs().max().max(1.0) {
            return invalid("odometry information matrix is not symmetric");
        }
        if info.cholesky().is_none() {
            return invalid("odometry information matrix is not positive definite");
        }
        Ok(OdometryMeasurement { time, dt, forward, lateral, vertical, dyaw, info })
    }

    /// Convenience constructor with a diagonal information matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn with_diagonal_info(
        time: Timestamp,
        dt: f64,
        forward: f64,
        lateral: f64,
        vertical: f64,
        dyaw: f64,
        info_diag: [f64; 4],
    ) -> Result<Self> {
        let info = Matrix4::from_diagonal(&info_diag.into());
        Self::new(time, dt, forward, lateral, vertical, dyaw, info)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    Pseudorange(PseudorangeMeasurement),
    Odometry(OdometryMeasurement),
}

impl Measurement {
    pub fn time(&self) -> Timestamp {
        match self {
            Measurement::Pseudorange(m) => m.time,
            Measurement::Odometry(m) => m.time,
        }
    }
}

/// A residual sample extracted from the factor graph after a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSample {
    pub value: DVector<f64>,
    /// Index of the factor inside the problem that produced it.
    pub source_factor: usize,
    pub time: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowState {
    pub time: Timestamp,
    pub pose: PoseState,
    pub clock: ClockState,
}

/// Time-ordered states retained for optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWindow {
    states: Vec<WindowState>,
    span: f64,
}

impl StateWindow {
    pub const DEFAULT_SPAN: f64 = 60.0;

    pub fn new(span: f64) -> Result<Self> {
        if !(span > 0.0) || !span.is_finite() {
            return invalid(format!("window span must be positive, got {span}"));
        }
        Ok(StateWindow { states: Vec::new(), span })
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn states(&self) -> &[WindowState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [WindowState] {
        &mut self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&WindowState> {
        self.states.last()
    }

    /// Append a state; its time must be strictly after the newest one.
    pub fn push(&mut self, state: WindowState) -> Result<()> {
        if let Some(last) = self.states.last() {
            if state.time <= last.time {
                return invalid(format!(
                    "state at t = {} is not after the newest window state at t = {}",
                    state.time, last.time
                ));
            }
        }
        self.states.push(state);
        Ok(())
    }

    /// Number of leading states that fall outside the span relative to `now`.
    pub(crate) fn expired_prefix(&self, now: Timestamp) -> usize {
        self.states
            .iter()
            .take_while(|s| now.0 - s.time.0 > self.span)
            .count()
    }
}

/// Drop every state and measurement older than `window.span()` seconds
/// before `now`. A state exactly `span` seconds old is kept.
pub fn trim_window(
    mut window: StateWindow,
    mut measurements: Vec<Measurement>,
    now: Timestamp,
) -> (StateWindow, Vec<Measurement>) {
    let span = window.span;
    let expired = window.expired_prefix(now);
    window.states.drain(..expired);
    measurements.retain(|m| now.0 - m.time().0 <= span);
    (window, measurements)
}
