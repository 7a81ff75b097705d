//! Synthetic urban GNSS scenarios with recorded ground truth.
//!
//! A scenario drives a vehicle through a script of constant speed and yaw
//! rate segments in a flat local frame, observed by static satellites on a
//! sphere around the origin. Pseudoranges carry Gaussian noise plus, inside
//! scheduled intervals, strictly positive NLOS offsets drawn from a mixture
//! of normals truncated at zero.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! duration = 300.0        # seconds
//! rate = 1.0              # epochs per second
//! seed = 1
//!
//! [satellites]
//! count = 8
//! geometry_seed = 7
//!
//! [noise]
//! pseudorange_std = 3.0                        # m
//! odometry_std = [0.05, 0.05, 0.02, 0.002]     # fwd, lat, vert (m), yaw (rad) per epoch
//!
//! [[trajectory]]
//! duration = 60.0
//! speed = 8.0        # m/s
//! yaw_rate = 0.0     # rad/s
//!
//! [[nlos]]
//! start = 150.0
//! end = 300.0
//! fraction = 0.25    # probability that a pseudorange in the interval is NLOS
//! offsets = [{ weight = 1.0, mean = 30.0, std = 10.0 }]
//! ```

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    wrap, ClockState, Measurement, OdometryMeasurement, PoseState, PseudorangeMeasurement, Timestamp,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub satellites: SatelliteSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub initial_pose: InitialPose,
    #[serde(default)]
    pub trajectory: Vec<Segment>,
    #[serde(default)]
    pub nlos: Vec<NlosInterval>,
}

fn default_rate() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SatelliteSpec {
    pub count: usize,
    pub geometry_seed: u64,
    /// Sphere radius in meters.
    pub radius: f64,
    pub min_elevation_deg: f64,
}

impl Default for SatelliteSpec {
    fn default() -> Self {
        SatelliteSpec { count: 8, geometry_seed: 7, radius: 2.02e7, min_elevation_deg: 15.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub pseudorange_std: f64,
    /// Per-epoch standard deviations of forward, lateral, vertical (m) and yaw (rad).
    pub odometry_std: [f64; 4],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { pseudorange_std: 3.0, odometry_std: [0.05, 0.05, 0.02, 0.002] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSpec {
    pub initial_offset: f64,
    pub initial_drift: f64,
    /// Random walk of the drift, m/s per sqrt(s).
    pub drift_walk_std: f64,
}

impl Default for ClockSpec {
    fn default() -> Self {
        ClockSpec { initial_offset: 100.0, initial_drift: 0.5, drift_walk_std: 0.01 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
}

/// Constant speed and yaw rate for `duration` seconds. The script repeats
/// when the scenario outlasts it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration: f64,
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlosInterval {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
    pub offsets: Vec<OffsetComponent>,
}

/// One normal component of the offset distribution, truncated at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::InvalidScenario(vec![e.to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario specs always serialize")
    }

    /// Check every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            errs.push(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            errs.push(format!("rate must be positive, got {}", self.rate));
        }
        if self.satellites.count == 0 {
            errs.push("satellites.count must be at least 1".into());
        }
        if !(self.satellites.radius > 1e3) {
            errs.push(format!("satellites.radius must exceed 1 km, got {}", self.satellites.radius));
        }
        if !(0.0..85.0).contains(&self.satellites.min_elevation_deg) {
            errs.push("satellites.min_elevation_deg must be in [0, 85)".into());
        }
        if !(self.noise.pseudorange_std >= 0.0) {
            errs.push("noise.pseudorange_std must be non-negative".into());
        }
        if !self.noise.odometry_std.iter().all(|s| *s > 0.0 && s.is_finite()) {
            errs.push("noise.odometry_std entries must be positive".into());
        }
        if !(self.clock.drift_walk_std >= 0.0) || self.clock.initial_drift.abs() >= ClockState::MAX_DRIFT {
            errs.push("clock drift settings out of range".into());
        }
        for (i, s) in self.trajectory.iter().enumerate() {
            if !(s.duration > 0.0) {
                errs.push(format!("trajectory[{i}].duration must be positive"));
            }
            if !s.speed.is_finite() || !s.yaw_rate.is_finite() {
                errs.push(format!("trajectory[{i}] speed and yaw_rate must be finite"));
            }
        }
        for (i, n) in self.nlos.iter().enumerate() {
            if !(n.end > n.start) {
                errs.push(format!("nlos[{i}]: end must be after start"));
            }
            if !(0.0..=1.0).contains(&n.fraction) {
                errs.push(format!("nlos[{i}].fraction must be in [0, 1], got {}", n.fraction));
            }
            if n.offsets.is_empty() {
                errs.push(format!("nlos[{i}].offsets must not be empty"));
            }
            for (j, c) in n.offsets.iter().enumerate() {
                if !(c.weight > 0.0) || !(c.std > 0.0) || !c.mean.is_finite() {
                    errs.push(format!("nlos[{i}].offsets[{j}] needs weight > 0, std > 0, finite mean"));
                } else if c.mean + 8.0 * c.std <= 0.0 {
                    errs.push(format!("nlos[{i}].offsets[{j}] has almost no mass above zero"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(errs))
        }
    }

    pub fn epoch_count(&self) -> usize {
        (self.duration * self.rate).floor() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthEpoch {
    pub time: Timestamp,
    pub pose: PoseState,
    pub clock: ClockState,
}

/// Ground truth aligned with the generated measurements.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub epochs: Vec<TruthEpoch>,
    /// NLOS offset applied to each pseudorange, in stream order (0 for LOS).
    pub offsets: Vec<f64>,
}

/// Draw from a mixture of normals truncated to positive values.
pub fn sample_offset<R: Rng>(rng: &mut R, components: &[OffsetComponent]) -> f64 {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let mut u = rng.random::<f64>() * total;
    let mut chosen = &components[components.len() - 1];
    for c in components {
        if u < c.weight {
            chosen = c;
            break;
        }
        u -= c.weight;
    }
    let normal = Normal::new(chosen.mean, chosen.std).expect("validated std");
    loop {
        let v = normal.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
}

fn satellite_positions(spec: &SatelliteSpec) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
    let min_el = spec.min_elevation_deg.to_radians();
    let max_el = 85f64.to_radians();
    (0..spec.count)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / spec.count as f64 + rng.random_range(-0.3..0.3);
            let el = rng.random_range(min_el..max_el);
            Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * spec.radius
        })
        .collect()
}

/// Body-frame displacement and yaw change for constant speed and yaw rate.
fn arc(speed: f64, yaw_rate: f64, dt: f64) -> (f64, f64, f64) {
    let dyaw = yaw_rate * dt;
    if dyaw.abs() < 1e-9 {
        (speed * dt, speed * dt * dyaw / 2.0, dyaw)
    } else {
        let r = speed / yaw_rate;
        (r * dyaw.sin(), r * (1.0 - dyaw.cos()), dyaw)
    }
}

fn segment_at(script: &[Segment], t: f64) -> (f64, f64) {
    if script.is_empty() {
        return (0.0, 0.0);
    }
    let total: f64 = script.iter().map(|s| s.duration).sum();
    let mut u = t.rem_euclid(total);
    for s in script {
        if u < s.duration {
            return (s.speed, s.yaw_rate);
        }
        u -= s.duration;
    }
    let last = &script[script.len() - 1];
    (last.speed, last.yaw_rate)
}

/// Generate the measurement stream and its ground truth. Within an epoch
/// pseudoranges come first (by satellite id), then the odometry record that
/// describes the motion to the next epoch.
pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<Measurement>, GroundTruth)> {
    spec.validate()?;
    let sats = satellite_positions(&spec.satellites);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dt = 1.0 / spec.rate;
    let n = spec.epoch_count();
    let std = spec.noise.pseudorange_std;
    let odo_std = spec.noise.odometry_std;
    let odo_info = odo_std.map(|s| 1.0 / (s * s));
    // a zero noise level still needs a positive nominal std in the records
    let nominal_std = if std > 0.0 { std } else { 1.0 };

    let p0 = &spec.initial_pose;
    let mut pose = PoseState::new(p0.x, p0.y, p0.z, p0.phi)?;
    let mut clock = ClockState::new(spec.clock.initial_offset, spec.clock.initial_drift)?;
    let mut measurements = Vec::new();
    let mut truth = GroundTruth::default();

    for k in 0..n {
        let t = k as f64 * dt;
        let time = Timestamp::new(t)?;
        truth.epochs.push(TruthEpoch { time, pose, clock });
        let schedule = spec.nlos.iter().find(|s| t >= s.start && t < s.end);
        for (id, sat) in sats.iter().enumerate() {
            let geometric = (sat - pose.position()).norm();
            let noise = if std > 0.0 { std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            let offset = match schedule {
                Some(s) if rng.random::<f64>() < s.fraction => sample_offset(&mut rng, &s.offsets),
                _ => 0.0,
            };
            truth.offsets.push(offset);
            let range = geometric + clock.delta + noise + offset;
            measurements.push(Measurement::Pseudorange(PseudorangeMeasurement::new(
                time,
                id as u32 + 1,
                *sat,
                range,
                nominal_std,
            )?));
        }
        if k + 1 == n {
            break;
        }
        let (speed, yaw_rate) = segment_at(&spec.trajectory, t);
        let (fwd, lat, dyaw) = arc(speed, yaw_rate, dt);
        let noisy = |v: f64, s: f64, rng: &mut ChaCha8Rng| v + s * rng.sample::<f64, _>(StandardNormal);
        let m_fwd = noisy(fwd, odo_std[0], &mut rng);
        let m_lat = noisy(lat, odo_std[1], &mut rng);
        let m_vert = noisy(0.0, odo_std[2], &mut rng);
        let m_yaw = noisy(dyaw, odo_std[3], &mut rng);
        measurements.push(Measurement::Odometry(OdometryMeasurement::with_diagonal_info(
            time, dt, m_fwd, m_lat, m_vert, m_yaw, odo_info,
        )?));

        let (s, c) = pose.phi.sin_cos();
        pose = PoseState {
            x: pose.x + c * fwd - s * lat,
            y: pose.y + s * fwd + c * lat,
            z: pose.z,
            phi: wrap(pose.phi + dyaw),
        };
        let walk = spec.clock.drift_walk_std * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        clock = ClockState { delta: clock.delta + clock.delta_dot * dt, delta_dot: clock.delta_dot + walk };
    }
    Ok((measurements, truth))
}

/// True pseudorange errors (noise plus NLOS offset), `measured - model`,
/// evaluated at the ground-truth states.
pub fn empirical_error_distribution(truth: &GroundTruth, measurements: &[Measurement]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut epoch = 0;
    for m in measurements {
        let Measurement::Pseudorange(pr) = m else { continue };
        while epoch < truth.epochs.len() && truth.epochs[epoch].time < pr.time {
            epoch += 1;
        }
        let Some(te) = truth.epochs.get(epoch).filter(|e| e.time == pr.time) else {
            return Err(Error::MissingTruth(pr.time.0));
        };
        let model = (pr.sat_pos - te.pose.position()).norm() + te.clock.delta;
        out.push(pr.range - model);
    }
    if !truth.offsets.is_empty() && truth.offsets.len() != out.len() {
        return invalid(format!(
            "ground truth records {} offsets for {} pseudoranges",
            truth.offsets.len(),
            out.len()
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::pseudorange_error;

    fn base(duration: f64) -> ScenarioSpec {
        ScenarioSpec {
            duration,
            rate: 1.0,
            seed: 3,
            satellites: SatelliteSpec::default(),
            noise: NoiseSpec::default(),
            clock: ClockSpec::default(),
            initial_pose: InitialPose::default(),
            trajectory: vec![
                Segment { duration: 30.0, speed: 8.0, yaw_rate: 0.0 },
                Segment { duration: 10.0, speed: 5.0, yaw_rate: 0.15 },
            ],
            nlos: vec![],
        }
    }

    #[test]
    fn noise_free_measurements_are_consistent() {
        let mut spec = base(60.0);
        spec.noise.pseudorange_std = 0.0;
        let (meas, truth) = generate(&spec).unwrap();
        let errors = empirical_error_distribution(&truth, &meas).unwrap();
        assert!(errors.iter().all(|e| *e == 0.0));
        for m in &meas {
            if let Measurement::Pseudorange(pr) = m {
                let te = truth.epochs.iter().find(|e| e.time == pr.time).unwrap();
                let (e, _) = pseudorange_error(&te.pose, &te.clock, pr).unwrap();
                assert!(e.abs() < 1e-6, "{e}");
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut spec = base(40.0);
        spec.nlos.push(NlosInterval {
            start: 10.0,
            end: 30.0,
            fraction: 0.3,
            offsets: vec![OffsetComponent { weight: 1.0, mean: 30.0, std: 10.0 }],
        });
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn truncated_offset_mean() {
        // mean of N(30, 10^2) truncated at 0: 30 + 10 phi(3) / Phi(3) = 30.0443
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let comps = [OffsetComponent { weight: 1.0, mean: 30.0, std: 10.0 }];
        let draws: Vec<f64> = (0..10_000).map(|_| sample_offset(&mut rng, &comps)).collect();
        assert!(draws.iter().all(|d| *d > 0.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 30.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn unbiased_noise_variance() {
        let spec = base(200.0);
        let (meas, truth) = generate(&spec).unwrap();
        let e = empirical_error_distribution(&truth, &meas).unwrap();
        assert!(e.len() >= 1000);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
        assert!((var - 9.0).abs() < 0.9, "{var}");
    }

    #[test]
    fn offsets_align_with_errors() {
        let mut spec = base(100.0);
        spec.noise.pseudorange_std = 0.0;
        spec.nlos.push(NlosInterval {
            start: 0.0,
            end: 100.0,
            fraction: 0.5,
            offsets: vec![OffsetComponent { weight: 1.0, mean: 40.0, std: 5.0 }],
        });
        let (meas, truth) = generate(&spec).unwrap();
        let e = empirical_error_distribution(&truth, &meas).unwrap();
        for (a, b) in e.iter().zip(&truth.offsets) {
            assert!((a - b).abs() < 1e-6);
        }
        let nlos = e.iter().filter(|v| **v > 0.0).count() as f64 / e.len() as f64;
        assert!((nlos - 0.5).abs() < 0.05);
    }

    #[test]
    fn empty_schedule_without_noise_is_all_zero() {
        let mut spec = base(10.0);
        spec.noise.pseudorange_std = 0.0;
        let (meas, truth) = generate(&spec).unwrap();
        assert!(empirical_error_distribution(&truth, &meas).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut spec = base(-1.0);
        spec.rate = 0.0;
        spec.nlos.push(NlosInterval { start: 5.0, end: 1.0, fraction: 2.0, offsets: vec![] });
        match spec.validate() {
            Err(Error::InvalidScenario(errs)) => assert!(errs.len() >= 5, "{errs:?}"),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = base(50.0);
        spec.nlos.push(NlosInterval {
            start: 10.0,
            end: 20.0,
            fraction: 0.25,
            offsets: vec![OffsetComponent { weight: 1.0, mean: 30.0, std: 10.0 }],
        });
        assert_eq!(ScenarioSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(ScenarioSpec::from_toml("duration = 10\nbogus = 1\n").is_err());
    }

    #[test]
    fn odometry_matches_truth_motion() {
        let mut spec = base(80.0);
        spec.noise.odometry_std = [1e-12; 4];
        let (meas, truth) = generate(&spec).unwrap();
        let odo: Vec<_> = meas
            .iter()
            .filter_map(|m| if let Measurement::Odometry(o) = m { Some(o) } else { None })
            .collect();
        assert_eq!(odo.len(), truth.epochs.len() - 1);
        for (o, w) in odo.iter().zip(truth.epochs.windows(2)) {
            let (e, _, _) = crate::factors::odometry_error(&w[0].pose, &w[1].pose, o);
            assert!(e.norm() < 1e-9, "{e}");
        }
    }
}
