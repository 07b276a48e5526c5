//! Unicycle robot following waypoints under a proportional heading
//! controller, with a Gaussian odometry-noise episode.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledTrace;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::timeseries::{FeatureSchema, MultivariateSeries};

const DT: f64 = 0.01;
const START: (f64, f64, f64) = (2.0, 2.0, 0.0);
const MAP: (f64, f64) = (30.0, 20.0);
const V_MAX: f64 = 0.5;
const OMEGA_MAX: f64 = 1.0;
const K_HEADING: f64 = 1.5;
const K_DIST: f64 = 0.5;
const SWITCH_RADIUS: f64 = 0.25;
const PARK_RADIUS: f64 = 0.01;
const TAIL_S: f64 = 20.0;
const MAX_SIM_S: f64 = 3600.0;

/// Per-channel standard deviations of the injected odometry noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSigma {
    /// Applied to `x` and `y` (m).
    pub position: f64,
    /// Applied to `theta` (rad).
    pub orientation: f64,
    /// Applied to `v` (m/s) and `omega` (rad/s).
    pub velocity: f64,
}

impl NoiseSigma {
    pub const ZERO: NoiseSigma = NoiseSigma {
        position: 0.0,
        orientation: 0.0,
        velocity: 0.0,
    };
}

impl Default for NoiseSigma {
    fn default() -> Self {
        Self {
            position: 0.3,
            orientation: 0.3,
            velocity: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotScenario {
    pub waypoints: Vec<(f64, f64)>,
    pub noise_sigma: NoiseSigma,
    /// Defaults to the arrival time at the first waypoint.
    pub noise_start_s: Option<f64>,
    pub noise_duration_s: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl RobotScenario {
    pub fn new(waypoints: Vec<(f64, f64)>, seed: u64) -> Self {
        Self {
            waypoints,
            noise_sigma: NoiseSigma::default(),
            noise_start_s: None,
            noise_duration_s: 80.0,
            sample_rate_hz: 10.0,
            seed,
        }
    }

    pub fn name(&self) -> String {
        format!("robot/{}wp/seed{}", self.waypoints.len(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::invalid("robot scenario needs at least 2 waypoints"));
        }
        if !(self.noise_duration_s > 0.0) {
            return Err(Error::invalid("noise_duration_s must be positive"));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz <= 1.0 / DT) {
            return Err(Error::invalid(format!(
                "robot sample rate must lie in (0, {}] Hz",
                1.0 / DT
            )));
        }
        let s = self.noise_sigma;
        if [s.position, s.orientation, s.velocity]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::invalid("noise sigmas must be finite and >= 0"));
        }
        if let Some(t) = self.noise_start_s {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::invalid("noise_start_s must be >= 0"));
            }
        }
        for (i, a) in self.waypoints.iter().enumerate() {
            if !(a.0.is_finite() && a.1.is_finite()) {
                return Err(Error::invalid(format!("waypoint {i} is not finite")));
            }
            for (j, b) in self.waypoints.iter().enumerate().skip(i + 1) {
                if (a.0 - b.0).hypot(a.1 - b.1) < 2.0 * SWITCH_RADIUS {
                    return Err(Error::invalid(format!(
                        "waypoints {i} and {j} coincide (closer than {} m)",
                        2.0 * SWITCH_RADIUS
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws `n` waypoints inside the map, each at least `min_sep` metres from the
/// previous one (and from the start pose).
pub fn sample_waypoints(n: usize, min_sep: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = stream(seed, "robot-waypoints", &[]);
    let margin = 1.5;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut prev = (START.0, START.1);
    while out.len() < n {
        let p = (
            rng.random_range(margin..MAP.0 - margin),
            rng.random_range(margin..MAP.1 - margin),
        );
        let far_from_prev = (p.0 - prev.0).hypot(p.1 - prev.1) >= min_sep;
        let far_from_all = out
            .iter()
            .all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= 2.0 * SWITCH_RADIUS);
        if far_from_prev && far_from_all {
            out.push(p);
            prev = p;
        }
    }
    out
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Clean trajectory sampled at the output rate plus the arrival step at the
/// first waypoint.
fn simulate(s: &RobotScenario) -> Result<(Vec<[f64; 5]>, usize)> {
    let per_sample = ((1.0 / s.sample_rate_hz) / DT).round() as usize;
    let (mut x, mut y, mut theta) = START;
    let mut target = 0usize;
    let mut first_arrival: Option<usize> = None;
    let mut parked_at: Option<usize> = None;
    let mut rows = Vec::new();
    let mut step = 0usize;
    let max_steps = (MAX_SIM_S / DT) as usize;
    loop {
        let last = target + 1 == s.waypoints.len();
        let (tx, ty) = s.waypoints[target];
        let dist = (tx - x).hypot(ty - y);
        if !last && dist < SWITCH_RADIUS {
            if target == 0 {
                first_arrival = Some(rows.len());
            }
            target += 1;
            continue;
        }
        if last && parked_at.is_none() && dist < PARK_RADIUS {
            parked_at = Some(rows.len());
        }
        let (v, omega) = if parked_at.is_some() {
            (0.0, 0.0)
        } else {
            let err = wrap((ty - y).atan2(tx - x) - theta);
            let speed = if last {
                V_MAX.min(K_DIST * dist)
            } else {
                V_MAX
            };
            (
                speed * err.cos().max(0.0),
                (K_HEADING * err).clamp(-OMEGA_MAX, OMEGA_MAX),
            )
        };
        if step % per_sample == 0 {
            rows.push([x, y, theta, v, omega]);
        }
        if let (Some(p), Some(a)) = (parked_at, first_arrival) {
            let noise_end = s
                .noise_start_s
                .map(|t| (t * s.sample_rate_hz).round() as usize)
                .unwrap_or(a)
                + (s.noise_duration_s * s.sample_rate_hz).round() as usize;
            let tail = (TAIL_S * s.sample_rate_hz).round() as usize;
            if rows.len() >= (p + tail).max(noise_end + tail) {
                return Ok((rows, a));
            }
        }
        step += 1;
        if step > max_steps {
            return Err(Error::invalid(format!(
                "robot did not reach its waypoints within {MAX_SIM_S} s"
            )));
        }
        x += v * theta.cos() * DT;
        y += v * theta.sin() * DT;
        theta += omega * DT;
    }
}

/// Generates a robot trace with states `[x, y, theta, v, omega]`.
///
/// `theta` is unwrapped (continuous). Gaussian noise is added to the recorded
/// states for `noise_duration_s` starting at `noise_start_s`; the label
/// interval covers exactly the noisy steps.
pub fn gen_robot(scenario: &RobotScenario) -> Result<LabeledTrace> {
    scenario.validate()?;
    let (rows, arrival) = simulate(scenario)?;
    let n = rows.len();
    let start = scenario
        .noise_start_s
        .map(|t| (t * scenario.sample_rate_hz).round() as usize)
        .unwrap_or(arrival);
    let end = start + (scenario.noise_duration_s * scenario.sample_rate_hz).round() as usize;
    if end > n {
        return Err(Error::invalid(format!(
            "noise window ends at step {end} but the trace has {n} steps"
        )));
    }

    let sigma = scenario.noise_sigma;
    let sigmas = [
        sigma.position,
        sigma.position,
        sigma.orientation,
        sigma.velocity,
        sigma.velocity,
    ];
    let mut values = Array2::zeros((n, 5));
    for (i, row) in rows.iter().enumerate() {
        for (c, &val) in row.iter().enumerate() {
            values[[i, c]] = val;
        }
    }
    for (c, &sd) in sigmas.iter().enumerate() {
        if sd == 0.0 {
            continue;
        }
        let dist = Normal::new(0.0, sd).expect("validated sigma");
        let mut rng = stream(scenario.seed, "robot-noise", &[c as u64]);
        for i in start..end {
            values[[i, c]] += dist.sample(&mut rng);
        }
    }

    let series = MultivariateSeries::new(FeatureSchema::robot(), scenario.sample_rate_hz, values)?;
    LabeledTrace::new(series, Some((start, end)), scenario.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(seed: u64) -> RobotScenario {
        RobotScenario::new(sample_waypoints(5, 8.0, seed), seed)
    }

    #[test]
    fn noise_interval_is_800_steps() {
        let t = gen_robot(&scenario(1)).unwrap();
        let (a, b) = t.ood_interval.unwrap();
        assert_eq!(b - a, 800);
        assert!(a > 0);
    }

    #[test]
    fn zero_noise_equals_clean_trace() {
        let clean = RobotScenario {
            noise_sigma: NoiseSigma::ZERO,
            ..scenario(2)
        };
        let t = gen_robot(&clean).unwrap();
        let (rows, _) = simulate(&clean).unwrap();
        for (i, row) in rows.iter().enumerate() {
            for c in 0..5 {
                assert_eq!(t.series.values()[[i, c]], row[c]);
            }
        }
        // the noisy variant differs only inside the interval
        let noisy = gen_robot(&scenario(2)).unwrap();
        let (a, b) = noisy.ood_interval.unwrap();
        let diff = &noisy.series.values().view() - &t.series.values().view();
        for (i, r) in diff.rows().into_iter().enumerate() {
            let changed = r.iter().any(|d| *d != 0.0);
            assert_eq!(changed, (a..b).contains(&i), "row {i}");
        }
    }

    #[test]
    fn reaches_final_waypoint() {
        for seed in 0..4 {
            let s = scenario(seed);
            let t = gen_robot(&s).unwrap();
            let v = t.series.values();
            let last = v.row(v.nrows() - 1);
            let goal = *s.waypoints.last().unwrap();
            let d = (last[0] - goal.0).hypot(last[1] - goal.1);
            assert!(d < 0.1, "seed {seed}: final distance {d}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_robot(&scenario(5)).unwrap(),
            gen_robot(&scenario(5)).unwrap()
        );
        assert_eq!(sample_waypoints(5, 8.0, 1), sample_waypoints(5, 8.0, 1));
    }

    #[test]
    fn coincident_waypoints_rejected() {
        let s = RobotScenario::new(vec![(5.0, 5.0), (5.0, 5.0), (10.0, 3.0)], 0);
        assert!(gen_robot(&s).is_err());
        let s = RobotScenario::new(vec![(5.0, 5.0)], 0);
        assert!(gen_robot(&s).is_err());
        let s = RobotScenario {
            noise_duration_s: 0.0,
            ..scenario(0)
        };
        assert!(gen_robot(&s).is_err());
    }

    #[test]
    fn waypoints_respect_separation() {
        let w = sample_waypoints(5, 8.0, 7);
        let mut prev = (START.0, START.1);
        for p in w {
            assert!((p.0 - prev.0).hypot(p.1 - prev.1) >= 8.0);
            assert!(p.0 > 0.0 && p.0 < MAP.0 && p.1 > 0.0 && p.1 < MAP.1);
            prev = p;
        }
    }
}
