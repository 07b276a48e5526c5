//! First-order (Nomoto-style) vessel maneuvering model with wind, wave,
//! current and gust forcing.

use std::f64::consts::PI;
use std::fmt;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledTrace;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::timeseries::{FeatureSchema, MultivariateSeries};

/// Zigzag and turning angles accepted by the generator, in degrees.
pub const MANEUVER_ANGLES: [f64; 4] = [10.0, 15.0, 20.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomIntensity {
    One,
    Low,
    High,
}

impl RandomIntensity {
    /// Step-size scale of the random rudder walk.
    pub fn scale(self) -> f64 {
        match self {
            RandomIntensity::Low => 0.5,
            RandomIntensity::One => 1.0,
            RandomIntensity::High => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RandomIntensity::One => "1",
            RandomIntensity::Low => "low",
            RandomIntensity::High => "high",
        }
    }

    pub const ALL: [RandomIntensity; 3] = [
        RandomIntensity::One,
        RandomIntensity::Low,
        RandomIntensity::High,
    ];
}

/// Maneuver with its variant parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Maneuver {
    /// Rudder flips between `+-angle` whenever heading crosses `+-angle`.
    Zigzag(f64),
    /// Rudder held at `angle`.
    Turning(f64),
    /// Bounded random walk on the rudder command.
    Random(RandomIntensity),
}

impl Maneuver {
    pub fn kind(&self) -> &'static str {
        match self {
            Maneuver::Zigzag(_) => "zigzag",
            Maneuver::Turning(_) => "turning",
            Maneuver::Random(_) => "random",
        }
    }

    /// Every variant of a maneuver kind (`zigzag`, `turning` or `random`).
    pub fn variants(kind: &str) -> Result<Vec<Maneuver>> {
        match kind {
            "zigzag" => Ok(MANEUVER_ANGLES
                .iter()
                .map(|&a| Maneuver::Zigzag(a))
                .collect()),
            "turning" => Ok(MANEUVER_ANGLES
                .iter()
                .map(|&a| Maneuver::Turning(a))
                .collect()),
            "random" => Ok(RandomIntensity::ALL
                .iter()
                .map(|&i| Maneuver::Random(i))
                .collect()),
            other => Err(Error::invalid(format!("unknown maneuver {other:?}"))),
        }
    }

    /// Parses `kind` plus a variant string (`"20"`, `"low"`, ...).
    pub fn parse(kind: &str, variant: &str) -> Result<Maneuver> {
        let m = match kind {
            "zigzag" | "turning" => {
                let a: f64 = variant
                    .parse()
                    .map_err(|_| Error::invalid(format!("invalid {kind} angle {variant:?}")))?;
                if kind == "zigzag" {
                    Maneuver::Zigzag(a)
                } else {
                    Maneuver::Turning(a)
                }
            }
            "random" => Maneuver::Random(match variant {
                "1" => RandomIntensity::One,
                "low" => RandomIntensity::Low,
                "high" => RandomIntensity::High,
                other => {
                    return Err(Error::invalid(format!(
                        "invalid random intensity {other:?} (expected 1, low or high)"
                    )))
                }
            }),
            other => return Err(Error::invalid(format!("unknown maneuver {other:?}"))),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Maneuver::Zigzag(a) | Maneuver::Turning(a) if !MANEUVER_ANGLES.contains(a) => {
                Err(Error::invalid(format!(
                    "{} angle must be one of 10, 15, 20, 30 degrees, got {a}",
                    self.kind()
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Maneuver::Zigzag(a) => write!(f, "zigzag-{a}"),
            Maneuver::Turning(a) => write!(f, "turning-{a}"),
            Maneuver::Random(i) => write!(f, "random-{}", i.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceCase {
    None,
    /// Wind, waves and current from minute 7; only gusts after minute 14.
    Case1,
    /// Light wind and waves throughout, strong wind and current minutes 7-14.
    Case2,
    /// Wind, waves and current from minute 7; calm again after minute 14.
    Case3,
}

impl DisturbanceCase {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "case1" | "1" => Ok(Self::Case1),
            "case2" | "2" => Ok(Self::Case2),
            "case3" | "3" => Ok(Self::Case3),
            other => Err(Error::invalid(format!(
                "unknown disturbance case {other:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Case1 => "case1",
            Self::Case2 => "case2",
            Self::Case3 => "case3",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselScenario {
    pub maneuver: Maneuver,
    pub disturbance: DisturbanceCase,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl VesselScenario {
    pub fn new(maneuver: Maneuver, disturbance: DisturbanceCase, seed: u64) -> Self {
        Self {
            maneuver,
            disturbance,
            duration_s: 1200.0,
            sample_rate_hz: 1.0,
            seed,
        }
    }

    pub fn name(&self) -> String {
        format!(
            "vessel/{}/{}/seed{}",
            self.maneuver,
            self.disturbance.name(),
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.maneuver.validate()?;
        if !(self.duration_s >= 60.0) {
            return Err(Error::invalid(format!(
                "vessel duration must be >= 60 s, got {}",
                self.duration_s
            )));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz <= 100.0) {
            return Err(Error::invalid("vessel sample rate must lie in (0, 100] Hz"));
        }
        if self.disturbance != DisturbanceCase::None && self.duration_s < DISTURBANCE_END_S {
            return Err(Error::invalid(
                "disturbed scenarios need at least 14 minutes of simulated time",
            ));
        }
        Ok(())
    }
}

pub(crate) const DISTURBANCE_START_S: f64 = 420.0;
pub(crate) const DISTURBANCE_END_S: f64 = 840.0;
const RAMP_S: f64 = 60.0;

// Plant constants.
const DT: f64 = 0.05;
const U0: f64 = 5.0; // nominal surge speed, m/s
const NOMOTO_K: f64 = 0.06; // steady yaw rate per degree of rudder, 1/s
const NOMOTO_T: f64 = 12.0; // yaw time constant, s
const RUDDER_RATE: f64 = 5.0; // deg/s
const RUDDER_MAX: f64 = 35.0;
const SURGE_T: f64 = 30.0;
const SWAY_T: f64 = 5.0;
const SWAY_COUPLING: f64 = 0.05; // v_ss = -c * u * r
const HEEL_COUPLING: f64 = 0.4; // phi_ss = c * u * r
const ROLL_PERIOD: f64 = 10.0;
const ROLL_DAMPING: f64 = 0.15;

// Forcing magnitudes at full disturbance level.
const WIND_SURGE: f64 = 0.6;
const WIND_SWAY: f64 = 0.5;
const WIND_YAW: f64 = 0.4;
const WIND_HEEL: f64 = 4.0;
const CURRENT_SPEED: f64 = 0.6;
const CURRENT_DIR_DEG: f64 = 205.0;
const WAVE_PERIOD: f64 = 7.0;
const WAVE_ROLL: f64 = 2.5; // deg of roll excitation amplitude
const WAVE_SWAY: f64 = 0.15;
const GUST_TAU: f64 = 5.0;
const GUST_GAIN: f64 = 0.35;
const RESIDUAL_GUST: f64 = 0.15;
const CASE2_LIGHT: f64 = 0.25;

// Noise floor.
const PROCESS_NOISE_R: f64 = 0.03;
const PROCESS_NOISE_P: f64 = 0.05;
const MEAS_NOISE: [f64; 5] = [0.01, 0.01, 0.02, 0.05, 0.05];

/// `(steady wind/wave/current level, residual gust level)` at time `t`.
fn disturbance_levels(case: DisturbanceCase, t: f64) -> (f64, f64) {
    let ramp = ((t - DISTURBANCE_START_S) / RAMP_S).clamp(0.0, 1.0);
    let during = t < DISTURBANCE_END_S;
    match case {
        DisturbanceCase::None => (0.0, 0.0),
        DisturbanceCase::Case1 => {
            if during {
                (ramp, 0.0)
            } else {
                (0.0, RESIDUAL_GUST)
            }
        }
        DisturbanceCase::Case2 => {
            if during {
                (CASE2_LIGHT + (1.0 - CASE2_LIGHT) * ramp, 0.0)
            } else {
                (CASE2_LIGHT, 0.0)
            }
        }
        DisturbanceCase::Case3 => (if during { ramp } else { 0.0 }, 0.0),
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a vessel trace with states
/// `[Surge Speed, Sway Speed, Yaw Rate, Roll Angle, Roll Rate]`
/// (m/s, m/s, deg/s, deg, deg/s).
pub fn gen_vessel(scenario: &VesselScenario) -> Result<LabeledTrace> {
    scenario.validate()?;
    let seed = scenario.seed;
    let mut steer_rng = stream(seed, "vessel-steer", &[]);
    let mut gust_rng = stream(seed, "vessel-gust", &[]);
    let mut proc_rng = [
        stream(seed, "vessel-process", &[0]),
        stream(seed, "vessel-process", &[1]),
    ];
    let mut meas_rng: Vec<StreamRng> = (0..5)
        .map(|c| stream(seed, "vessel-measurement", &[c]))
        .collect();
    let wave_phase = {
        use rand::Rng;
        stream(seed, "vessel-wave", &[]).random::<f64>() * 2.0 * PI
    };

    let n = (scenario.duration_s * scenario.sample_rate_hz).round() as usize;
    let sample_dt = 1.0 / scenario.sample_rate_hz;
    let substeps = ((sample_dt / DT).round() as usize).max(1);
    let dt = sample_dt / substeps as f64;

    let omega = 2.0 * PI / ROLL_PERIOD;
    let (mut u, mut v, mut r, mut psi, mut phi, mut p) = (U0, 0.0, 0.0, 0.0f64, 0.0, 0.0);
    let mut gust = 0.0;
    let mut delta_cmd = match scenario.maneuver {
        Maneuver::Zigzag(a) | Maneuver::Turning(a) => a,
        Maneuver::Random(_) => 0.0,
    };
    let mut delta = 0.0f64;
    let mut next_random_update = 0.0;

    let mut values = Array2::zeros((n, 5));
    for k in 0..n {
        let state = [u, v, r, phi, p];
        for (c, s) in state.iter().enumerate() {
            values[[k, c]] = s + MEAS_NOISE[c] * normal(&mut meas_rng[c]);
        }
        for sub in 0..substeps {
            let t = k as f64 * sample_dt + sub as f64 * dt;

            match scenario.maneuver {
                Maneuver::Zigzag(a) => {
                    if delta_cmd > 0.0 && psi >= a {
                        delta_cmd = -a;
                    } else if delta_cmd < 0.0 && psi <= -a {
                        delta_cmd = a;
                    }
                }
                Maneuver::Turning(_) => {}
                Maneuver::Random(intensity) => {
                    if t >= next_random_update {
                        next_random_update += 10.0;
                        delta_cmd = (0.9 * delta_cmd
                            + intensity.scale() * 4.0 * normal(&mut steer_rng))
                        .clamp(-RUDDER_MAX, RUDDER_MAX);
                    }
                }
            }
            let max_step = RUDDER_RATE * dt;
            delta += (delta_cmd - delta).clamp(-max_step, max_step);

            let (level, residual) = disturbance_levels(scenario.disturbance, t);
            gust += -gust / GUST_TAU * dt + (2.0 * dt / GUST_TAU).sqrt() * normal(&mut gust_rng);
            let wind = level * (1.0 + GUST_GAIN * gust) + residual * gust;
            let wind_dir = 45.0 + 30.0 * (2.0 * PI * t / 240.0).sin();
            let rel = (wind_dir - psi).to_radians();
            let rel_c = (CURRENT_DIR_DEG - psi).to_radians();
            let current = CURRENT_SPEED * level;
            let wave = (2.0 * PI * t / WAVE_PERIOD + wave_phase).sin() * level;

            let surge_shift = -WIND_SURGE * wind * rel.cos() + current * rel_c.cos();
            let sway_shift =
                WIND_SWAY * wind * rel.sin() + current * rel_c.sin() + WAVE_SWAY * wave;
            let yaw_bias = WIND_YAW * wind * (2.0 * rel).sin();
            let heel = WIND_HEEL * wind * rel.sin();

            let dr = (NOMOTO_K * delta + yaw_bias - r) / NOMOTO_T;
            let u_target = U0 * (1.0 - 0.08 * (r / 1.5).powi(2)) + surge_shift;
            let du = (u_target - u) / SURGE_T;
            let v_target = -SWAY_COUPLING * u * r + sway_shift;
            let dv = (v_target - v) / SWAY_T;
            let phi_ss = HEEL_COUPLING * u * r + heel;
            let dp = -2.0 * ROLL_DAMPING * omega * p - omega * omega * (phi - phi_ss)
                + omega * omega * WAVE_ROLL * wave;

            r += dr * dt + PROCESS_NOISE_R * dt.sqrt() * normal(&mut proc_rng[0]);
            p += dp * dt + PROCESS_NOISE_P * dt.sqrt() * normal(&mut proc_rng[1]);
            psi += r * dt;
            u += du * dt;
            v += dv * dt;
            phi += p * dt;
        }
    }

    let series = MultivariateSeries::new(FeatureSchema::vessel(), scenario.sample_rate_hz, values)?;
    let interval = match scenario.disturbance {
        DisturbanceCase::None => None,
        _ => Some((
            (DISTURBANCE_START_S * scenario.sample_rate_hz).round() as usize,
            ((DISTURBANCE_END_S * scenario.sample_rate_hz).round() as usize).min(n),
        )),
    };
    LabeledTrace::new(series, interval, scenario.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::disturbance_contrast;

    fn all_maneuvers() -> Vec<Maneuver> {
        ["zigzag", "turning", "random"]
            .iter()
            .flat_map(|k| Maneuver::variants(k).unwrap())
            .collect()
    }

    #[test]
    fn clean_trace_has_no_interval() {
        let t = gen_vessel(&VesselScenario::new(
            Maneuver::Zigzag(10.0),
            DisturbanceCase::None,
            1,
        ))
        .unwrap();
        assert_eq!(t.ood_interval, None);
        assert_eq!(t.series.len(), 1200);
    }

    #[test]
    fn disturbed_interval_is_minutes_7_to_14() {
        for case in [
            DisturbanceCase::Case1,
            DisturbanceCase::Case2,
            DisturbanceCase::Case3,
        ] {
            let t = gen_vessel(&VesselScenario::new(Maneuver::Turning(15.0), case, 1)).unwrap();
            assert_eq!(t.ood_interval, Some((420, 840)));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = VesselScenario::new(
            Maneuver::Random(RandomIntensity::High),
            DisturbanceCase::Case2,
            9,
        );
        assert_eq!(gen_vessel(&s).unwrap(), gen_vessel(&s).unwrap());
        let other = VesselScenario {
            seed: 10,
            ..s.clone()
        };
        assert_ne!(
            gen_vessel(&s).unwrap().series,
            gen_vessel(&other).unwrap().series
        );
    }

    #[test]
    fn invalid_variant_rejected() {
        let s = VesselScenario::new(Maneuver::Zigzag(12.0), DisturbanceCase::None, 1);
        assert!(gen_vessel(&s).is_err());
        assert!(Maneuver::parse("random", "medium").is_err());
        assert!(Maneuver::parse("spiral", "10").is_err());
        let short = VesselScenario {
            duration_s: 30.0,
            ..VesselScenario::new(Maneuver::Zigzag(10.0), DisturbanceCase::None, 1)
        };
        assert!(gen_vessel(&short).is_err());
    }

    #[test]
    fn clean_states_stay_bounded() {
        for m in all_maneuvers() {
            let max_cmd = match m {
                Maneuver::Zigzag(a) | Maneuver::Turning(a) => a,
                Maneuver::Random(_) => RUDDER_MAX,
            };
            let r_ss = NOMOTO_K * max_cmd;
            let phi_ss = HEEL_COUPLING * U0 * r_ss;
            let t = gen_vessel(&VesselScenario::new(m, DisturbanceCase::None, 4)).unwrap();
            let v = t.series.values();
            let max_r = v.column(2).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let max_phi = v.column(3).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(max_r <= 5.0 * r_ss, "{m}: |r| {max_r} vs ss {r_ss}");
            assert!(
                max_phi <= 5.0 * phi_ss,
                "{m}: |phi| {max_phi} vs ss {phi_ss}"
            );
        }
    }

    #[test]
    fn zigzag_heading_crosses_zero() {
        for a in MANEUVER_ANGLES {
            // heading is the integral of the yaw rate
            let t = gen_vessel(&VesselScenario::new(
                Maneuver::Zigzag(a),
                DisturbanceCase::None,
                2,
            ))
            .unwrap();
            let mut psi = 0.0;
            let mut crossings = 0;
            let mut prev_sign = 0.0f64;
            for r in t.series.values().column(2) {
                psi += r;
                let s = psi.signum();
                if prev_sign != 0.0 && s != 0.0 && s != prev_sign {
                    crossings += 1;
                }
                if s != 0.0 {
                    prev_sign = s;
                }
            }
            assert!(crossings >= 4, "zigzag {a}: {crossings} crossings");
        }
    }

    #[test]
    fn disturbed_interval_is_distinguishable() {
        for case in [
            DisturbanceCase::Case1,
            DisturbanceCase::Case2,
            DisturbanceCase::Case3,
        ] {
            for m in all_maneuvers() {
                let t = gen_vessel(&VesselScenario::new(m, case, 11)).unwrap();
                let c = disturbance_contrast(&t).unwrap();
                assert!(c >= 1.5, "{m} {case:?}: contrast {c}");
            }
        }
    }
}
