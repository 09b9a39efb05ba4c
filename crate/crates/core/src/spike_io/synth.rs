//! Seeded synthetic corpora with a known decodable signal.
//!
//! Counts are independent Poisson draws per (time step, unit). The
//! classification generator uses cosine direction tuning; the regression
//! generator drives rectified-linear units from a smoothed 2-D random walk
//! that doubles as the velocity label.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};

use super::record::{Label, MetadataRecord, SpikeRecording};

/// Stream id reserved for per-unit tuning draws; trials use their index.
const TUNING_STREAM: u64 = u64::MAX;

pub(crate) fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("finite positive rate").sample(rng) as u32
}

fn session_name(s: usize) -> String {
    format!("day-{:02}", s + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterOutParams {
    pub n_trials: usize,
    pub n_units: usize,
    pub t_raw: usize,
    pub n_classes: usize,
    /// Hz.
    pub base_rate: f64,
    /// Hz; must not exceed `base_rate`.
    pub mod_depth: f64,
    pub sample_rate_hz: f64,
    /// Trials are assigned to sessions round-robin.
    pub n_sessions: usize,
    pub seed: u64,
}

impl Default for CenterOutParams {
    fn default() -> Self {
        CenterOutParams {
            n_trials: 256,
            n_units: 70,
            t_raw: 1000,
            n_classes: 8,
            base_rate: 60.0,
            mod_depth: 40.0,
            sample_rate_hz: 100.0,
            n_sessions: 1,
            seed: 0,
        }
    }
}

impl CenterOutParams {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.n_units == 0 || self.t_raw == 0 || self.n_sessions == 0 {
            return Err(Error::Validation("units, steps and sessions must be positive".into()));
        }
        if !(self.base_rate >= 0.0 && self.mod_depth >= 0.0 && self.sample_rate_hz > 0.0) {
            return Err(Error::Validation("rates must be non-negative and the sample rate positive".into()));
        }
        if self.base_rate < self.mod_depth {
            return Err(Error::NegativeRate { base: self.base_rate, depth: self.mod_depth });
        }
        Ok(())
    }

    /// Preferred direction of every unit: evenly spaced plus seeded jitter.
    pub fn preferred_angles(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TUNING_STREAM);
        let spacing = 2.0 * PI / self.n_units as f64;
        (0..self.n_units).map(|c| c as f64 * spacing + (rng.random::<f64>() - 0.5) * spacing).collect()
    }
}

/// Center-out reaching trials; trial `i` moves toward class `i % n_classes`.
pub fn gen_center_out(p: &CenterOutParams) -> Result<Vec<SpikeRecording>> {
    p.validate()?;
    let angles = p.preferred_angles();
    (0..p.n_trials)
        .map(|i| {
            let class = i % p.n_classes;
            let theta = 2.0 * PI * class as f64 / p.n_classes as f64;
            let lambdas: Vec<f64> = angles
                .iter()
                .map(|phi| (p.base_rate + p.mod_depth * (theta - phi).cos()) / p.sample_rate_hz)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(i as u64);
            let mut counts = Vec::with_capacity(p.t_raw * p.n_units);
            for _ in 0..p.t_raw {
                counts.extend(lambdas.iter().map(|&l| poisson(&mut rng, l)));
            }
            let meta = MetadataRecord::new(
                "Macaque",
                "SYN-CO",
                "S1",
                "M1",
                "center-out",
                &session_name(i % p.n_sessions),
            );
            SpikeRecording::new(p.t_raw, p.n_units, counts, p.sample_rate_hz, meta, Some(Label::Class(class as u32)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicsParams {
    pub n_trials: usize,
    pub n_units: usize,
    pub t_raw: usize,
    pub sample_rate_hz: f64,
    /// Hz at zero velocity.
    pub base_rate: f64,
    /// Hz per unit of velocity along the preferred direction.
    pub gain: f64,
    /// AR(1) coefficient of the velocity walk.
    pub smoothing: f64,
    /// Innovation standard deviation of the walk; 0 freezes the velocity.
    pub walk_std: f64,
    pub n_sessions: usize,
    pub seed: u64,
}

impl Default for KinematicsParams {
    fn default() -> Self {
        KinematicsParams {
            n_trials: 200,
            n_units: 70,
            t_raw: 1000,
            sample_rate_hz: 100.0,
            base_rate: 40.0,
            gain: 30.0,
            smoothing: 0.98,
            walk_std: 0.2,
            n_sessions: 1,
            seed: 0,
        }
    }
}

/// Reaching trials labelled with their 2-D velocity at every raw step.
pub fn gen_kinematics(p: &KinematicsParams) -> Result<Vec<SpikeRecording>> {
    if p.n_units == 0 || p.t_raw == 0 || p.n_sessions == 0 {
        return Err(Error::Validation("units, steps and sessions must be positive".into()));
    }
    if !(p.base_rate >= 0.0 && p.gain >= 0.0 && p.walk_std >= 0.0 && p.sample_rate_hz > 0.0) {
        return Err(Error::Validation("rates, gain and walk std must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&p.smoothing) {
        return Err(Error::Validation(format!("smoothing {} outside [0, 1]", p.smoothing)));
    }
    let mut tuning_rng = ChaCha8Rng::seed_from_u64(p.seed);
    tuning_rng.set_stream(TUNING_STREAM);
    let dirs: Vec<(f64, f64)> = (0..p.n_units)
        .map(|_| {
            let a = tuning_rng.random::<f64>() * 2.0 * PI;
            (a.cos(), a.sin())
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..p.n_trials)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(i as u64);
            let mut v = (0.0f64, 0.0f64);
            let mut counts = Vec::with_capacity(p.t_raw * p.n_units);
            let mut labels = Vec::with_capacity(p.t_raw * 2);
            for _ in 0..p.t_raw {
                v.0 = p.smoothing * v.0 + p.walk_std * normal.sample(&mut rng);
                v.1 = p.smoothing * v.1 + p.walk_std * normal.sample(&mut rng);
                labels.extend([v.0, v.1]);
                for &(ux, uy) in &dirs {
                    let rate = (p.base_rate + p.gain * (ux * v.0 + uy * v.1)).max(0.0);
                    counts.push(poisson(&mut rng, rate / p.sample_rate_hz));
                }
            }
            let meta =
                MetadataRecord::new("Macaque", "SYN-KIN", "S1", "M1", "reaching", &session_name(i % p.n_sessions));
            SpikeRecording::new(
                p.t_raw,
                p.n_units,
                counts,
                p.sample_rate_hz,
                meta,
                Some(Label::Sequence { dims: 2, values: labels }),
            )
        })
        .collect()
}
