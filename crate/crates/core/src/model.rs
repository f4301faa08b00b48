//! Target dynamics, the Poisson measurement model, and scenario simulation.
//!
//! Each target state is `[x, vx, y, vy]`. Sensors see Poisson-many detections
//! per target (rate `lambda_k`) with Gaussian noise around the position, plus
//! Poisson-many clutter points (rate `lambda_0`) uniform over the region.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{psd_sqrt, symmetrize, GaussianBelief};
use crate::network::{generate_topology, Topology, TopologyKind};
use crate::rng::derive_seed;

pub const STATE_DIM: usize = 4;
pub const MEAS_DIM: usize = 2;

/// Position-selecting observation matrix for `[x, vx, y, vy]`.
pub fn position_observation() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
}

/// Per-target linear Gaussian transition, shared by all targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub transition: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub tau: f64,
}

impl DynamicsModel {
    /// Nearly-constant-velocity model with white acceleration intensity `q`.
    pub fn constant_velocity(tau: f64, q: f64) -> Self {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, tau, 0.0, 1.0]);
        let qd = DMatrix::from_row_slice(
            2,
            2,
            &[
                tau.powi(3) / 3.0,
                tau.powi(2) / 2.0,
                tau.powi(2) / 2.0,
                tau,
            ],
        ) * q;
        let mut transition = DMatrix::zeros(4, 4);
        let mut process_noise = DMatrix::zeros(4, 4);
        for d in 0..2 {
            transition.view_mut((2 * d, 2 * d), (2, 2)).copy_from(&f);
            process_noise.view_mut((2 * d, 2 * d), (2, 2)).copy_from(&qd);
        }
        Self {
            transition,
            process_noise,
            tau,
        }
    }

    pub fn new(transition: DMatrix<f64>, process_noise: DMatrix<f64>, tau: f64) -> Result<Self> {
        let n = transition.nrows();
        for m in [&transition, &process_noise] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: m.nrows(),
                });
            }
        }
        Ok(Self {
            transition,
            process_noise: symmetrize(&process_noise),
            tau,
        })
    }
}

/// Axis-aligned surveillance rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn square(side: f64) -> Self {
        Self {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Poisson measurement model of a single sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub observation: DMatrix<f64>,
    /// Measurement noise covariance, one per target.
    pub noise: Vec<DMatrix<f64>>,
    pub clutter_rate: f64,
    pub target_rates: Vec<f64>,
    pub region: Region,
}

impl SensorModel {
    /// Sensor with the same rate and isotropic noise variance for every target.
    pub fn uniform(
        num_targets: usize,
        target_rate: f64,
        clutter_rate: f64,
        noise_variance: f64,
        region: Region,
    ) -> Self {
        Self {
            observation: position_observation(),
            noise: vec![DMatrix::identity(2, 2) * noise_variance; num_targets],
            clutter_rate,
            target_rates: vec![target_rate; num_targets],
            region,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.target_rates.len()
    }

    pub fn volume(&self) -> f64 {
        self.region.area()
    }

    pub fn total_rate(&self) -> f64 {
        self.clutter_rate + self.target_rates.iter().sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise.len() != self.target_rates.len() {
            return Err(Error::DimensionMismatch {
                expected: self.target_rates.len(),
                actual: self.noise.len(),
            });
        }
        if self.clutter_rate < 0.0 || self.target_rates.iter().any(|&r| r < 0.0) {
            return Err(Error::config("sensor.rates", "Poisson rates must be >= 0"));
        }
        if !(self.volume() > 0.0) {
            return Err(Error::config("sensor.region", "region must have positive area"));
        }
        if self.noise.iter().any(|r| r.clone().cholesky().is_none()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }
}

/// Measurements of one sensor at one time step. Order carries no information.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementSet {
    pub points: Vec<[f64; 2]>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Kalman prediction applied independently to each target.
pub fn predict_prior(posterior: &[GaussianBelief], dynamics: &DynamicsModel) -> Vec<GaussianBelief> {
    let f = &dynamics.transition;
    posterior
        .iter()
        .map(|b| GaussianBelief {
            mean: f * &b.mean,
            cov: symmetrize(&(f * &b.cov * f.transpose() + &dynamics.process_noise)),
        })
        .collect()
}

/// Forward-samples `steps` states per target starting from `initial` (not included).
pub fn simulate_trajectories<R: Rng + ?Sized>(
    dynamics: &DynamicsModel,
    initial: &[DVector<f64>],
    steps: usize,
    rng: &mut R,
) -> Vec<Vec<DVector<f64>>> {
    let noise_sqrt = psd_sqrt(&dynamics.process_noise);
    let dim = dynamics.transition.nrows();
    let mut current: Vec<DVector<f64>> = initial.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        current = current
            .iter()
            .map(|x| {
                let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample(StandardNormal)));
                &dynamics.transition * x + &noise_sqrt * z
            })
            .collect();
        out.push(current.clone());
    }
    out
}

fn poisson_count<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
    draw as usize
}

/// Simulates one sensor scan and also returns the hidden origin labels
/// (0 = clutter, k = target k), aligned with the shuffled points.
pub fn simulate_measurements_labelled<R: Rng + ?Sized>(
    state: &[DVector<f64>],
    sensor: &SensorModel,
    rng: &mut R,
) -> (MeasurementSet, Vec<usize>) {
    let mut items: Vec<([f64; 2], usize)> = Vec::new();
    for (k, x) in state.iter().enumerate() {
        let count = poisson_count(sensor.target_rates[k], rng);
        if count == 0 {
            continue;
        }
        let centre = &sensor.observation * x;
        let sqrt_r = psd_sqrt(&sensor.noise[k]);
        for _ in 0..count {
            let z = DVector::from_iterator(2, (0..2).map(|_| rng.sample(StandardNormal)));
            let y = &centre + &sqrt_r * z;
            items.push(([y[0], y[1]], k + 1));
        }
    }
    let region = sensor.region;
    for _ in 0..poisson_count(sensor.clutter_rate, rng) {
        let x = rng.random_range(region.x_min..region.x_max);
        let y = rng.random_range(region.y_min..region.y_max);
        items.push(([x, y], 0));
    }
    items.shuffle(rng);
    let (points, labels) = items.into_iter().unzip();
    (MeasurementSet { points }, labels)
}

pub fn simulate_measurements<R: Rng + ?Sized>(
    state: &[DVector<f64>],
    sensor: &SensorModel,
    rng: &mut R,
) -> MeasurementSet {
    simulate_measurements_labelled(state, sensor, rng).0
}

/// Prior probability of each origin `0..=K` for a single measurement.
pub fn association_prior_probs(sensor: &SensorModel) -> Result<Vec<f64>> {
    let total = sensor.total_rate();
    if !(total > 0.0) {
        return Err(Error::ZeroRates);
    }
    Ok(std::iter::once(sensor.clutter_rate)
        .chain(sensor.target_rates.iter().copied())
        .map(|r| r / total)
        .collect())
}

/// Scenario-level model parameters; the file-facing form of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub num_sensors: usize,
    pub num_targets: usize,
    pub clutter_rate: f64,
    /// Per-sensor detection rate, shared by all targets of that sensor.
    pub target_rates: Vec<f64>,
    pub noise_variance: f64,
    /// Optional per-target override of `noise_variance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_noise_variances: Option<Vec<f64>>,
    pub process_noise: f64,
    pub tau: f64,
    pub region: Region,
    pub topology: TopologyKind,
    pub initial_position_variance: f64,
    pub initial_velocity_variance: f64,
    pub max_initial_speed: f64,
}

impl ModelParams {
    /// 5 sensors, 5 targets, sensor `s` (1-based) detects at rate `2s`, clutter 500.
    pub fn dataset1() -> Self {
        Self {
            num_sensors: 5,
            num_targets: 5,
            clutter_rate: 500.0,
            target_rates: (1..=5).map(|s| 2.0 * s as f64).collect(),
            noise_variance: 100.0,
            target_noise_variances: None,
            process_noise: 36.0,
            tau: 1.0,
            region: Region::square(1000.0),
            topology: TopologyKind::Fixed,
            initial_position_variance: 100.0,
            initial_velocity_variance: 25.0,
            max_initial_speed: 10.0,
        }
    }

    /// 8 targets, detection rate 2, clutter 1000, topology redrawn every step.
    pub fn dataset2() -> Self {
        Self {
            num_sensors: 5,
            num_targets: 8,
            clutter_rate: 1000.0,
            target_rates: vec![2.0; 5],
            topology: TopologyKind::Dynamic,
            ..Self::dataset1()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "dataset1" => Some(Self::dataset1()),
            "dataset2" => Some(Self::dataset2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.num_sensors == 0 {
            return bad("num_sensors", "must be >= 1");
        }
        if self.num_targets == 0 {
            return bad("num_targets", "must be >= 1");
        }
        if self.target_rates.len() != self.num_sensors {
            return bad("target_rates", "length must equal num_sensors");
        }
        if self.clutter_rate < 0.0 || !self.clutter_rate.is_finite() {
            return bad("clutter_rate", "must be finite and >= 0");
        }
        if self.target_rates.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return bad("target_rates", "rates must be finite and >= 0");
        }
        if !(self.noise_variance > 0.0) {
            return bad("noise_variance", "must be > 0");
        }
        if let Some(v) = &self.target_noise_variances {
            if v.len() != self.num_targets {
                return bad("target_noise_variances", "length must equal num_targets");
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return bad("target_noise_variances", "variances must be > 0");
            }
        }
        if !(self.process_noise >= 0.0) {
            return bad("process_noise", "must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be > 0");
        }
        if !(self.region.area() > 0.0) || self.region.x_max <= self.region.x_min {
            return bad("region", "must have positive extent on both axes");
        }
        if !(self.initial_position_variance > 0.0) {
            return bad("initial_position_variance", "must be > 0");
        }
        if !(self.initial_velocity_variance > 0.0) {
            return bad("initial_velocity_variance", "must be > 0");
        }
        if !(self.max_initial_speed >= 0.0) {
            return bad("max_initial_speed", "must be >= 0");
        }
        Ok(())
    }

    pub fn dynamics(&self) -> DynamicsModel {
        DynamicsModel::constant_velocity(self.tau, self.process_noise)
    }

    pub fn sensors(&self) -> Vec<SensorModel> {
        self.target_rates
            .iter()
            .map(|&rate| {
                let mut sensor = SensorModel::uniform(
                    self.num_targets,
                    rate,
                    self.clutter_rate,
                    self.noise_variance,
                    self.region,
                );
                if let Some(vars) = &self.target_noise_variances {
                    sensor.noise = vars.iter().map(|v| DMatrix::identity(2, 2) * *v).collect();
                }
                sensor
            })
            .collect()
    }

    /// Independent Gaussian prior centred on the true initial states.
    pub fn initial_prior(&self, initial: &[[f64; 4]]) -> Vec<GaussianBelief> {
        let (p, v) = (self.initial_position_variance, self.initial_velocity_variance);
        initial
            .iter()
            .map(|x| GaussianBelief::from_slices(x, &[p, v, p, v]).expect("positive variances"))
            .collect()
    }

    fn sample_initial_states<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<[f64; 4]> {
        let r = self.region;
        let (qx, qy) = ((r.x_max - r.x_min) / 4.0, (r.y_max - r.y_min) / 4.0);
        let s = self.max_initial_speed;
        (0..self.num_targets)
            .map(|_| {
                let x = rng.random_range(r.x_min + qx..=r.x_max - qx);
                let y = rng.random_range(r.y_min + qy..=r.y_max - qy);
                let vx = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
                let vy = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
                [x, vx, y, vy]
            })
            .collect()
    }
}

/// Ground truth, per-sensor measurements and network topology for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub steps: usize,
    pub params: ModelParams,
    pub initial: Vec<[f64; 4]>,
    /// `truth[step][target]`, steps `1..=steps`.
    pub truth: Vec<Vec<[f64; 4]>>,
    /// `measurements[step][sensor]`.
    pub measurements: Vec<Vec<MeasurementSet>>,
    pub topology: Topology,
}

fn to_array(v: &DVector<f64>) -> [f64; 4] {
    [v[0], v[1], v[2], v[3]]
}

impl Scenario {
    pub fn generate(params: &ModelParams, steps: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if steps == 0 {
            return Err(Error::config("experiment.steps", "must be >= 1"));
        }
        let mut truth_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let mut topo_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let mut meas_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));

        let initial = params.sample_initial_states(&mut truth_rng);
        let init_vecs: Vec<DVector<f64>> = initial
            .iter()
            .map(|x| DVector::from_column_slice(x))
            .collect();
        let paths = simulate_trajectories(&params.dynamics(), &init_vecs, steps, &mut truth_rng);

        let sensors = params.sensors();
        let measurements = paths
            .iter()
            .map(|state| {
                sensors
                    .iter()
                    .map(|sensor| simulate_measurements(state, sensor, &mut meas_rng))
                    .collect()
            })
            .collect();
        let topology = generate_topology(
            params.topology,
            params.num_sensors,
            steps,
            &params.region,
            &mut topo_rng,
        );
        Ok(Self {
            seed,
            steps,
            params: params.clone(),
            initial,
            truth: paths.iter().map(|s| s.iter().map(to_array).collect()).collect(),
            measurements,
            topology,
        })
    }

    pub fn truth_positions(&self, step: usize) -> Vec<[f64; 2]> {
        self.truth[step].iter().map(|x| [x[0], x[2]]).collect()
    }

    pub fn initial_prior(&self) -> Vec<GaussianBelief> {
        self.params.initial_prior(&self.initial)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let scenario: Scenario = serde_json::from_reader(file)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let bad = |field: &str, msg: &str| Err(Error::config(format!("scenario.{field}"), msg));
        if self.truth.len() != self.steps || self.measurements.len() != self.steps {
            return bad("truth", "length must equal steps");
        }
        if self.truth.iter().any(|s| s.len() != self.params.num_targets) {
            return bad("truth", "every step needs one state per target");
        }
        if self
            .measurements
            .iter()
            .any(|s| s.len() != self.params.num_sensors)
        {
            return bad("measurements", "every step needs one set per sensor");
        }
        if self.topology.steps.len() != self.steps || self.topology.num_nodes != self.params.num_sensors {
            return bad("topology", "must cover every step and sensor");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_dynamics_leave_belief_unchanged() {
        let dynamics =
            DynamicsModel::new(DMatrix::identity(4, 4), DMatrix::zeros(4, 4), 1.0).unwrap();
        let b = GaussianBelief::from_slices(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(predict_prior(&[b.clone()], &dynamics), vec![b]);
    }

    #[test]
    fn constant_velocity_moves_position() {
        let dynamics = DynamicsModel::constant_velocity(1.0, 36.0);
        assert_eq!(
            dynamics.transition.view((0, 0), (2, 2)),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
        );
        assert_relative_eq!(dynamics.process_noise[(0, 0)], 12.0);
        assert_relative_eq!(dynamics.process_noise[(0, 1)], 18.0);
        assert_relative_eq!(dynamics.process_noise[(3, 3)], 36.0);
        assert_eq!(dynamics.process_noise[(0, 2)], 0.0);

        let b = GaussianBelief::from_slices(&[0.0, 1.0, 0.0, 0.0], &[1.0; 4]).unwrap();
        let p = &predict_prior(&[b], &dynamics)[0];
        assert_eq!(p.mean[0], 1.0);
        assert_eq!(p.mean[1], 1.0);
    }

    #[test]
    fn prediction_from_zero_covariance_is_process_noise() {
        let q = DMatrix::identity(4, 4) * 3.0;
        let dynamics = DynamicsModel::new(
            DynamicsModel::constant_velocity(1.0, 1.0).transition,
            q.clone(),
            1.0,
        )
        .unwrap();
        let b = GaussianBelief {
            mean: DVector::zeros(4),
            cov: DMatrix::zeros(4, 4),
        };
        assert_eq!(predict_prior(&[b], &dynamics)[0].cov, q);
    }

    #[test]
    fn prediction_keeps_targets_independent() {
        let dynamics = DynamicsModel::constant_velocity(1.0, 36.0);
        let a = GaussianBelief::from_slices(&[0.0, 1.0, 0.0, 1.0], &[1.0; 4]).unwrap();
        let b = GaussianBelief::from_slices(&[5.0, 0.0, 5.0, 0.0], &[2.0; 4]).unwrap();
        let both = predict_prior(&[a.clone(), b.clone()], &dynamics);
        assert_eq!(both[0], predict_prior(&[a], &dynamics)[0]);
        assert_eq!(both[1], predict_prior(&[b], &dynamics)[0]);
    }

    #[test]
    fn noiseless_trajectories() {
        let still = DynamicsModel::new(DMatrix::identity(4, 4), DMatrix::zeros(4, 4), 1.0).unwrap();
        let x0 = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        let path = simulate_trajectories(&still, &[x0.clone()], 5, &mut rng(1));
        assert!(path.iter().all(|s| s[0] == x0));

        let cv = DynamicsModel::constant_velocity(0.5, 0.0);
        let x0 = DVector::from_column_slice(&[10.0, 2.0, -5.0, -1.0]);
        let path = simulate_trajectories(&cv, &[x0], 20, &mut rng(2));
        for (i, s) in path.iter().enumerate() {
            let n = (i + 1) as f64;
            assert_relative_eq!(s[0][0], 10.0 + n * 0.5 * 2.0, epsilon = 1e-12);
            assert_relative_eq!(s[0][2], -5.0 - n * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn increment_covariance_matches_process_noise() {
        let cv = DynamicsModel::constant_velocity(1.0, 36.0);
        let x0 = DVector::from_column_slice(&[0.0, 1.0, 0.0, -1.0]);
        let mut r = rng(3);
        let n = 100_000;
        let mut cov = DMatrix::zeros(4, 4);
        for _ in 0..n {
            let x1 = &simulate_trajectories(&cv, &[x0.clone()], 1, &mut r)[0][0];
            let inc = x1 - &cv.transition * &x0;
            cov += &inc * inc.transpose();
        }
        cov /= n as f64;
        let rel = (&cov - &cv.process_noise).norm() / cv.process_noise.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn zero_rates_give_no_measurements() {
        let sensor = SensorModel::uniform(3, 0.0, 0.0, 100.0, Region::square(1000.0));
        let x = vec![DVector::from_column_slice(&[500.0, 0.0, 500.0, 0.0]); 3];
        assert!(simulate_measurements(&x, &sensor, &mut rng(4)).is_empty());
    }

    #[test]
    fn clutter_count_mean() {
        let sensor = SensorModel::uniform(2, 0.0, 500.0, 100.0, Region::square(1000.0));
        let x = vec![DVector::from_column_slice(&[500.0, 0.0, 500.0, 0.0]); 2];
        let mut r = rng(5);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| simulate_measurements(&x, &sensor, &mut r).len())
            .sum();
        let mean = total as f64 / n as f64;
        let sigma = 500f64.sqrt() / 100.0;
        assert!((mean - 500.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn clutter_stays_in_region() {
        let region = Region {
            x_min: -10.0,
            x_max: 20.0,
            y_min: 5.0,
            y_max: 6.0,
        };
        let sensor = SensorModel::uniform(1, 0.0, 200.0, 1.0, region);
        let x = vec![DVector::zeros(4)];
        let set = simulate_measurements(&x, &sensor, &mut rng(6));
        assert!(set
            .points
            .iter()
            .all(|p| p[0] >= -10.0 && p[0] < 20.0 && p[1] >= 5.0 && p[1] < 6.0));
    }

    #[test]
    fn tiny_noise_puts_detections_on_target() {
        let mut sensor = SensorModel::uniform(2, 5.0, 0.0, 1e-12, Region::square(100.0));
        sensor.noise[1] = DMatrix::identity(2, 2) * 1e-12;
        let x = vec![
            DVector::from_column_slice(&[10.0, 1.0, 20.0, 1.0]),
            DVector::from_column_slice(&[70.0, 1.0, 80.0, 1.0]),
        ];
        let (set, labels) = simulate_measurements_labelled(&x, &sensor, &mut rng(7));
        assert!(!set.is_empty());
        for (p, &l) in set.points.iter().zip(&labels) {
            let t = &x[l - 1];
            assert!((p[0] - t[0]).abs() < 1e-3 && (p[1] - t[2]).abs() < 1e-3);
        }
    }

    #[test]
    fn count_distribution_is_poisson() {
        let sensor = SensorModel::uniform(2, 3.0, 10.0, 1.0, Region::square(100.0));
        let x = vec![DVector::from_column_slice(&[50.0, 0.0, 50.0, 0.0]); 2];
        let rate = sensor.total_rate();
        let mut r = rng(8);
        let n = 10_000usize;
        let mut counts = vec![0usize; 64];
        for _ in 0..n {
            let m = simulate_measurements(&x, &sensor, &mut r).len().min(63);
            counts[m] += 1;
        }
        // Bin so every expected count is >= 5; pool both tails.
        let pmf = |k: usize| {
            let mut ln = -rate + k as f64 * rate.ln();
            for i in 1..=k {
                ln -= (i as f64).ln();
            }
            ln.exp()
        };
        let (lo, hi) = (7usize, 26usize);
        let mut observed = vec![counts[..=lo].iter().sum::<usize>() as f64];
        let mut expected = vec![(0..=lo).map(pmf).sum::<f64>() * n as f64];
        for k in lo + 1..hi {
            observed.push(counts[k] as f64);
            expected.push(pmf(k) * n as f64);
        }
        observed.push(counts[hi..].iter().sum::<usize>() as f64);
        expected.push(n as f64 - expected.iter().sum::<f64>());
        assert!(expected.iter().all(|&e| e >= 5.0));
        let chi2: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e).powi(2) / e)
            .sum();
        let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn association_prior_values() {
        let s = SensorModel::uniform(1, 1.0, 1.0, 1.0, Region::square(1.0));
        assert_eq!(association_prior_probs(&s).unwrap(), vec![0.5, 0.5]);

        let s = SensorModel::uniform(5, 2.0, 500.0, 1.0, Region::square(1.0));
        let p = association_prior_probs(&s).unwrap();
        assert_relative_eq!(p[0], 500.0 / 510.0, epsilon = 1e-15);
        assert_relative_eq!(p[0], 0.9804, epsilon = 1e-4);
        for pk in &p[1..] {
            assert_relative_eq!(*pk, 2.0 / 510.0, epsilon = 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let s = SensorModel::uniform(2, 1.0, 0.0, 1.0, Region::square(1.0));
        assert_eq!(association_prior_probs(&s).unwrap()[0], 0.0);

        let s = SensorModel::uniform(2, 0.0, 0.0, 1.0, Region::square(1.0));
        assert!(matches!(association_prior_probs(&s), Err(Error::ZeroRates)));
    }

    #[test]
    fn presets_validate() {
        let d1 = ModelParams::dataset1();
        d1.validate().unwrap();
        assert_eq!(d1.target_rates, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        let d2 = ModelParams::dataset2();
        d2.validate().unwrap();
        assert_eq!(d2.num_targets, 8);
        assert_eq!(d2.clutter_rate, 1000.0);
        assert_eq!(d2.topology, TopologyKind::Dynamic);
        assert!(d1.sensors().iter().all(|s| s.validate().is_ok()));
        assert_eq!(d1.sensors()[0].volume(), 1e6);
    }

    #[test]
    fn scenario_shapes_and_determinism() {
        let params = ModelParams::dataset1();
        let a = Scenario::generate(&params, 4, 99).unwrap();
        let b = Scenario::generate(&params, 4, 99).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.truth.len(), 4);
        assert_eq!(a.measurements[0].len(), 5);
        for x in &a.initial {
            assert!((250.0..=750.0).contains(&x[0]) && (250.0..=750.0).contains(&x[2]));
            assert!(x[1].abs() <= 10.0 && x[3].abs() <= 10.0);
        }
        let c = Scenario::generate(&params, 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = Scenario::generate(&ModelParams::dataset2(), 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        s.save(&path).unwrap();
        assert_eq!(Scenario::load(&path).unwrap(), s);
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["steps", "truth", "measurements", "topology", "seed"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
    }
}
