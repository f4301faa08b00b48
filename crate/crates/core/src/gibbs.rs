//! Rao-Blackwellised Gibbs sampler for the tilted distribution at a sensor.
//!
//! The chain alternates two blocked updates:
//!
//! * associations: given the state sample, every measurement label is an
//!   independent categorical draw with weights `lambda_0 / V` (clutter) and
//!   `lambda_k N(y; H x_k, R_k)` (target `k`);
//! * states: given the labels, every target is an independent Kalman update of
//!   its prior with the averaged pseudo-measurement `mean(y_j)` and noise
//!   `R_k / n_k`.
//!
//! Retained sweeps contribute the conditional Gaussians (not the raw state
//! draws), so the output is an equally weighted Gaussian mixture.
//!
//! Randomness is keyed per `(sweep, measurement)` and `(sweep, target)`, so a
//! draw never depends on the order in which the others are evaluated.
//!
//! The same core also drives the centralised baseline, where measurements from
//! several sensors are pooled and each keeps its own sensor's parameters.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianBelief, GaussianMixture};
use crate::model::{association_prior_probs, MeasurementSet, SensorModel, STATE_DIM};
use crate::rng::derive_seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GibbsConfig {
    pub total_sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn new(total_sweeps: usize, burn_in: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            total_sweeps,
            burn_in,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_sweeps <= self.burn_in {
            return Err(Error::config(
                "gibbs.total_sweeps",
                "must exceed burn_in so at least one sweep is retained",
            ));
        }
        Ok(())
    }

    /// Number of retained sweeps, `N_p`.
    pub fn retained(&self) -> usize {
        self.total_sweeps - self.burn_in
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            total_sweeps: 60,
            burn_in: 10,
            seed: 0,
        }
    }
}

/// Origin label per measurement: 0 = clutter, `k` = target `k` (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssociationVector {
    pub labels: Vec<usize>,
}

impl AssociationVector {
    /// Indices of measurements assigned to target `k` (1-based).
    pub fn assigned_to(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == k)
            .map(|(j, _)| j)
    }
}

/// Equally weighted mixture whose components are block-diagonal over targets.
///
/// `components[p][k]` is target `k`'s Gaussian in retained sweep `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMixture {
    components: Vec<Vec<GaussianBelief>>,
}

impl BlockMixture {
    pub fn new(components: Vec<Vec<GaussianBelief>>) -> Result<Self> {
        let first = components.first().ok_or(Error::EmptyMixture)?;
        let k = first.len();
        if let Some(bad) = components.iter().find(|c| c.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: bad.len(),
            });
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Vec<GaussianBelief>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.components[0].len()
    }

    /// Marginal mixture of target `k`.
    pub fn target_mixture(&self, k: usize) -> GaussianMixture {
        GaussianMixture::new(self.components.iter().map(|c| c[k].clone()).collect())
            .expect("non-empty by construction")
    }

    /// Components as full joint Gaussians with block-diagonal covariance.
    pub fn joint_mixture(&self) -> GaussianMixture {
        let joint = self
            .components
            .iter()
            .map(|blocks| {
                let dim: usize = blocks.iter().map(|b| b.dim()).sum();
                let mut mean = DVector::zeros(dim);
                let mut cov = DMatrix::zeros(dim, dim);
                let mut at = 0;
                for b in blocks {
                    let d = b.dim();
                    mean.rows_mut(at, d).copy_from(&b.mean);
                    cov.view_mut((at, at), (d, d)).copy_from(&b.cov);
                    at += d;
                }
                GaussianBelief { mean, cov }
            })
            .collect();
        GaussianMixture::new(joint).expect("non-empty by construction")
    }
}

#[derive(Debug, Clone)]
pub struct GibbsOutput {
    pub mixture: BlockMixture,
    /// Association draws that fell back to the prior because every weight vanished.
    pub fallback_draws: usize,
    /// Labels of the final sweep.
    pub last_association: AssociationVector,
}

/// One measurement together with the sensor that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementItem {
    pub point: [f64; 2],
    pub sensor: usize,
}

struct TargetTerms {
    /// Upper triangle of `R^-1`: `[a, b, d]` for `[[a, b], [b, d]]`.
    info: [f64; 3],
    /// `ln lambda_k - ln 2pi - ln|R| / 2`.
    log_scale: f64,
    noise: Matrix2<f64>,
}

/// Per-sensor quantities that do not change across sweeps.
struct SensorTerms {
    observation: Matrix2x4<f64>,
    log_clutter: f64,
    targets: Vec<TargetTerms>,
    /// Cumulative association prior, for the fallback draw.
    prior_cdf: Option<Vec<f64>>,
}

impl SensorTerms {
    fn new(sensor: &SensorModel) -> Result<Self> {
        if sensor.observation.shape() != (2, STATE_DIM) {
            return Err(Error::DimensionMismatch {
                expected: STATE_DIM,
                actual: sensor.observation.ncols(),
            });
        }
        let observation = Matrix2x4::from_iterator(sensor.observation.iter().copied());
        let targets = sensor
            .noise
            .iter()
            .zip(&sensor.target_rates)
            .map(|(r, &rate)| {
                let noise = Matrix2::new(r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]);
                let det = noise.determinant();
                let inv = noise.try_inverse().filter(|_| det > 0.0).ok_or(Error::NotPositiveDefinite)?;
                Ok(TargetTerms {
                    info: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
                    log_scale: rate.ln() - LN_2PI - 0.5 * det.ln(),
                    noise,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let prior_cdf = association_prior_probs(sensor).ok().map(|p| {
            p.iter()
                .scan(0.0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        });
        Ok(Self {
            observation,
            log_clutter: sensor.clutter_rate.ln() - sensor.volume().ln(),
            targets,
            prior_cdf,
        })
    }

    /// Unnormalised log weights of labels `0..=K` written into `out`.
    fn log_weights(&self, y: [f64; 2], predicted: &[[f64; 2]], out: &mut Vec<f64>) {
        out.clear();
        out.push(self.log_clutter);
        for (t, h) in self.targets.iter().zip(predicted) {
            let (dx, dy) = (y[0] - h[0], y[1] - h[1]);
            let [a, b, d] = t.info;
            let maha = a * dx * dx + 2.0 * b * dx * dy + d * dy * dy;
            out.push(t.log_scale - 0.5 * maha);
        }
    }

    /// Turns log weights into probabilities in place. `false` if all weights vanish.
    fn normalise(weights: &mut [f64]) -> bool {
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return false;
        }
        let mut total = 0.0;
        for w in weights.iter_mut() {
            let rel = *w - max;
            // Below e^-40 a weight cannot change the normaliser or a 53-bit uniform draw.
            *w = if rel < -40.0 { 0.0 } else { rel.exp() };
            total += *w;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        true
    }

    /// Inverse-CDF draw with uniform `u`; returns `(label, used_fallback)`.
    fn draw(&self, y: [f64; 2], predicted: &[[f64; 2]], u: f64, scratch: &mut Vec<f64>) -> (usize, bool) {
        self.log_weights(y, predicted, scratch);
        if Self::normalise(scratch) {
            let mut acc = 0.0;
            let mut last_positive = 0;
            for (label, &p) in scratch.iter().enumerate() {
                if p > 0.0 {
                    last_positive = label;
                    acc += p;
                    if u < acc {
                        return (label, false);
                    }
                }
            }
            (last_positive, false)
        } else {
            let label = self
                .prior_cdf
                .as_ref()
                .and_then(|cdf| cdf.iter().position(|&c| u < c))
                .unwrap_or(0);
            (label, true)
        }
    }

    fn predict(&self, state: &[Vector4<f64>]) -> Vec<[f64; 2]> {
        state
            .iter()
            .map(|x| {
                let h = self.observation * x;
                [h[0], h[1]]
            })
            .collect()
    }
}

fn to_static(b: &GaussianBelief) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    if b.dim() != STATE_DIM {
        return Err(Error::DimensionMismatch {
            expected: STATE_DIM,
            actual: b.dim(),
        });
    }
    Ok((
        Vector4::from_iterator(b.mean.iter().copied()),
        Matrix4::from_iterator(b.cov.iter().copied()),
    ))
}

fn to_dynamic(mean: &Vector4<f64>, cov: &Matrix4<f64>) -> GaussianBelief {
    GaussianBelief {
        mean: DVector::from_column_slice(mean.as_slice()),
        cov: DMatrix::from_column_slice(4, 4, cov.as_slice()),
    }
}

/// Associated measurements of one target from one sensor.
#[derive(Debug, Clone, Copy)]
struct Group {
    sum: [f64; 2],
    count: usize,
}

/// Sequential Kalman updates, one averaged pseudo-measurement per sensor group.
fn conditional(
    prior: &(Vector4<f64>, Matrix4<f64>),
    groups: impl Iterator<Item = (Group, Matrix2x4<f64>, Matrix2<f64>)>,
) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    let (mut mean, mut cov) = *prior;
    for (g, h, noise) in groups {
        if g.count == 0 {
            continue;
        }
        let n = g.count as f64;
        let z = Vector2::new(g.sum[0] / n, g.sum[1] / n);
        let r = noise / n;
        let s = h * cov * h.transpose() + r;
        let s_inv = s.try_inverse().ok_or(Error::NotPositiveDefinite)?;
        let gain = cov * h.transpose() * s_inv;
        mean += gain * (z - h * mean);
        let i_kh = Matrix4::identity() - gain * h;
        // Joseph form keeps the update symmetric positive definite.
        cov = i_kh * cov * i_kh.transpose() + gain * r * gain.transpose();
        cov = (cov + cov.transpose()) * 0.5;
    }
    Ok((mean, cov))
}

fn draw_state<R: Rng>(mean: &Vector4<f64>, cov: &Matrix4<f64>, rng: &mut R) -> Result<Vector4<f64>> {
    let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let z = Vector4::from_fn(|_, _| rng.sample(StandardNormal));
    Ok(mean + chol.l() * z)
}

fn measurement_rng(seed: u64, j: usize) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, &[j as u64]))
}

fn target_rng(seed: u64, k: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, &[k as u64]))
}

/// Normalised association conditional of one measurement given the target states.
pub fn association_probabilities(
    y: [f64; 2],
    state: &[DVector<f64>],
    sensor: &SensorModel,
) -> Result<Vec<f64>> {
    let terms = SensorTerms::new(sensor)?;
    let state = state
        .iter()
        .map(|x| Vector4::from_iterator(x.iter().copied()))
        .collect::<Vec<_>>();
    let mut w = Vec::new();
    terms.log_weights(y, &terms.predict(&state), &mut w);
    if SensorTerms::normalise(&mut w) {
        Ok(w)
    } else {
        association_prior_probs(sensor)
    }
}

/// Draws the label of measurement `j`. The flag reports a prior fallback draw.
pub fn sample_association_conditional<R: Rng + ?Sized>(
    j: usize,
    state: &[DVector<f64>],
    y: &MeasurementSet,
    sensor: &SensorModel,
    rng: &mut R,
) -> Result<(usize, bool)> {
    let terms = SensorTerms::new(sensor)?;
    let state = state
        .iter()
        .map(|x| Vector4::from_iterator(x.iter().copied()))
        .collect::<Vec<_>>();
    let u: f64 = rng.random();
    Ok(terms.draw(y.points[j], &terms.predict(&state), u, &mut Vec::new()))
}

/// Conditional Gaussian of one target given the labels, plus a draw from it.
#[derive(Debug, Clone, PartialEq)]
pub struct StateConditional {
    pub belief: GaussianBelief,
    pub sample: DVector<f64>,
}

/// `k` is 1-based, matching the labels.
pub fn sample_state_conditional<R: Rng>(
    k: usize,
    theta: &AssociationVector,
    y: &MeasurementSet,
    cavity_k: &GaussianBelief,
    sensor: &SensorModel,
    rng: &mut R,
) -> Result<StateConditional> {
    let terms = SensorTerms::new(sensor)?;
    let mut group = Group {
        sum: [0.0; 2],
        count: 0,
    };
    for j in theta.assigned_to(k) {
        group.sum[0] += y.points[j][0];
        group.sum[1] += y.points[j][1];
        group.count += 1;
    }
    let prior = to_static(cavity_k)?;
    let noise = terms.targets[k - 1].noise;
    let (mean, cov) = conditional(&prior, std::iter::once((group, terms.observation, noise)))?;
    let sample = draw_state(&mean, &cov, rng)?;
    Ok(StateConditional {
        belief: to_dynamic(&mean, &cov),
        sample: DVector::from_column_slice(sample.as_slice()),
    })
}

/// Shared sampler over measurements tagged with their sensor.
pub(crate) fn run_gibbs(
    prior: &[GaussianBelief],
    items: &[MeasurementItem],
    sensors: &[SensorModel],
    cfg: &GibbsConfig,
) -> Result<GibbsOutput> {
    cfg.validate()?;
    let num_targets = prior.len();
    let terms = sensors
        .iter()
        .map(|s| {
            if s.num_targets() != num_targets {
                return Err(Error::DimensionMismatch {
                    expected: num_targets,
                    actual: s.num_targets(),
                });
            }
            SensorTerms::new(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let priors = prior.iter().map(to_static).collect::<Result<Vec<_>>>()?;
    for (mean, cov) in &priors {
        if cov.cholesky().is_none() || !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCavity);
        }
    }

    let num_sensors = sensors.len();
    let mut state: Vec<Vector4<f64>> = priors.iter().map(|(m, _)| *m).collect();
    let mut labels = vec![0usize; items.len()];
    let mut groups = vec![
        Group {
            sum: [0.0; 2],
            count: 0
        };
        num_targets * num_sensors
    ];
    let mut scratch = Vec::with_capacity(num_targets + 1);
    let mut fallback_draws = 0;
    let mut components = Vec::with_capacity(cfg.retained());

    for sweep in 0..cfg.total_sweeps {
        let sweep_seed = derive_seed(cfg.seed, &[sweep as u64]);
        let assoc_seed = derive_seed(sweep_seed, &[0]);
        let state_seed = derive_seed(sweep_seed, &[1]);

        let predicted: Vec<Vec<[f64; 2]>> = terms.iter().map(|t| t.predict(&state)).collect();
        for (j, item) in items.iter().enumerate() {
            let u: f64 = measurement_rng(assoc_seed, j).random();
            let (label, fell_back) =
                terms[item.sensor].draw(item.point, &predicted[item.sensor], u, &mut scratch);
            labels[j] = label;
            fallback_draws += fell_back as usize;
        }

        groups.iter_mut().for_each(|g| *g = Group { sum: [0.0; 2], count: 0 });
        for (item, &label) in items.iter().zip(&labels) {
            if label > 0 {
                let g = &mut groups[(label - 1) * num_sensors + item.sensor];
                g.sum[0] += item.point[0];
                g.sum[1] += item.point[1];
                g.count += 1;
            }
        }

        let keep = sweep >= cfg.burn_in;
        let mut blocks = Vec::with_capacity(if keep { num_targets } else { 0 });
        for k in 0..num_targets {
            let target_groups = (0..num_sensors).map(|s| {
                (
                    groups[k * num_sensors + s],
                    terms[s].observation,
                    terms[s].targets[k].noise,
                )
            });
            let (mean, cov) = conditional(&priors[k], target_groups)?;
            state[k] = draw_state(&mean, &cov, &mut target_rng(state_seed, k))?;
            if keep {
                blocks.push(to_dynamic(&mean, &cov));
            }
        }
        if keep {
            components.push(blocks);
        }
    }

    Ok(GibbsOutput {
        mixture: BlockMixture::new(components)?,
        fallback_draws,
        last_association: AssociationVector { labels },
    })
}

/// Gaussian-mixture approximation of `cavity x p(y | X)` at one sensor.
pub fn run_tilted_gibbs(
    cavity: &[GaussianBelief],
    y: &MeasurementSet,
    sensor: &SensorModel,
    cfg: &GibbsConfig,
) -> Result<GibbsOutput> {
    let items: Vec<MeasurementItem> = y
        .points
        .iter()
        .map(|&point| MeasurementItem { point, sensor: 0 })
        .collect();
    run_gibbs(cavity, &items, std::slice::from_ref(sensor), cfg)
}
