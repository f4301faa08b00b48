//! Expectation propagation over sensors.
//!
//! The posterior at one time step is approximated as the predicted prior times
//! one Gaussian site per sensor. Everything is kept in natural parameters and
//! block-diagonal over targets, so combining sites is a plain sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    is_positive_definite, moments_of, natural_add, natural_sub, to_moment, to_natural,
    GaussianBelief, NaturalParams,
};
use crate::gibbs::{run_tilted_gibbs, BlockMixture, GibbsConfig};
use crate::model::{MeasurementSet, SensorModel};
use crate::network::{
    exchange_full, flood_once, flood_until_consensus, site_payload_reals, CommEvent, Exchange,
    Graph, SiteTable,
};
use crate::rng::derive_seed;

/// One sensor's factor, one natural-parameter block per target.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteApproximation {
    pub sensor: usize,
    /// EP iteration that produced this version; 0 for the initial unit site.
    pub stamp: i64,
    pub blocks: Vec<NaturalParams>,
}

impl SiteApproximation {
    pub fn zero(sensor: usize, num_targets: usize, dim: usize) -> Self {
        Self {
            sensor,
            stamp: 0,
            blocks: vec![NaturalParams::zeros(dim); num_targets],
        }
    }

    pub fn num_targets(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.max_abs() == 0.0)
    }

    /// Frobenius norm over all blocks.
    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm().powi(2)).sum::<f64>().sqrt()
    }
}

/// Prior natural parameters and their sum with the known sites.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalApproximation {
    pub prior: Vec<NaturalParams>,
    pub blocks: Vec<NaturalParams>,
}

impl GlobalApproximation {
    pub fn beliefs(&self) -> Result<Vec<GaussianBelief>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(target, b)| to_moment(b).map_err(|_| Error::GlobalNotPositiveDefinite { target }))
            .collect()
    }

    /// Largest absolute entry of `global - (prior + sum of sites)`.
    ///
    /// The reference sum is accumulated sites-first, independently of [`combine_global`].
    pub fn identity_residual<'a>(&self, sites: impl Iterator<Item = &'a SiteApproximation>) -> f64 {
        let mut reference: Vec<NaturalParams> = self
            .prior
            .iter()
            .map(|p| NaturalParams::zeros(p.dim()))
            .collect();
        for site in sites {
            for (acc, b) in reference.iter_mut().zip(&site.blocks) {
                acc.lambda1 += &b.lambda1;
                acc.lambda2 += &b.lambda2;
            }
        }
        reference
            .iter()
            .zip(&self.prior)
            .zip(&self.blocks)
            .map(|((r, p), g)| {
                let d1 = (&g.lambda1 - &p.lambda1 - &r.lambda1).amax();
                let d2 = (&g.lambda2 - &p.lambda2 - &r.lambda2).amax();
                d1.max(d2)
            })
            .fold(0.0, f64::max)
    }
}

/// Global with one site divided out. `valid` is false if any block is not a proper Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Cavity {
    pub blocks: Vec<NaturalParams>,
    pub valid: bool,
}

impl Cavity {
    pub fn beliefs(&self) -> Result<Vec<GaussianBelief>> {
        self.blocks.iter().map(to_moment).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CavityPolicy {
    /// Leave the site unchanged for that iteration.
    #[default]
    SkipSite,
    Abort,
}

/// What a node does when its combined global is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalPolicy {
    /// Move this iteration's sites only part of the way from their previous
    /// values, halving the step until the global is proper (a zero step always is).
    #[default]
    Backtrack,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// All sensors update from the previous iteration's global, then exchange.
    #[default]
    Parallel,
    /// Sensors update one after another, exchanging after each update.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpConfig {
    pub max_iterations: usize,
    pub damping: f64,
    pub invalid_cavity: CavityPolicy,
    pub indefinite_global: GlobalPolicy,
    pub schedule: Schedule,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            damping: 1.0,
            invalid_cavity: CavityPolicy::SkipSite,
            indefinite_global: GlobalPolicy::Backtrack,
            schedule: Schedule::Parallel,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("ep.max_iterations", "must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("ep.damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// How sites travel between sensors after each local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommScheme {
    /// Every sensor receives every site (one round).
    FullExchange,
    /// Flooding rounds over the topology until all sensors agree.
    FloodConsensus,
    /// One flooding round per iteration, forwarding the whole site table.
    FloodOnce,
}

/// Unit sites for every sensor and a global equal to the prior.
pub fn init_sites(
    prior: &[GaussianBelief],
    num_sensors: usize,
) -> Result<(Vec<SiteApproximation>, GlobalApproximation)> {
    let eta = prior.iter().map(to_natural).collect::<Result<Vec<_>>>()?;
    let dim = eta.first().map_or(0, |e| e.dim());
    let sites = (0..num_sensors)
        .map(|s| SiteApproximation::zero(s, prior.len(), dim))
        .collect();
    Ok((
        sites,
        GlobalApproximation {
            blocks: eta.clone(),
            prior: eta,
        },
    ))
}

pub fn cavity(global: &GlobalApproximation, site: &SiteApproximation) -> Result<Cavity> {
    if global.blocks.len() != site.blocks.len() {
        return Err(Error::DimensionMismatch {
            expected: global.blocks.len(),
            actual: site.blocks.len(),
        });
    }
    let blocks = global
        .blocks
        .iter()
        .zip(&site.blocks)
        .map(|(g, s)| natural_sub(g, s))
        .collect::<Result<Vec<_>>>()?;
    let valid = blocks.iter().all(|b| is_positive_definite(&b.lambda2));
    Ok(Cavity { blocks, valid })
}

/// Per-target mean and covariance of the mixture; cross-target terms are dropped.
pub fn moment_match(mixture: &BlockMixture) -> Result<Vec<GaussianBelief>> {
    (0..mixture.num_targets())
        .map(|k| moments_of(mixture.components().iter().map(|c| &c[k])))
        .collect()
}

/// Damped site refresh: `(1 - d) old + d (new - cavity)`, stamp advanced by one.
pub fn site_update(
    g_new: &[GaussianBelief],
    cavity: &Cavity,
    old: &SiteApproximation,
    damping: f64,
) -> Result<SiteApproximation> {
    if g_new.len() != old.blocks.len() || cavity.blocks.len() != old.blocks.len() {
        return Err(Error::DimensionMismatch {
            expected: old.blocks.len(),
            actual: g_new.len(),
        });
    }
    let blocks = g_new
        .iter()
        .zip(&cavity.blocks)
        .zip(&old.blocks)
        .map(|((g, c), o)| {
            let target = natural_sub(&to_natural(g)?, c)?;
            if damping == 1.0 {
                Ok(target)
            } else {
                natural_add(&o.scale(1.0 - damping), &target.scale(damping))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SiteApproximation {
        sensor: old.sensor,
        stamp: old.stamp + 1,
        blocks,
    })
}

/// Prior plus sites, summed in the iterator's order (callers pass ascending sensor id).
pub fn combine_global<'a>(
    prior: &[NaturalParams],
    sites: impl Iterator<Item = &'a SiteApproximation>,
) -> Result<GlobalApproximation> {
    let mut blocks = prior.to_vec();
    for site in sites {
        if site.blocks.len() != blocks.len() {
            return Err(Error::DimensionMismatch {
                expected: blocks.len(),
                actual: site.blocks.len(),
            });
        }
        for (acc, b) in blocks.iter_mut().zip(&site.blocks) {
            *acc = natural_add(acc, b)?;
        }
    }
    if let Some(target) = blocks.iter().position(|b| !is_positive_definite(&b.lambda2)) {
        return Err(Error::GlobalNotPositiveDefinite { target });
    }
    Ok(GlobalApproximation {
        prior: prior.to_vec(),
        blocks,
    })
}

/// Inputs of one filtering step across the network.
#[derive(Debug, Clone, Copy)]
pub struct TimestepInput<'a> {
    pub step: usize,
    /// Predicted prior held by each node.
    pub priors: &'a [Vec<GaussianBelief>],
    pub measurements: &'a [MeasurementSet],
    pub sensors: &'a [SensorModel],
    pub graph: &'a Graph,
}

/// Per-sensor record after each EP iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationDiagnostic {
    pub step: usize,
    pub iteration: usize,
    pub sensor: usize,
    pub site_norm: f64,
    pub cavity_valid: bool,
    /// Fraction of this iteration's site change kept at this node (1 unless backtracked).
    pub step_scale: f64,
    /// Largest deviation from `global = prior + sum of known sites` at this node.
    pub identity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TimestepOutput {
    /// Posterior held by each node.
    pub posteriors: Vec<Vec<GaussianBelief>>,
    pub globals: Vec<GlobalApproximation>,
    /// Communication rounds used in this step.
    pub ci: usize,
    pub diagnostics: Vec<IterationDiagnostic>,
    pub comm: Vec<CommEvent>,
}

struct NodeState {
    eta: Vec<NaturalParams>,
    table: SiteTable,
    global: GlobalApproximation,
}

/// One sensor's local EP update against its current global.
fn local_update(
    node: &NodeState,
    y: &MeasurementSet,
    sensor: &SensorModel,
    ep: &EpConfig,
    gibbs: &GibbsConfig,
) -> Result<(SiteApproximation, bool)> {
    let old = node.table.own();
    let cav = cavity(&node.global, old)?;
    if !cav.valid {
        return match ep.invalid_cavity {
            CavityPolicy::SkipSite => Ok((old.clone(), false)),
            CavityPolicy::Abort => Err(Error::InvalidCavity),
        };
    }
    if y.is_empty() {
        // The tilted distribution is the cavity itself, so the site target is zero.
        let blocks = old.blocks.iter().map(|b| b.scale(1.0 - ep.damping)).collect();
        return Ok((
            SiteApproximation {
                sensor: old.sensor,
                stamp: old.stamp + 1,
                blocks,
            },
            true,
        ));
    }
    let tilted = run_tilted_gibbs(&cav.beliefs()?, y, sensor, gibbs)?;
    let g_new = moment_match(&tilted.mixture)?;
    Ok((site_update(&g_new, &cav, old, ep.damping)?, true))
}

fn log_exchange(exchange: &Exchange, step: usize, iteration: usize, num_targets: usize, log: &mut Vec<CommEvent>) {
    log.extend(exchange.messages.iter().map(|m| CommEvent {
        step,
        iteration,
        round: m.round,
        sender: m.sender,
        receiver: m.receiver,
        payload_reals: m.sites * site_payload_reals(num_targets),
    }));
}

fn communicate(scheme: CommScheme, graph: &Graph, nodes: &[NodeState]) -> Result<Exchange> {
    match scheme {
        CommScheme::FullExchange => {
            let sites: Vec<_> = nodes.iter().map(|n| n.table.own().clone()).collect();
            Ok(exchange_full(&sites))
        }
        CommScheme::FloodOnce => {
            let tables: Vec<_> = nodes.iter().map(|n| n.table.clone()).collect();
            flood_once(graph, &tables)
        }
        CommScheme::FloodConsensus => {
            let tables: Vec<_> = nodes.iter().map(|n| n.table.clone()).collect();
            flood_until_consensus(graph, &tables)
        }
    }
}

const MAX_HALVINGS: usize = 10;

/// `previous + scale (site - previous)` per known entry of `current`.
fn blend(previous: &SiteTable, current: &SiteTable, scale: f64) -> SiteTable {
    let mix = |site: &SiteApproximation| {
        let blocks = match previous.get(site.sensor) {
            Some(old) => old
                .blocks
                .iter()
                .zip(&site.blocks)
                .map(|(o, b)| NaturalParams {
                    lambda1: &o.lambda1 + (&b.lambda1 - &o.lambda1) * scale,
                    lambda2: &o.lambda2 + (&b.lambda2 - &o.lambda2) * scale,
                })
                .collect(),
            None => site.blocks.iter().map(|b| b.scale(scale)).collect(),
        };
        SiteApproximation {
            sensor: site.sensor,
            stamp: site.stamp,
            blocks,
        }
    };
    let mut table = SiteTable::new(current.owner, mix(current.own()), current.num_sensors());
    for site in current.known() {
        table.merge(&mix(site));
    }
    table
}

/// Installs `current` at a node, backtracking towards `previous` if needed.
/// Returns the kept fraction of the change.
fn settle(node: &mut NodeState, previous: &SiteTable, current: SiteTable, policy: GlobalPolicy) -> Result<f64> {
    let err = match combine_global(&node.eta, current.known()) {
        Ok(global) => {
            node.table = current;
            node.global = global;
            return Ok(1.0);
        }
        Err(e) => e,
    };
    if policy == GlobalPolicy::Abort || !matches!(err, Error::GlobalNotPositiveDefinite { .. }) {
        return Err(err);
    }
    let mut scale = 1.0;
    for _ in 0..MAX_HALVINGS {
        scale *= 0.5;
        let table = blend(previous, &current, scale);
        if let Ok(global) = combine_global(&node.eta, table.known()) {
            node.table = table;
            node.global = global;
            return Ok(scale);
        }
    }
    // A zero step reproduces the previous, proper global.
    let table = blend(previous, &current, 0.0);
    node.global = combine_global(&node.eta, table.known())?;
    node.table = table;
    Ok(0.0)
}

fn node_gibbs(gibbs: &GibbsConfig, iteration: usize, sensor: usize) -> GibbsConfig {
    gibbs.with_seed(derive_seed(gibbs.seed, &[iteration as u64, sensor as u64]))
}

/// Runs `max_iterations` EP iterations at one time step and returns each node's posterior.
pub fn run_ep_timestep(
    input: &TimestepInput,
    scheme: CommScheme,
    ep: &EpConfig,
    gibbs: &GibbsConfig,
) -> Result<TimestepOutput> {
    ep.validate()?;
    gibbs.validate()?;
    let n = input.sensors.len();
    if n == 0 {
        return Err(Error::EmptyInput("sensors"));
    }
    for len in [input.priors.len(), input.measurements.len(), input.graph.num_nodes()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    if ep.schedule == Schedule::Sequential && scheme != CommScheme::FullExchange {
        return Err(Error::config(
            "ep.schedule",
            "the sequential schedule is only defined for full exchange",
        ));
    }
    let num_targets = input.priors[0].len();

    let mut nodes = input
        .priors
        .iter()
        .enumerate()
        .map(|(s, prior)| {
            let (sites, global) = init_sites(prior, n)?;
            let own = sites.into_iter().nth(s).expect("one site per sensor");
            let mut table = SiteTable::new(s, own, n);
            if scheme == CommScheme::FullExchange {
                for other in 0..n {
                    table.merge(&SiteApproximation::zero(other, num_targets, global.prior[0].dim()));
                }
            }
            Ok(NodeState {
                eta: global.prior.clone(),
                table,
                global,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ci = 0;
    let mut diagnostics = Vec::new();
    let mut comm = Vec::new();

    for iteration in 1..=ep.max_iterations {
        let mut cavity_valid = vec![true; n];
        let mut step_scale = vec![1.0; n];
        match ep.schedule {
            Schedule::Parallel => {
                let updates = nodes
                    .iter()
                    .enumerate()
                    .map(|(s, node)| {
                        local_update(
                            node,
                            &input.measurements[s],
                            &input.sensors[s],
                            ep,
                            &node_gibbs(gibbs, iteration, s),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let previous: Vec<SiteTable> = nodes.iter().map(|n| n.table.clone()).collect();
                for (s, (site, valid)) in updates.into_iter().enumerate() {
                    nodes[s].table.set_own(site);
                    cavity_valid[s] = valid;
                }
                let exchange = communicate(scheme, input.graph, &nodes)?;
                ci += exchange.rounds;
                log_exchange(&exchange, input.step, iteration, num_targets, &mut comm);
                for ((s, node), table) in nodes.iter_mut().enumerate().zip(exchange.tables) {
                    step_scale[s] = settle(node, &previous[s], table, ep.indefinite_global)?;
                }
            }
            Schedule::Sequential => {
                for s in 0..n {
                    let (site, valid) = local_update(
                        &nodes[s],
                        &input.measurements[s],
                        &input.sensors[s],
                        ep,
                        &node_gibbs(gibbs, iteration, s),
                    )?;
                    let previous: Vec<SiteTable> = nodes.iter().map(|n| n.table.clone()).collect();
                    nodes[s].table.set_own(site);
                    cavity_valid[s] = valid;
                    let exchange = communicate(scheme, input.graph, &nodes)?;
                    ci += exchange.rounds;
                    log_exchange(&exchange, input.step, iteration, num_targets, &mut comm);
                    for ((t, node), table) in nodes.iter_mut().enumerate().zip(exchange.tables) {
                        let scale = settle(node, &previous[t], table, ep.indefinite_global)?;
                        step_scale[t] = step_scale[t].min(scale);
                    }
                }
            }
        }
        diagnostics.extend(nodes.iter().enumerate().map(|(s, node)| IterationDiagnostic {
            step: input.step,
            iteration,
            sensor: s,
            site_norm: node.table.own().norm(),
            cavity_valid: cavity_valid[s],
            step_scale: step_scale[s],
            identity_residual: node.global.identity_residual(node.table.known()),
        }));
    }

    let posteriors = nodes
        .iter()
        .zip(input.priors)
        .map(|(node, prior)| {
            if node.table.known().all(|s| s.is_zero()) {
                Ok(prior.clone())
            } else {
                node.global.beliefs()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimestepOutput {
        posteriors,
        globals: nodes.into_iter().map(|n| n.global).collect(),
        ci,
        diagnostics,
        comm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::mixture_moments;
    use crate::model::{position_observation, simulate_measurements, Region};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn belief(x: f64, y: f64, pos_var: f64) -> GaussianBelief {
        GaussianBelief::from_slices(&[x, 1.0, y, -1.0], &[pos_var, 4.0, pos_var, 4.0]).unwrap()
    }

    fn np(l1: f64, l2: f64, dim: usize) -> NaturalParams {
        NaturalParams {
            lambda1: DVector::from_element(dim, l1),
            lambda2: DMatrix::identity(dim, dim) * l2,
        }
    }

    fn site_of(sensor: usize, blocks: Vec<NaturalParams>) -> SiteApproximation {
        SiteApproximation {
            sensor,
            stamp: 1,
            blocks,
        }
    }

    #[test]
    fn indefinite_global_backtracks_towards_previous_sites() {
        let eta = vec![np(0.0, 1.0, 4)];
        let previous = SiteTable::new(0, SiteApproximation::zero(0, 1, 4), 2);
        let mut current = SiteTable::new(0, site_of(0, vec![np(1.0, -3.0, 4)]), 2);
        current.merge(&site_of(1, vec![np(2.0, 0.0, 4)]));
        let mut node = NodeState {
            global: combine_global(&eta, previous.known()).unwrap(),
            eta,
            table: previous.clone(),
        };
        let err = settle(&mut node, &previous, current.clone(), GlobalPolicy::Abort).unwrap_err();
        assert!(matches!(err, Error::GlobalNotPositiveDefinite { .. }));

        let scale = settle(&mut node, &previous, current, GlobalPolicy::Backtrack).unwrap();
        assert_eq!(scale, 0.25);
        assert_relative_eq!(node.table.own().blocks[0].lambda2[(0, 0)], -0.75);
        // Unseen sites are blended from zero.
        assert_relative_eq!(node.table.get(1).unwrap().blocks[0].lambda1[0], 0.5);
        assert_eq!(node.table.own().stamp, 1);
        assert_eq!(node.global.identity_residual(node.table.known()), 0.0);
        assert!(node.global.beliefs().is_ok());
    }

    #[test]
    fn proper_global_is_installed_unchanged() {
        let eta = vec![np(0.0, 1.0, 4)];
        let previous = SiteTable::new(0, SiteApproximation::zero(0, 1, 4), 1);
        let current = SiteTable::new(0, site_of(0, vec![np(1.0, 2.0, 4)]), 1);
        let mut node = NodeState {
            global: combine_global(&eta, previous.known()).unwrap(),
            eta,
            table: previous.clone(),
        };
        assert_eq!(settle(&mut node, &previous, current.clone(), GlobalPolicy::Backtrack).unwrap(), 1.0);
        assert_eq!(node.table, current);
    }

    #[test]
    fn init_gives_prior_global() {
        let prior = vec![belief(1.0, 2.0, 10.0), belief(-3.0, 4.0, 20.0)];
        let (sites, global) = init_sites(&prior, 3).unwrap();
        assert_eq!(sites.len(), 3);
        assert!(sites.iter().all(|s| s.is_zero() && s.num_targets() == 2));
        assert_eq!(global.blocks, global.prior);
        let back = global.beliefs().unwrap();
        for (b, p) in back.iter().zip(&prior) {
            assert_relative_eq!(b.mean, p.mean, epsilon = 1e-12);
            assert_relative_eq!(b.cov, p.cov, epsilon = 1e-12);
        }
        let (none, g0) = init_sites(&prior, 0).unwrap();
        assert!(none.is_empty());
        assert_eq!(g0.blocks, g0.prior);
    }

    #[test]
    fn cavity_examples() {
        let global = GlobalApproximation {
            prior: vec![np(0.0, 1.0, 4)],
            blocks: vec![np(1.0, 3.0, 4)],
        };
        let zero = SiteApproximation::zero(0, 1, 4);
        assert_eq!(cavity(&global, &zero).unwrap().blocks, global.blocks);

        let c = cavity(&global, &site_of(0, vec![np(0.5, 1.0, 4)])).unwrap();
        assert!(c.valid);
        assert_eq!(c.blocks[0].lambda2, DMatrix::identity(4, 4) * 2.0);

        let c = cavity(&global, &site_of(0, vec![np(0.0, 6.0, 4)])).unwrap();
        assert!(!c.valid);
    }

    #[test]
    fn moment_match_is_blockwise() {
        let a = vec![belief(0.0, 0.0, 1.0), belief(5.0, 5.0, 2.0)];
        let single = BlockMixture::new(vec![a.clone()]).unwrap();
        assert_eq!(moment_match(&single).unwrap(), a);

        let mut b = a.clone();
        b[0] = belief(2.0, 0.0, 1.0);
        let two = BlockMixture::new(vec![a.clone(), b]).unwrap();
        let m = moment_match(&two).unwrap();
        assert_eq!(m[1], a[1]);
        assert_relative_eq!(m[0].mean[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(m[0].cov[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn moment_match_equals_joint_diagonal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let comps: Vec<Vec<GaussianBelief>> = (0..7)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        belief(
                            rng.random_range(-50.0..50.0),
                            rng.random_range(-50.0..50.0),
                            rng.random_range(1.0..30.0),
                        )
                    })
                    .collect()
            })
            .collect();
        let mix = BlockMixture::new(comps).unwrap();
        let joint = mixture_moments(&mix.joint_mixture()).unwrap();
        let blocks = moment_match(&mix).unwrap();
        for (k, b) in blocks.iter().enumerate() {
            let r = 4 * k;
            assert_relative_eq!(b.mean, joint.mean.rows(r, 4).into_owned(), epsilon = 1e-10);
            assert_relative_eq!(b.cov, joint.cov.view((r, r), (4, 4)).into_owned(), epsilon = 1e-10);
        }
    }

    #[test]
    fn site_update_examples() {
        let cav_belief = belief(3.0, 4.0, 9.0);
        let cav = Cavity {
            blocks: vec![to_natural(&cav_belief).unwrap()],
            valid: true,
        };
        let old = site_of(2, vec![np(7.0, 0.3, 4)]);
        let s = site_update(&[cav_belief.clone()], &cav, &old, 1.0).unwrap();
        assert!(s.blocks[0].max_abs() < 1e-12);
        assert_eq!(s.stamp, 2);
        assert_eq!(s.sensor, 2);

        let g_new = belief(1.0, 1.0, 3.0);
        let s = site_update(&[g_new.clone()], &cav, &old, 1.0).unwrap();
        let expected = natural_sub(&to_natural(&g_new).unwrap(), &cav.blocks[0]).unwrap();
        assert_eq!(s.blocks[0], expected);

        // (new - cavity) = (2, 2I): choose new = cavity + (2, 2I).
        let target = np(2.0, 2.0, 4);
        let new_nat = natural_add(&cav.blocks[0], &target).unwrap();
        let zero = SiteApproximation::zero(0, 1, 4);
        let s = site_update(&[to_moment(&new_nat).unwrap()], &cav, &zero, 0.5).unwrap();
        assert_relative_eq!(s.blocks[0].lambda1, DVector::from_element(4, 1.0), epsilon = 1e-12);
        assert_relative_eq!(s.blocks[0].lambda2, DMatrix::identity(4, 4), epsilon = 1e-12);
    }

    #[test]
    fn site_update_rejects_improper_belief() {
        let cav = Cavity {
            blocks: vec![np(0.0, 1.0, 4)],
            valid: true,
        };
        let bad = GaussianBelief {
            mean: DVector::zeros(4),
            cov: -DMatrix::identity(4, 4),
        };
        let old = SiteApproximation::zero(0, 1, 4);
        assert!(site_update(&[bad], &cav, &old, 1.0).is_err());
    }

    #[test]
    fn combine_examples() {
        let eta = vec![np(0.0, 1.0, 4)];
        let zeros = [SiteApproximation::zero(0, 1, 4), SiteApproximation::zero(1, 1, 4)];
        assert_eq!(combine_global(&eta, zeros.iter()).unwrap().blocks, eta);

        let sites = [site_of(0, vec![np(1.0, 1.0, 4)]), site_of(1, vec![np(1.0, 1.0, 4)])];
        let g = combine_global(&eta, sites.iter()).unwrap();
        assert_eq!(g.blocks[0], np(2.0, 3.0, 4));
        assert_eq!(g.identity_residual(sites.iter()), 0.0);

        let partial = combine_global(&eta, sites[..1].iter()).unwrap();
        let stepwise = natural_add(&partial.blocks[0], &sites[1].blocks[0]).unwrap();
        assert_eq!(stepwise, g.blocks[0]);

        let bad = [site_of(0, vec![np(0.0, -2.0, 4)])];
        assert!(matches!(
            combine_global(&eta, bad.iter()),
            Err(Error::GlobalNotPositiveDefinite { target: 0 })
        ));
    }

    fn scenario(
        num_sensors: usize,
        rates: f64,
        clutter: f64,
        seed: u64,
    ) -> (Vec<GaussianBelief>, Vec<MeasurementSet>, Vec<SensorModel>) {
        let truth = [(300.0, 300.0), (700.0, 400.0)];
        let prior: Vec<_> = truth.iter().map(|&(x, y)| belief(x + 5.0, y - 5.0, 100.0)).collect();
        let states: Vec<DVector<f64>> = truth
            .iter()
            .map(|&(x, y)| DVector::from_column_slice(&[x, 1.0, y, -1.0]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sensors: Vec<_> = (0..num_sensors)
            .map(|s| SensorModel::uniform(2, rates * (s + 1) as f64, clutter, 100.0, Region::square(1000.0)))
            .collect();
        let ys = sensors
            .iter()
            .map(|s| simulate_measurements(&states, s, &mut rng))
            .collect();
        (prior, ys, sensors)
    }

    #[test]
    fn single_sensor_single_iteration_is_tilted_moments() {
        let (prior, ys, sensors) = scenario(1, 3.0, 100.0, 1);
        let graph = Graph::complete(1);
        let priors = vec![prior.clone()];
        let input = TimestepInput {
            step: 0,
            priors: &priors,
            measurements: &ys,
            sensors: &sensors,
            graph: &graph,
        };
        let ep = EpConfig {
            max_iterations: 1,
            ..EpConfig::default()
        };
        let gibbs = GibbsConfig::new(40, 5, 11).unwrap();
        let out = run_ep_timestep(&input, CommScheme::FullExchange, &ep, &gibbs).unwrap();
        let tilted = run_tilted_gibbs(&prior, &ys[0], &sensors[0], &node_gibbs(&gibbs, 1, 0)).unwrap();
        let direct = moment_match(&tilted.mixture).unwrap();
        for (a, b) in out.posteriors[0].iter().zip(&direct) {
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-8);
            assert_relative_eq!(a.cov, b.cov, epsilon = 1e-8);
        }
        assert_eq!(out.ci, 1);
    }

    #[test]
    fn empty_measurements_return_prior() {
        let (prior, _, sensors) = scenario(3, 0.0, 0.0, 2);
        let ys = vec![MeasurementSet::default(); 3];
        let graph = Graph::path(3);
        let priors = vec![prior.clone(); 3];
        let input = TimestepInput {
            step: 0,
            priors: &priors,
            measurements: &ys,
            sensors: &sensors,
            graph: &graph,
        };
        for scheme in [CommScheme::FullExchange, CommScheme::FloodOnce, CommScheme::FloodConsensus] {
            let out = run_ep_timestep(&input, scheme, &EpConfig::default(), &GibbsConfig::default()).unwrap();
            assert!(out.posteriors.iter().all(|p| p == &prior));
        }
    }

    #[test]
    fn full_exchange_nodes_agree_bitwise_and_identity_holds() {
        let (prior, ys, sensors) = scenario(4, 2.0, 300.0, 3);
        let graph = Graph::complete(4);
        let priors = vec![prior; 4];
        let input = TimestepInput {
            step: 3,
            priors: &priors,
            measurements: &ys,
            sensors: &sensors,
            graph: &graph,
        };
        let out = run_ep_timestep(&input, CommScheme::FullExchange, &EpConfig::default(), &GibbsConfig::default())
            .unwrap();
        assert!(out.globals.iter().all(|g| g == &out.globals[0]));
        assert!(out.posteriors.iter().all(|p| p == &out.posteriors[0]));
        assert_eq!(out.ci, 5);
        assert_eq!(out.diagnostics.len(), 20);
        assert!(out.diagnostics.iter().all(|d| d.identity_residual <= 1e-10 && d.step == 3));
    }

    #[test]
    fn parallel_updates_do_not_depend_on_sensor_order() {
        let (prior, ys, sensors) = scenario(3, 2.0, 200.0, 4);
        let gibbs = GibbsConfig::default();
        let (sites, global) = init_sites(&prior, 3).unwrap();
        let updated: Vec<_> = (0..3)
            .map(|s| {
                let node = NodeState {
                    eta: global.prior.clone(),
                    table: SiteTable::new(s, sites[s].clone(), 3),
                    global: global.clone(),
                };
                local_update(&node, &ys[s], &sensors[s], &EpConfig::default(), &gibbs).unwrap().0
            })
            .collect();
        let forward = combine_global(&global.prior, updated.iter()).unwrap();
        let backward = combine_global(&global.prior, updated.iter().rev()).unwrap();
        for (a, b) in forward.blocks.iter().zip(&backward.blocks) {
            assert!((&a.lambda1 - &b.lambda1).amax() <= 1e-10);
            assert!((&a.lambda2 - &b.lambda2).amax() <= 1e-10);
        }
    }

    #[test]
    fn reproduced_tilted_moments_leave_site_unchanged() {
        let (prior, ys, sensors) = scenario(1, 3.0, 100.0, 6);
        let (sites, global) = init_sites(&prior, 1).unwrap();
        let cfg = GibbsConfig::default();
        let cav = cavity(&global, &sites[0]).unwrap();
        let g_new = moment_match(&run_tilted_gibbs(&cav.beliefs().unwrap(), &ys[0], &sensors[0], &cfg).unwrap().mixture)
            .unwrap();
        let first = site_update(&g_new, &cav, &sites[0], 1.0).unwrap();
        let second = site_update(&g_new, &cav, &first, 1.0).unwrap();
        for (a, b) in first.blocks.iter().zip(&second.blocks) {
            assert!((&a.lambda1 - &b.lambda1).amax() <= 1e-8);
            assert!((&a.lambda2 - &b.lambda2).amax() <= 1e-8);
        }
    }

    #[test]
    fn conjugate_single_measurement_matches_kalman() {
        let sensor = SensorModel::uniform(1, 1.0, 0.0, 100.0, Region::square(1000.0));
        let prior = vec![belief(500.0, 500.0, 400.0)];
        let ys = vec![MeasurementSet {
            points: vec![[530.0, 480.0]],
        }];
        let graph = Graph::complete(1);
        let priors = vec![prior.clone()];
        let input = TimestepInput {
            step: 0,
            priors: &priors,
            measurements: &ys,
            sensors: std::slice::from_ref(&sensor),
            graph: &graph,
        };
        let out = run_ep_timestep(&input, CommScheme::FullExchange, &EpConfig::default(), &GibbsConfig::default())
            .unwrap();
        let h = position_observation();
        let p = &prior[0];
        let s = &h * &p.cov * h.transpose() + DMatrix::identity(2, 2) * 100.0;
        let gain = &p.cov * h.transpose() * s.try_inverse().unwrap();
        let mean = &p.mean + &gain * (DVector::from_column_slice(&ys[0].points[0]) - &h * &p.mean);
        let cov = (DMatrix::identity(4, 4) - &gain * &h) * &p.cov;
        assert_relative_eq!(out.posteriors[0][0].mean, mean, epsilon = 1e-6);
        assert_relative_eq!(out.posteriors[0][0].cov, cov, epsilon = 1e-6);
    }

    #[test]
    fn invalid_cavity_policies() {
        let prior = vec![belief(0.0, 0.0, 1.0)];
        let (sites, global) = init_sites(&prior, 1).unwrap();
        let mut heavy = sites[0].clone();
        heavy.blocks[0] = global.blocks[0].scale(2.0);
        let node = NodeState {
            eta: global.prior.clone(),
            table: SiteTable::new(0, heavy.clone(), 1),
            global: global.clone(),
        };
        let sensor = SensorModel::uniform(1, 1.0, 1.0, 1.0, Region::square(10.0));
        let y = MeasurementSet {
            points: vec![[0.0, 0.0]],
        };
        let gibbs = GibbsConfig::default();
        let (site, valid) = local_update(&node, &y, &sensor, &EpConfig::default(), &gibbs).unwrap();
        assert!(!valid);
        assert_eq!(site, heavy);
        let abort = EpConfig {
            invalid_cavity: CavityPolicy::Abort,
            ..EpConfig::default()
        };
        assert!(matches!(
            local_update(&node, &y, &sensor, &abort, &gibbs),
            Err(Error::InvalidCavity)
        ));
    }

    #[test]
    fn flood_once_ci_equals_iterations() {
        let (prior, ys, sensors) = scenario(4, 2.0, 100.0, 7);
        let graph = Graph::path(4);
        let priors = vec![prior; 4];
        let input = TimestepInput {
            step: 0,
            priors: &priors,
            measurements: &ys,
            sensors: &sensors,
            graph: &graph,
        };
        let ep = EpConfig {
            max_iterations: 10,
            ..EpConfig::default()
        };
        let out = run_ep_timestep(&input, CommScheme::FloodOnce, &ep, &GibbsConfig::default()).unwrap();
        assert_eq!(out.ci, 10);
        assert_eq!(crate::network::ci_count(&out.comm, 1), vec![10]);

        let out = run_ep_timestep(&input, CommScheme::FloodConsensus, &EpConfig::default(), &GibbsConfig::default())
            .unwrap();
        // Path of four nodes: three rounds per iteration.
        assert_eq!(out.ci, 15);
        assert!(out.globals.iter().all(|g| g == &out.globals[0]));
    }

    #[test]
    fn sequential_schedule_counts_one_round_per_update() {
        let (prior, ys, sensors) = scenario(3, 2.0, 100.0, 8);
        let graph = Graph::complete(3);
        let priors = vec![prior; 3];
        let input = TimestepInput {
            step: 0,
            priors: &priors,
            measurements: &ys,
            sensors: &sensors,
            graph: &graph,
        };
        let ep = EpConfig {
            schedule: Schedule::Sequential,
            max_iterations: 2,
            ..EpConfig::default()
        };
        let out = run_ep_timestep(&input, CommScheme::FullExchange, &ep, &GibbsConfig::default()).unwrap();
        assert_eq!(out.ci, 6);
        assert!(run_ep_timestep(&input, CommScheme::FloodOnce, &ep, &GibbsConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EpConfig::default().validate().is_ok());
        for bad in [
            EpConfig {
                max_iterations: 0,
                ..EpConfig::default()
            },
            EpConfig {
                damping: 0.0,
                ..EpConfig::default()
            },
            EpConfig {
                damping: 1.5,
                ..EpConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }
}
