//! Simulated sensor network: topologies, site tables and message exchange.
//!
//! Communication is synchronous. In each round every node sends what it held
//! before the round, then all receivers merge. A communication iteration (CI)
//! is one such round of neighbour message passing.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ep::SiteApproximation;
use crate::error::{Error, Result};
use crate::model::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    /// One connected random geometric graph for every step.
    Fixed,
    /// A fresh connected random geometric graph at every step.
    Dynamic,
    /// All pairs connected.
    Complete,
}

/// Undirected adjacency per time step, stored as edge lists with `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub num_nodes: usize,
    pub steps: Vec<Vec<[usize; 2]>>,
}

impl Topology {
    pub fn graph(&self, step: usize) -> Graph {
        Graph::from_edges(self.num_nodes, &self.steps[step])
    }
}

/// Adjacency-list graph over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Self-loops and duplicate edges are dropped.
    pub fn from_edges(n: usize, edges: &[[usize; 2]]) -> Self {
        let mut sets = vec![BTreeSet::new(); n];
        for &[a, b] in edges {
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| [a, b]))
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|b| [b - 1, b]).collect();
        Self::from_edges(n, &edges)
    }

    /// Node 0 is the hub.
    pub fn star(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|b| [0, b]).collect();
        Self::from_edges(n, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| [a, b]))
            .collect()
    }

    /// BFS hop counts from `source`; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes() == 0 || self.distances_from(0).iter().all(Option::is_some)
    }

    /// `None` when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut best = 0;
        for s in 0..self.num_nodes() {
            for d in self.distances_from(s) {
                best = best.max(d?);
            }
        }
        Some(best)
    }
}

const FAILURES_PER_GROWTH: usize = 100;
const RADIUS_GROWTH: f64 = 1.1;
const TARGET_DEGREE: f64 = 3.0;

fn random_geometric_graph<R: Rng + ?Sized>(n: usize, region: &Region, rng: &mut R) -> Graph {
    if n <= 1 {
        return Graph::from_edges(n, &[]);
    }
    // Expected degree (n-1) * pi r^2 / A, ignoring boundary effects.
    let mut radius = (TARGET_DEGREE * region.area() / (std::f64::consts::PI * (n - 1) as f64)).sqrt();
    let mut failures = 0usize;
    loop {
        let nodes: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(region.x_min..region.x_max),
                    rng.random_range(region.y_min..region.y_max),
                )
            })
            .collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let (dx, dy) = (nodes[a].0 - nodes[b].0, nodes[a].1 - nodes[b].1);
                if (dx * dx + dy * dy).sqrt() < radius {
                    edges.push([a, b]);
                }
            }
        }
        let graph = Graph::from_edges(n, &edges);
        if graph.is_connected() {
            return graph;
        }
        failures += 1;
        if failures % FAILURES_PER_GROWTH == 0 {
            radius *= RADIUS_GROWTH;
        }
    }
}

pub fn generate_topology<R: Rng + ?Sized>(
    kind: TopologyKind,
    num_nodes: usize,
    steps: usize,
    region: &Region,
    rng: &mut R,
) -> Topology {
    let steps = match kind {
        TopologyKind::Complete => vec![Graph::complete(num_nodes).edges(); steps],
        TopologyKind::Fixed => {
            vec![random_geometric_graph(num_nodes, region, rng).edges(); steps]
        }
        TopologyKind::Dynamic => (0..steps)
            .map(|_| random_geometric_graph(num_nodes, region, rng).edges())
            .collect(),
    };
    Topology { num_nodes, steps }
}

/// A node's view of every sensor's site. `None` means never received.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTable {
    pub owner: usize,
    entries: Vec<Option<SiteApproximation>>,
}

impl SiteTable {
    pub fn new(owner: usize, own: SiteApproximation, num_sensors: usize) -> Self {
        let mut entries = vec![None; num_sensors];
        entries[owner] = Some(own);
        Self { owner, entries }
    }

    /// Iteration stamp of `sensor`'s site, `-1` when never received.
    pub fn stamp(&self, sensor: usize) -> i64 {
        self.entries[sensor].as_ref().map_or(-1, |s| s.stamp)
    }

    pub fn get(&self, sensor: usize) -> Option<&SiteApproximation> {
        self.entries[sensor].as_ref()
    }

    pub fn own(&self) -> &SiteApproximation {
        self.entries[self.owner].as_ref().expect("own entry is always present")
    }

    pub fn set_own(&mut self, site: SiteApproximation) {
        debug_assert_eq!(site.sensor, self.owner);
        self.entries[self.owner] = Some(site);
    }

    /// Keeps the higher-stamped version; returns whether anything changed.
    pub fn merge(&mut self, site: &SiteApproximation) -> bool {
        if site.stamp > self.stamp(site.sensor) {
            self.entries[site.sensor] = Some(site.clone());
            true
        } else {
            false
        }
    }

    /// Known sites in ascending sensor id.
    pub fn known(&self) -> impl Iterator<Item = &SiteApproximation> + Clone {
        self.entries.iter().flatten()
    }

    pub fn known_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn num_sensors(&self) -> usize {
        self.entries.len()
    }

    fn stamps(&self) -> Vec<i64> {
        (0..self.entries.len()).map(|s| self.stamp(s)).collect()
    }
}

/// One point-to-point message inside a communication round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    /// Number of site approximations carried.
    pub sites: usize,
}

/// Outcome of a communication phase.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub tables: Vec<SiteTable>,
    /// Communication rounds used, i.e. the CI increment.
    pub rounds: usize,
    pub messages: Vec<Message>,
}

/// Reals needed to ship one site: per target a 4-vector plus a packed symmetric 4x4.
pub fn site_payload_reals(num_targets: usize) -> usize {
    num_targets * (4 + 10)
}

/// Every node receives every current site directly.
pub fn exchange_full(sites: &[SiteApproximation]) -> Exchange {
    let n = sites.len();
    let tables = (0..n)
        .map(|owner| {
            let mut t = SiteTable::new(owner, sites[owner].clone(), n);
            for s in sites {
                t.entries[s.sensor] = Some(s.clone());
            }
            t
        })
        .collect();
    let messages = (0..n)
        .flat_map(|a| {
            (0..n).filter(move |&b| b != a).map(move |b| Message {
                round: 1,
                sender: a,
                receiver: b,
                sites: 1,
            })
        })
        .collect();
    Exchange {
        tables,
        rounds: 1,
        messages,
    }
}

fn flood_round(graph: &Graph, tables: &[SiteTable], round: usize, messages: &mut Vec<Message>) -> Vec<SiteTable> {
    let mut next = tables.to_vec();
    for (sender, table) in tables.iter().enumerate() {
        for &receiver in graph.neighbors(sender) {
            messages.push(Message {
                round,
                sender,
                receiver,
                sites: table.known_count(),
            });
            for site in table.known() {
                next[receiver].merge(site);
            }
        }
    }
    next
}

fn check_graph(graph: &Graph, tables: &[SiteTable]) -> Result<()> {
    if graph.num_nodes() != tables.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.num_nodes(),
            actual: tables.len(),
        });
    }
    Ok(())
}

/// Exactly one store-and-forward round: each node forwards its whole table.
pub fn flood_once(graph: &Graph, tables: &[SiteTable]) -> Result<Exchange> {
    check_graph(graph, tables)?;
    let mut messages = Vec::new();
    let tables = flood_round(graph, tables, 1, &mut messages);
    Ok(Exchange {
        tables,
        rounds: 1,
        messages,
    })
}

/// Repeats flooding rounds until all tables hold identical stamps.
pub fn flood_until_consensus(graph: &Graph, tables: &[SiteTable]) -> Result<Exchange> {
    check_graph(graph, tables)?;
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    let mut messages = Vec::new();
    let mut current = tables.to_vec();
    let mut rounds = 0;
    let agreed = |ts: &[SiteTable]| {
        let first = ts[0].stamps();
        first.iter().all(|&s| s >= 0) && ts.iter().all(|t| t.stamps() == first)
    };
    while !current.is_empty() && !agreed(&current) {
        rounds += 1;
        current = flood_round(graph, &current, rounds, &mut messages);
        // Each round extends every node's reach by one hop.
        debug_assert!(rounds <= graph.num_nodes());
    }
    Ok(Exchange {
        tables: current,
        rounds,
        messages,
    })
}

/// A logged message with its time step and EP iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommEvent {
    pub step: usize,
    pub iteration: usize,
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    pub payload_reals: usize,
}

/// Communication iterations per step: distinct `(iteration, round)` pairs with traffic.
pub fn ci_count(log: &[CommEvent], steps: usize) -> Vec<usize> {
    let mut per_step = vec![BTreeSet::new(); steps];
    for e in log {
        per_step[e.step].insert((e.iteration, e.round));
    }
    per_step.into_iter().map(|s| s.len()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::NaturalParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn site(sensor: usize, stamp: i64) -> SiteApproximation {
        SiteApproximation {
            sensor,
            stamp,
            blocks: vec![NaturalParams::zeros(4)],
        }
    }

    fn fresh_tables(n: usize, stamp: i64) -> Vec<SiteTable> {
        (0..n).map(|s| SiteTable::new(s, site(s, stamp), n)).collect()
    }

    #[test]
    fn single_node_topology_has_no_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = generate_topology(TopologyKind::Dynamic, 1, 4, &Region::square(1000.0), &mut rng);
        assert!(t.steps.iter().all(|e| e.is_empty()));
        assert!(t.graph(0).is_connected());
    }

    #[test]
    fn two_nodes_always_share_an_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [TopologyKind::Fixed, TopologyKind::Dynamic] {
            let t = generate_topology(kind, 2, 20, &Region::square(1000.0), &mut rng);
            assert!(t.steps.iter().all(|e| e == &vec![[0, 1]]));
        }
    }

    #[test]
    fn fixed_topology_is_constant_and_dynamic_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let region = Region::square(1000.0);
        let fixed = generate_topology(TopologyKind::Fixed, 5, 10, &region, &mut rng);
        assert!(fixed.steps.windows(2).all(|w| w[0] == w[1]));
        assert!(fixed.graph(0).is_connected());
        let dynamic = generate_topology(TopologyKind::Dynamic, 8, 30, &region, &mut rng);
        assert!((0..30).all(|s| dynamic.graph(s).is_connected()));
        assert!(dynamic.steps.windows(2).any(|w| w[0] != w[1]));
        for step in &dynamic.steps {
            assert!(step.iter().all(|&[a, b]| a < b));
        }
    }

    #[test]
    fn full_exchange_synchronises_tables() {
        let sites: Vec<_> = (0..4).map(|s| site(s, 3)).collect();
        let ex = exchange_full(&sites);
        assert_eq!(ex.rounds, 1);
        for t in &ex.tables {
            assert_eq!(t.stamps(), vec![3; 4]);
            assert_eq!(t.known().cloned().collect::<Vec<_>>(), sites);
        }
        assert_eq!(ex.messages.len(), 12);
    }

    #[test]
    fn consensus_rounds_match_diameter() {
        let complete = flood_until_consensus(&Graph::complete(5), &fresh_tables(5, 1)).unwrap();
        assert_eq!(complete.rounds, 1);
        let path = flood_until_consensus(&Graph::path(5), &fresh_tables(5, 1)).unwrap();
        assert_eq!(path.rounds, 4);
        let star = flood_until_consensus(&Graph::star(5), &fresh_tables(5, 1)).unwrap();
        assert_eq!(star.rounds, 2);
        for ex in [&complete, &path, &star] {
            assert!(ex.tables.iter().all(|t| t.stamps() == vec![1; 5]));
        }
        let single = flood_until_consensus(&Graph::complete(1), &fresh_tables(1, 1)).unwrap();
        assert_eq!(single.rounds, 0);
    }

    #[test]
    fn consensus_rejects_disconnected_graph() {
        let g = Graph::from_edges(3, &[[0, 1]]);
        assert!(matches!(
            flood_until_consensus(&g, &fresh_tables(3, 1)),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn flood_once_store_and_forward_on_path() {
        // A - B - C; each iteration every node refreshes its own site first.
        let g = Graph::path(3);
        let mut tables = fresh_tables(3, 0);
        for t in tables.iter_mut() {
            let owner = t.owner;
            t.set_own(site(owner, 1));
        }
        tables = flood_once(&g, &tables).unwrap().tables;
        assert_eq!(tables[2].stamp(1), 1);
        assert_eq!(tables[2].stamp(0), -1);

        for t in tables.iter_mut() {
            let owner = t.owner;
            t.set_own(site(owner, 2));
        }
        tables = flood_once(&g, &tables).unwrap().tables;
        assert_eq!(tables[2].stamp(0), 1);
        assert_eq!(tables[2].stamp(1), 2);
    }

    #[test]
    fn flood_once_on_complete_graph_equals_full_exchange() {
        let sites: Vec<_> = (0..4).map(|s| site(s, 5)).collect();
        let tables: Vec<_> = sites
            .iter()
            .map(|s| SiteTable::new(s.sensor, s.clone(), 4))
            .collect();
        let once = flood_once(&Graph::complete(4), &tables).unwrap();
        let full = exchange_full(&sites);
        assert_eq!(once.tables, full.tables);
    }

    #[test]
    fn merge_keeps_highest_stamp() {
        let mut t = SiteTable::new(0, site(0, 2), 2);
        assert!(t.merge(&site(1, 3)));
        assert!(!t.merge(&site(1, 1)));
        assert_eq!(t.stamp(1), 3);
        assert!(!t.merge(&site(0, 1)));
        assert_eq!(t.stamp(0), 2);
    }

    #[test]
    fn ci_count_counts_rounds_per_step() {
        let ev = |step, iteration, round| CommEvent {
            step,
            iteration,
            round,
            sender: 0,
            receiver: 1,
            payload_reals: 14,
        };
        let log = vec![ev(0, 1, 1), ev(0, 1, 1), ev(0, 2, 1), ev(1, 1, 1), ev(1, 1, 2)];
        assert_eq!(ci_count(&log, 3), vec![2, 2, 0]);
    }

    #[test]
    fn payload_size() {
        assert_eq!(site_payload_reals(5), 70);
    }
}
