//! Discrete model of the Brownian filtration: scenario tree, measurable
//! random variables, adapted processes, stopping times and exact
//! conditional expectation.
//!
//! Two topologies are supported. The path tree is the primary model: atoms
//! of `F_k` are length-`k` branch words, so path-dependent drivers, events
//! and stopping times are all representable, at the cost of `2^(d*k)` nodes
//! per slice. The recombining topology (d = 1) indexes a time-`k` slice by
//! the number of down moves and scales to thousands of steps, but only
//! level-measurable data can live on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GevalError, Result};

/// Default cap on `d * N` for the path tree (about 16.7M leaves).
pub const DEFAULT_CAPACITY_BITS: u32 = 24;

/// Slice size above which level-wise loops go parallel.
pub(crate) const PAR_THRESHOLD: usize = 1 << 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Horizon T in real time units.
    pub horizon: f64,
    /// Number of grid steps N.
    pub steps: usize,
    /// Brownian dimension d.
    pub dimension: usize,
}

impl LatticeSpec {
    pub fn new(horizon: f64, steps: usize, dimension: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GevalError::InvalidSpec(format!("horizon T = {horizon}")));
        }
        if steps == 0 {
            return Err(GevalError::InvalidSpec("steps N = 0".into()));
        }
        if dimension == 0 {
            return Err(GevalError::InvalidSpec("dimension d = 0".into()));
        }
        Ok(LatticeSpec { horizon, steps, dimension })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Brownian increment magnitude sqrt(dt).
    pub fn db(&self) -> f64 {
        self.dt().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Non-recombining binary scenario tree; `2^(d*k)` nodes at time k.
    PathTree,
    /// Level-indexed binomial lattice (d = 1 only); `k + 1` nodes at time k.
    Recombining,
}

/// The discrete filtration carrier. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Lattice {
    spec: LatticeSpec,
    topology: Topology,
}

impl Lattice {
    /// Path tree with the default capacity cap.
    pub fn path_tree(spec: LatticeSpec) -> Result<Self> {
        Self::path_tree_with_cap(spec, DEFAULT_CAPACITY_BITS)
    }

    /// Path tree with an explicit capacity override.
    pub fn path_tree_with_cap(spec: LatticeSpec, cap_bits: u32) -> Result<Self> {
        LatticeSpec::new(spec.horizon, spec.steps, spec.dimension)?;
        let bits = spec.dimension as u128 * spec.steps as u128;
        if bits > cap_bits as u128 || bits >= usize::BITS as u128 {
            return Err(GevalError::CapacityExceeded {
                nodes: 1u128.checked_shl(bits.min(127) as u32).unwrap_or(u128::MAX),
                cap: cap_bits,
            });
        }
        Ok(Lattice { spec, topology: Topology::PathTree })
    }

    /// Recombining binomial lattice; only d = 1 recombines exactly.
    pub fn recombining(spec: LatticeSpec) -> Result<Self> {
        LatticeSpec::new(spec.horizon, spec.steps, spec.dimension)?;
        if spec.dimension != 1 {
            return Err(GevalError::InvalidSpec(
                "recombining topology requires dimension 1".into(),
            ));
        }
        Ok(Lattice { spec, topology: Topology::Recombining })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn is_path_tree(&self) -> bool {
        self.topology == Topology::PathTree
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt()
    }

    pub fn db(&self) -> f64 {
        self.spec.db()
    }

    /// Real time of grid index k.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Branches out of every node: `2^d` on the path tree, 2 recombining.
    pub fn branch_count(&self) -> usize {
        match self.topology {
            Topology::PathTree => 1usize << self.spec.dimension,
            Topology::Recombining => 2,
        }
    }

    /// Uniform branch weight `1 / branch_count`.
    pub fn branch_weight(&self) -> f64 {
        1.0 / self.branch_count() as f64
    }

    pub fn nodes_at(&self, k: usize) -> usize {
        debug_assert!(k <= self.spec.steps);
        match self.topology {
            Topology::PathTree => 1usize << (self.spec.dimension * k),
            Topology::Recombining => k + 1,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes_at(self.spec.steps)
    }

    /// Child index of `node` (at any level) under branch `b`.
    ///
    /// Path tree: node words are read as big-endian integers, first step most
    /// significant, so the child is `node * 2^d + b`. Recombining: index is
    /// the number of down moves, branch 0 is up.
    pub fn child(&self, node: usize, branch: usize) -> usize {
        match self.topology {
            Topology::PathTree => (node << self.spec.dimension) | branch,
            Topology::Recombining => node + branch,
        }
    }

    /// Parent of a node at level `k >= 1` on the path tree.
    pub fn parent(&self, node: usize) -> Result<usize> {
        match self.topology {
            Topology::PathTree => Ok(node >> self.spec.dimension),
            Topology::Recombining => Err(GevalError::Unsupported(
                "recombining nodes have multiple parents".into(),
            )),
        }
    }

    /// Increment of Brownian coordinate `coord` along branch `b`.
    ///
    /// Branch bits are read big-endian across coordinates: bit 0 of the
    /// branch word means "up" for the corresponding coordinate. Branch 0 is
    /// all-up.
    pub fn increment(&self, branch: usize, coord: usize) -> f64 {
        let d = self.spec.dimension;
        debug_assert!(coord < d);
        let bit = match self.topology {
            Topology::PathTree => (branch >> (d - 1 - coord)) & 1,
            Topology::Recombining => branch & 1,
        };
        if bit == 0 {
            self.db()
        } else {
            -self.db()
        }
    }

    /// Ancestor at level `k` of a leaf (path tree only).
    pub fn ancestor(&self, leaf: usize, k: usize) -> Result<usize> {
        match self.topology {
            Topology::PathTree => Ok(leaf >> (self.spec.dimension * (self.spec.steps - k))),
            Topology::Recombining => Err(GevalError::Unsupported(
                "leaf ancestors are not defined on the recombining lattice".into(),
            )),
        }
    }

    /// Probability of a single leaf atom.
    pub fn leaf_probability(&self, leaf: usize) -> f64 {
        match self.topology {
            Topology::PathTree => self.branch_weight().powi(self.spec.steps as i32),
            Topology::Recombining => {
                let n = self.spec.steps;
                // C(n, leaf) / 2^n accumulated in log-free form
                let mut p = 1.0f64;
                let mut c = 1.0f64;
                for i in 0..n {
                    p *= 0.5;
                    if i < leaf {
                        c *= (n - i) as f64 / (i + 1) as f64;
                    }
                }
                c * p
            }
        }
    }

    /// Brownian coordinate value at a single node.
    pub fn brownian_at(&self, k: usize, node: usize, coord: usize) -> f64 {
        match self.topology {
            Topology::PathTree => {
                let d = self.spec.dimension;
                let mut b = 0.0;
                for step in 0..k {
                    let branch = (node >> (d * (k - 1 - step))) & ((1 << d) - 1);
                    b += self.increment(branch, coord);
                }
                b
            }
            Topology::Recombining => (k as f64 - 2.0 * node as f64) * self.db(),
        }
    }

    /// The walk `B^coord` as an adapted process.
    pub fn brownian(&self, coord: usize) -> AdaptedProcess {
        let mut comps = Vec::with_capacity(self.spec.steps + 1);
        comps.push(RandomVariable::new(0, vec![0.0]));
        for k in 0..self.spec.steps {
            let prev = &comps[k];
            let mut next = vec![0.0; self.nodes_at(k + 1)];
            for node in 0..self.nodes_at(k) {
                for b in 0..self.branch_count() {
                    next[self.child(node, b)] = prev.values[node] + self.increment(b, coord);
                }
            }
            comps.push(RandomVariable::new(k + 1, next));
        }
        AdaptedProcess(comps)
    }

    pub fn constant(&self, k: usize, c: f64) -> RandomVariable {
        RandomVariable::new(k, vec![c; self.nodes_at(k)])
    }

    pub fn check_rv(&self, x: &RandomVariable) -> Result<()> {
        if x.time > self.spec.steps || x.values.len() != self.nodes_at(x.time) {
            return Err(GevalError::LatticeMismatch(format!(
                "random variable at time {} with {} values",
                x.time,
                x.values.len()
            )));
        }
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(GevalError::LatticeMismatch("non-finite value".into()));
        }
        Ok(())
    }
}

/// An `F_k`-measurable quantity: a time index plus one value per time-k node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomVariable {
    pub time: usize,
    pub values: Vec<f64>,
}

impl RandomVariable {
    pub fn new(time: usize, values: Vec<f64>) -> Self {
        RandomVariable { time, values }
    }
}

/// One component per grid index k = 0..=N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess(pub Vec<RandomVariable>);

impl AdaptedProcess {
    pub fn at(&self, k: usize) -> &RandomVariable {
        &self.0[k]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, lat: &Lattice) -> Result<()> {
        if self.0.len() != lat.steps() + 1 {
            return Err(GevalError::LatticeMismatch(format!(
                "process has {} components, lattice has {} slices",
                self.0.len(),
                lat.steps() + 1
            )));
        }
        for (k, rv) in self.0.iter().enumerate() {
            if rv.time != k {
                return Err(GevalError::LatticeMismatch(format!(
                    "component {k} carries time index {}",
                    rv.time
                )));
            }
            lat.check_rv(rv)?;
        }
        Ok(())
    }

    /// Zero process on the lattice.
    pub fn zeros(lat: &Lattice) -> Self {
        AdaptedProcess((0..=lat.steps()).map(|k| lat.constant(k, 0.0)).collect())
    }

    pub fn sup_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|rv| rv.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// One backward averaging step: values at `k` from values at `k + 1`.
pub(crate) fn average_step(lat: &Lattice, k: usize, child_vals: &[f64]) -> Vec<f64> {
    let w = lat.branch_weight();
    let nb = lat.branch_count();
    let n = lat.nodes_at(k);
    let body = |node: usize| {
        let mut s = 0.0;
        for b in 0..nb {
            s += child_vals[lat.child(node, b)];
        }
        s * w
    };
    if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(body).collect()
    } else {
        (0..n).map(body).collect()
    }
}

/// Exact conditional expectation `E[X | F_s]`.
pub fn cond_expect(lat: &Lattice, x: &RandomVariable, s: usize) -> Result<RandomVariable> {
    lat.check_rv(x)?;
    if s > x.time {
        return Err(GevalError::TimeOrder { s, t: x.time });
    }
    let mut vals = x.values.clone();
    for k in (s..x.time).rev() {
        vals = average_step(lat, k, &vals);
    }
    Ok(RandomVariable::new(s, vals))
}

/// Mean `E[X]` as a scalar.
pub fn expect(lat: &Lattice, x: &RandomVariable) -> Result<f64> {
    Ok(cond_expect(lat, x, 0)?.values[0])
}

/// A discrete stopping time, stored as its value per leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingTime {
    pub times: Vec<usize>,
}

impl StoppingTime {
    pub fn constant(lat: &Lattice, k: usize) -> Result<Self> {
        if k > lat.steps() {
            return Err(GevalError::InvalidSpec(format!("stopping value {k} > N")));
        }
        Ok(StoppingTime { times: vec![k; lat.leaf_count()] })
    }

    /// First grid time the adapted process reaches at or above `level`,
    /// else N.
    pub fn hitting(lat: &Lattice, y: &AdaptedProcess, level: f64) -> Result<Self> {
        if !lat.is_path_tree() {
            return Err(GevalError::Unsupported("stopping times need the path tree".into()));
        }
        y.check(lat)?;
        let n = lat.steps();
        let times = (0..lat.leaf_count())
            .map(|leaf| {
                for k in 0..=n {
                    let node = lat.ancestor(leaf, k).expect("path tree");
                    if y.at(k).values[node] >= level {
                        return k;
                    }
                }
                n
            })
            .collect();
        Ok(StoppingTime { times })
    }

    pub fn max_value(&self) -> usize {
        self.times.iter().copied().max().unwrap_or(0)
    }

    /// Pathwise `self <= other`.
    pub fn le(&self, other: &StoppingTime) -> bool {
        self.times.len() == other.times.len()
            && self.times.iter().zip(&other.times).all(|(a, b)| a <= b)
    }
}

/// Atom-scan check of the stopping-time property: for each k, the event
/// `{tau = k}` must be a union of time-k atoms.
pub fn is_stopping_time(lat: &Lattice, tau: &StoppingTime) -> bool {
    if !lat.is_path_tree() || tau.times.len() != lat.leaf_count() {
        return false;
    }
    let n = lat.steps();
    if tau.times.iter().any(|&t| t > n) {
        return false;
    }
    for k in 0..=n {
        let atom = lat.leaf_count() / lat.nodes_at(k);
        for node in 0..lat.nodes_at(k) {
            let first = tau.times[node * atom] == k;
            for leaf in node * atom..(node + 1) * atom {
                if (tau.times[leaf] == k) != first {
                    return false;
                }
            }
        }
    }
    true
}

/// Per-level table: `stopped[k][node]` iff `tau <= k` on that atom.
/// Only meaningful for verified stopping times.
pub(crate) fn stopped_table(lat: &Lattice, tau: &StoppingTime) -> Vec<Vec<bool>> {
    let n = lat.steps();
    (0..=n)
        .map(|k| {
            let atom = lat.leaf_count() / lat.nodes_at(k);
            (0..lat.nodes_at(k)).map(|node| tau.times[node * atom] <= k).collect()
        })
        .collect()
}

/// The stopped value `Y_{tau(w)}(w)` per leaf.
pub fn stopped_value(
    lat: &Lattice,
    y: &AdaptedProcess,
    tau: &StoppingTime,
) -> Result<RandomVariable> {
    if !is_stopping_time(lat, tau) {
        return Err(GevalError::NotAStoppingTime);
    }
    y.check(lat)?;
    let vals = (0..lat.leaf_count())
        .map(|leaf| {
            let k = tau.times[leaf];
            y.at(k).values[lat.ancestor(leaf, k).expect("path tree")]
        })
        .collect();
    Ok(RandomVariable::new(lat.steps(), vals))
}

/// Atom-constancy check: is the leaf-valued `x` constant on each atom of
/// `F_tau`?
pub fn is_f_tau_measurable(lat: &Lattice, x: &RandomVariable, tau: &StoppingTime) -> bool {
    if x.time != lat.steps() || x.values.len() != lat.leaf_count() {
        return false;
    }
    let d = lat.dimension();
    let n = lat.steps();
    for leaf in 0..lat.leaf_count() {
        let k = tau.times[leaf];
        let anc = lat.ancestor(leaf, k).expect("path tree");
        let rep = anc << (d * (n - k));
        if x.values[leaf] != x.values[rep] {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_path(n: usize, d: usize) -> Lattice {
        Lattice::path_tree(LatticeSpec::new(1.0, n, d).unwrap()).unwrap()
    }

    #[test]
    fn build_examples() {
        let l = small_path(1, 1);
        assert_eq!(l.leaf_count(), 2);
        assert_eq!(l.increment(0, 0), 1.0);
        assert_eq!(l.increment(1, 0), -1.0);

        let l = small_path(2, 1);
        assert_eq!(l.leaf_count(), 4);
        assert!((l.db() - 0.5f64.sqrt()).abs() < 1e-15);

        let l = Lattice::path_tree(LatticeSpec::new(2.0, 8, 2).unwrap()).unwrap();
        assert_eq!(l.leaf_count(), 65536);
    }

    #[test]
    fn capacity_and_spec_errors() {
        assert!(matches!(
            Lattice::path_tree(LatticeSpec { horizon: 1.0, steps: 30, dimension: 1 }),
            Err(GevalError::CapacityExceeded { .. })
        ));
        assert!(LatticeSpec::new(-1.0, 4, 1).is_err());
        assert!(LatticeSpec::new(1.0, 0, 1).is_err());
        assert!(LatticeSpec::new(1.0, 4, 0).is_err());
        assert!(Lattice::recombining(LatticeSpec::new(1.0, 4, 2).unwrap()).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        for lat in [small_path(6, 2), Lattice::recombining(LatticeSpec::new(1.0, 40, 1).unwrap()).unwrap()] {
            let total: f64 = (0..lat.leaf_count()).map(|l| lat.leaf_probability(l)).sum();
            assert!((total - 1.0).abs() < 1e-12, "total = {total}");
        }
    }

    #[test]
    fn increments_have_exact_moments() {
        let lat = small_path(4, 3);
        let w = lat.branch_weight();
        for coord in 0..3 {
            let mean: f64 = (0..lat.branch_count()).map(|b| w * lat.increment(b, coord)).sum();
            let var: f64 =
                (0..lat.branch_count()).map(|b| w * lat.increment(b, coord).powi(2)).sum();
            assert_eq!(mean, 0.0);
            assert!((var - lat.dt()).abs() < 1e-15);
        }
    }

    #[test]
    fn cond_expect_of_walk() {
        for lat in [small_path(4, 1), Lattice::recombining(LatticeSpec::new(1.0, 64, 1).unwrap()).unwrap()] {
            let b = lat.brownian(0);
            let bn = b.at(lat.steps()).clone();
            assert_eq!(expect(&lat, &bn).unwrap(), 0.0);
            let sq = RandomVariable::new(bn.time, bn.values.iter().map(|v| v * v).collect());
            assert!((expect(&lat, &sq).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_at_matches_process() {
        let lat = small_path(5, 2);
        let b1 = lat.brownian(1);
        for k in 0..=5 {
            for node in 0..lat.nodes_at(k) {
                assert_eq!(lat.brownian_at(k, node, 1), b1.at(k).values[node]);
            }
        }
    }

    #[test]
    fn stopping_time_examples() {
        let lat = small_path(5, 1);
        let b = lat.brownian(0);
        let tau = StoppingTime::constant(&lat, 5).unwrap();
        assert!(is_stopping_time(&lat, &tau));

        let hit = StoppingTime::hitting(&lat, &b, 0.5).unwrap();
        assert!(is_stopping_time(&lat, &hit));

        // anticipating: tau = N * 1{B_N >= 0} decides at time 0
        let n = lat.steps();
        let anticipating = StoppingTime {
            times: (0..lat.leaf_count())
                .map(|leaf| if b.at(n).values[leaf] >= 0.0 { n } else { 0 })
                .collect(),
        };
        assert!(!is_stopping_time(&lat, &anticipating));
    }

    #[test]
    fn stopped_walk_hits_level() {
        let lat = small_path(6, 1);
        let b = lat.brownian(0);
        let tau = StoppingTime::hitting(&lat, &b, lat.db()).unwrap();
        let stopped = stopped_value(&lat, &b, &tau).unwrap();
        for (leaf, v) in stopped.values.iter().enumerate() {
            if tau.times[leaf] < lat.steps() {
                assert!((v - lat.db()).abs() < 1e-15);
            } else {
                assert_eq!(*v, b.at(lat.steps()).values[leaf]);
            }
        }
    }

    #[test]
    fn optional_stopping_for_the_walk() {
        // classical optional stopping, checked by brute force over all paths
        let lat = small_path(6, 1);
        let b = lat.brownian(0);
        for level in [lat.db(), 0.5, 0.9] {
            let tau = StoppingTime::hitting(&lat, &b, level).unwrap();
            let stopped = stopped_value(&lat, &b, &tau).unwrap();
            let mean: f64 = stopped
                .values
                .iter()
                .enumerate()
                .map(|(leaf, v)| lat.leaf_probability(leaf) * v)
                .sum();
            assert!(mean.abs() < 1e-12);
            assert!((expect(&lat, &stopped).unwrap() - mean).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn tower_property(vals in proptest::collection::vec(-10.0f64..10.0, 64),
                          s in 0usize..3, sp in 0usize..4) {
            let lat = small_path(6, 1);
            let x = RandomVariable::new(6, vals);
            let (s, sp) = (s.min(sp), s.max(sp));
            let inner = cond_expect(&lat, &x, sp).unwrap();
            let two_step = cond_expect(&lat, &inner, s).unwrap();
            let direct = cond_expect(&lat, &x, s).unwrap();
            for (a, b) in two_step.values.iter().zip(&direct.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn conditional_mean_of_increment_is_zero(k in 0usize..5) {
            let lat = small_path(5, 2);
            let b = lat.brownian(0);
            let diff = RandomVariable::new(
                k + 1,
                (0..lat.nodes_at(k + 1))
                    .map(|c| {
                        let parent = lat.parent(c).unwrap();
                        b.at(k + 1).values[c] - b.at(k).values[parent]
                    })
                    .collect(),
            );
            let ce = cond_expect(&lat, &diff, k).unwrap();
            for v in ce.values {
                prop_assert!(v.abs() < 1e-15);
            }
        }
    }
}
