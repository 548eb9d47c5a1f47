//! Nonlinear martingale classification, Doob-Meyer decomposition (direct
//! per-node root-finding and the penalization scheme), representation
//! extraction, and the upcrossing / optional-stopping checks.

use serde::Serialize;

use crate::bsde::{self, Dividend, PredictableProcess, SolverConfig};
use crate::drivers::Driver;
use crate::error::{GevalError, Result};
use crate::evaluation::{DividendStream, Evaluation};
use crate::lattice::{
    stopped_value, AdaptedProcess, Lattice, RandomVariable, StoppingTime,
};

const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MartingaleClass {
    Martingale,
    Supermartingale,
    Submartingale,
    None,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyReport {
    pub class: MartingaleClass,
    /// Worst positive excess of E_{k,k+1}[Y_{k+1}] over Y_k
    /// (supermartingale defect).
    pub super_defect: f64,
    /// Worst positive excess of Y_k over E_{k,k+1}[Y_{k+1}]
    /// (submartingale defect).
    pub sub_defect: f64,
}

/// One-step comparison of Y_k with E_{k,k+1}[Y_{k+1}] at every node;
/// one step suffices by (A3). The evaluation may be lifted.
pub fn classify(e: &Evaluation, y: &AdaptedProcess) -> Result<ClassifyReport> {
    let lat = e.lattice();
    y.check(lat)?;
    let n = lat.steps();
    let mut super_defect = 0.0f64;
    let mut sub_defect = 0.0f64;
    for k in 0..n {
        let stepped = e.one_step(k, &y.at(k + 1).values)?;
        for (node, v) in stepped.iter().enumerate() {
            let diff = v - y.at(k).values[node];
            super_defect = super_defect.max(diff);
            sub_defect = sub_defect.max(-diff);
        }
    }
    let class = if super_defect <= SLACK && sub_defect <= SLACK {
        MartingaleClass::Martingale
    } else if super_defect <= SLACK {
        MartingaleClass::Supermartingale
    } else if sub_defect <= SLACK {
        MartingaleClass::Submartingale
    } else {
        MartingaleClass::None
    };
    Ok(ClassifyReport { class, super_defect, sub_defect })
}

/// The increasing predictable process of a Doob-Meyer decomposition,
/// stored as per-step F_k-measurable increments.
#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub increments: Vec<RandomVariable>,
    /// Max nodewise defect of Y_t = E_{t,T}[Y_T; A].
    pub residual: f64,
}

impl Decomposition {
    /// Cumulative A as an adapted process. Path tree only: cumulative
    /// path sums do not recombine.
    pub fn cumulative(&self, lat: &Lattice) -> Result<AdaptedProcess> {
        if !lat.is_path_tree() {
            return Err(GevalError::Unsupported(
                "cumulative dividend needs the path tree".into(),
            ));
        }
        let n = lat.steps();
        let mut layers = vec![RandomVariable::new(0, vec![0.0])];
        for k in 0..n {
            let prev = &layers[k];
            let vals: Vec<f64> = (0..lat.nodes_at(k + 1))
                .map(|node| {
                    let parent = lat.parent(node).expect("path tree");
                    prev.values[parent] + self.increments[k].values[parent]
                })
                .collect();
            layers.push(RandomVariable::new(k + 1, vals));
        }
        Ok(AdaptedProcess(layers))
    }

    /// Sup over paths and times of |cumulative difference| with another
    /// decomposition, via a max/min path-sum sweep (works on both
    /// topologies).
    pub fn cumulative_distance(&self, lat: &Lattice, other: &Decomposition) -> f64 {
        let n = lat.steps();
        let mut hi = vec![0.0f64];
        let mut lo = vec![0.0f64];
        let mut worst = 0.0f64;
        for k in 0..n {
            let next_nodes = lat.nodes_at(k + 1);
            let mut nhi = vec![f64::NEG_INFINITY; next_nodes];
            let mut nlo = vec![f64::INFINITY; next_nodes];
            for node in 0..lat.nodes_at(k) {
                let d = self.increments[k].values[node] - other.increments[k].values[node];
                for b in 0..lat.branch_count() {
                    let c = lat.child(node, b);
                    nhi[c] = nhi[c].max(hi[node] + d);
                    nlo[c] = nlo[c].min(lo[node] + d);
                }
            }
            for c in 0..next_nodes {
                worst = worst.max(nhi[c].abs()).max(nlo[c].abs());
            }
            hi = nhi;
            lo = nlo;
        }
        worst
    }
}

fn residual_of(e: &Evaluation, y: &AdaptedProcess, incs: &[RandomVariable]) -> Result<f64> {
    let lat = e.lattice();
    let lifted = e.lift_with_increments(incs)?;
    let n = lat.steps();
    let mut vals = y.at(n).values.clone();
    let mut worst = 0.0f64;
    for k in (0..n).rev() {
        vals = lifted.one_step(k, &vals)?;
        for (node, v) in vals.iter().enumerate() {
            worst = worst.max((v - y.at(k).values[node]).abs());
        }
    }
    Ok(worst)
}

/// Direct decomposition: per node, bisect for c >= 0 with
/// E_{k,k+1}[Y_{k+1} + c] = Y_k (monotone in c by A1).
pub fn doob_meyer_direct(e: &Evaluation, y: &AdaptedProcess) -> Result<Decomposition> {
    let lat = e.lattice();
    if e.dividend().is_some() {
        return Err(GevalError::Unsupported("decompose under the unlifted operator".into()));
    }
    let report = classify(e, y)?;
    if !matches!(report.class, MartingaleClass::Supermartingale | MartingaleClass::Martingale) {
        return Err(GevalError::NotSupermartingale(report.super_defect));
    }
    let n = lat.steps();
    let nb = lat.branch_count();
    let mu = e.mu.unwrap_or(0.0);
    let horizon = lat.spec().horizon;
    let mut increments = Vec::with_capacity(n);
    for k in 0..n {
        let next = &y.at(k + 1).values;
        let mut incs = Vec::with_capacity(lat.nodes_at(k));
        for node in 0..lat.nodes_at(k) {
            let base: Vec<f64> = (0..nb).map(|b| next[lat.child(node, b)]).collect();
            let target = y.at(k).values[node];
            let phi = |c: f64| -> Result<f64> {
                let shifted: Vec<f64> = base.iter().map(|v| v + c).collect();
                e.one_step_node(k, node, &shifted)
            };
            let at_zero = phi(0.0)?;
            if at_zero > target + SLACK {
                return Err(GevalError::NotSupermartingale(at_zero - target));
            }
            if at_zero >= target - SLACK {
                // martingale node: nothing to compensate
                incs.push(0.0);
                continue;
            }
            let mut hi = (target - at_zero) * (mu * horizon).exp() + 1.0;
            let mut tries = 0;
            while phi(hi)? < target {
                hi *= 2.0;
                tries += 1;
                if tries > 60 {
                    return Err(GevalError::RootBracketFailure { k, node });
                }
            }
            let mut lo = 0.0f64;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if phi(mid)? < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            incs.push(0.5 * (lo + hi));
        }
        increments.push(RandomVariable::new(k, incs));
    }
    let residual = residual_of(e, y, &increments)?;
    Ok(Decomposition { increments, residual })
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizationRecord {
    pub n: u32,
    pub y: AdaptedProcess,
    /// A^n increments: n * (Y_k - y^n_k)^+ * dt per time-k node.
    pub a_increments: Vec<RandomVariable>,
    /// sup-norm of Y - y^n (should be nonnegative by Lemma-type bounds).
    pub gap: f64,
    /// y^n nondecreasing versus the previous schedule entry.
    pub monotone_vs_prev: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizationTrace {
    pub schedule: Vec<u32>,
    pub records: Vec<PenalizationRecord>,
}

/// Penalized decomposition: y^n_k solves the implicit per-node relation
/// y^n_k = E_{k,k+1}[y^n_{k+1} + n (Y_k - y^n_k) dt].
pub fn doob_meyer_penalized(
    e: &Evaluation,
    y: &AdaptedProcess,
    schedule: &[u32],
) -> Result<PenalizationTrace> {
    let lat = e.lattice();
    if e.dividend().is_some() {
        return Err(GevalError::Unsupported("decompose under the unlifted operator".into()));
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(GevalError::BadParams(
            "schedule must be strictly increasing positive integers".into(),
        ));
    }
    let report = classify(e, y)?;
    if !matches!(report.class, MartingaleClass::Supermartingale | MartingaleClass::Martingale) {
        return Err(GevalError::NotSupermartingale(report.super_defect));
    }
    let n_steps = lat.steps();
    let nb = lat.branch_count();
    let dt = lat.dt();
    let mut records: Vec<PenalizationRecord> = Vec::new();
    for &pen in schedule {
        let npen = pen as f64;
        let mut layers = vec![RandomVariable::new(0, vec![]); n_steps + 1];
        layers[n_steps] = y.at(n_steps).clone();
        let mut a_incs = vec![RandomVariable::new(0, vec![]); n_steps];
        for k in (0..n_steps).rev() {
            let next = &layers[k + 1].values;
            let mut slice = Vec::with_capacity(lat.nodes_at(k));
            let mut incs = Vec::with_capacity(lat.nodes_at(k));
            for node in 0..lat.nodes_at(k) {
                let base: Vec<f64> = (0..nb).map(|b| next[lat.child(node, b)]).collect();
                let yk = y.at(k).values[node];
                let psi = |v: f64| -> Result<f64> {
                    let shifted: Vec<f64> =
                        base.iter().map(|u| u + npen * (yk - v) * dt).collect();
                    Ok(e.one_step_node(k, node, &shifted)? - v)
                };
                // psi is decreasing; psi(yk) <= 0 for supermartingales, so
                // the root sits at or below yk
                let mut hi = yk;
                if psi(hi)? > 0.0 {
                    // tiny numerical excess: expand upward
                    let mut tries = 0;
                    while psi(hi)? > 0.0 {
                        hi += 1.0;
                        tries += 1;
                        if tries > 60 {
                            return Err(GevalError::NoConvergence(
                                "penalized upper bracket".into(),
                            ));
                        }
                    }
                }
                let mut lo = hi - 1.0;
                let mut width = 1.0;
                let mut tries = 0;
                while psi(lo)? < 0.0 {
                    width *= 2.0;
                    lo = hi - width;
                    tries += 1;
                    if tries > 60 {
                        return Err(GevalError::NoConvergence(
                            "penalized lower bracket".into(),
                        ));
                    }
                }
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if psi(mid)? < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let v = 0.5 * (lo + hi);
                slice.push(v);
                incs.push(npen * (yk - v).max(0.0) * dt);
            }
            layers[k] = RandomVariable::new(k, slice);
            a_incs[k] = RandomVariable::new(k, incs);
        }
        let yn = AdaptedProcess(layers);
        let mut gap = 0.0f64;
        for k in 0..=n_steps {
            for (node, v) in yn.at(k).values.iter().enumerate() {
                gap = gap.max(y.at(k).values[node] - v);
            }
        }
        let monotone_vs_prev = records.last().map_or(true, |prev| {
            (0..=n_steps).all(|k| {
                yn.at(k)
                    .values
                    .iter()
                    .zip(&prev.y.at(k).values)
                    .all(|(now, before)| *now >= before - SLACK)
            })
        });
        records.push(PenalizationRecord {
            n: pen,
            y: yn,
            a_increments: a_incs,
            gap,
            monotone_vs_prev,
        });
    }
    Ok(PenalizationTrace { schedule: schedule.to_vec(), records })
}

/// The (g, z) pair extracted from an evaluation along Y_s = E_{s,t}[X; K].
#[derive(Debug, Clone)]
pub struct RepresentationPair {
    pub y_proc: AdaptedProcess,
    /// g at step k per time-k node, length t.
    pub g_proc: Vec<RandomVariable>,
    pub z_proc: PredictableProcess,
    /// Worst excess of |g| over mu(|Y| + |z|).
    pub e4_5_violation: f64,
}

/// Extraction per the one-step defect: z from the martingale
/// representation of Y_{k+1} (+ K_{k+1} when lifted), g from
/// (Y_k - CE_k[Y_{k+1}] - dK_k)/dt.
pub fn extract_representation(
    e: &Evaluation,
    x: &RandomVariable,
) -> Result<RepresentationPair> {
    let lat = e.lattice();
    lat.check_rv(x)?;
    let t = x.time;
    let d = lat.dimension();
    let dt = lat.dt();
    let w = lat.branch_weight();
    let mu = e.mu.unwrap_or(0.0);
    let mut layers = vec![x.clone()];
    for k in (0..t).rev() {
        let stepped = e.one_step(k, &layers[0].values)?;
        layers.insert(0, RandomVariable::new(k, stepped));
    }
    let mut g_proc = Vec::with_capacity(t);
    let mut z_steps = Vec::with_capacity(t);
    let mut violation = 0.0f64;
    for k in 0..t {
        let next = &layers[k + 1].values;
        let mut gs = Vec::with_capacity(lat.nodes_at(k));
        let mut zs = Vec::with_capacity(lat.nodes_at(k) * d);
        for node in 0..lat.nodes_at(k) {
            let mut mean = 0.0;
            let mut z = vec![0.0; d];
            for b in 0..lat.branch_count() {
                let c = lat.child(node, b);
                let v = next[c]
                    + match e.dividend() {
                        Some(DividendStream::Cumulative(kp)) => kp.at(k + 1).values[c],
                        _ => 0.0,
                    };
                mean += v;
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += v * lat.increment(b, j);
                }
            }
            mean *= w;
            for zj in z.iter_mut() {
                *zj *= w / dt;
            }
            let dk = match e.dividend() {
                None => 0.0,
                Some(DividendStream::Cumulative(kp)) => -kp.at(k).values[node],
                Some(DividendStream::Increments(incs)) => incs[k].values[node],
            };
            // for the cumulative lift, mean already carries K_{k+1} and dk
            // subtracts K_k, so mean + dk is CE_k[Y_{k+1} + dK_k]
            let g = (layers[k].values[node] - mean - dk) / dt;
            let yk = layers[k].values[node];
            let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            violation = violation.max(g.abs() - mu * (yk.abs() + znorm));
            gs.push(g);
            zs.extend_from_slice(&z);
        }
        g_proc.push(RandomVariable::new(k, gs));
        z_steps.push(zs);
    }
    Ok(RepresentationPair {
        y_proc: AdaptedProcess(layers),
        g_proc,
        z_proc: PredictableProcess { dim: d, per_step: z_steps },
        e4_5_violation: violation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct UpcrossReport {
    pub lhs: f64,
    pub rhs: f64,
    pub max_count: usize,
    pub ok: bool,
}

/// Pathwise upcrossing counts of [a, b] on the full grid.
pub fn upcrossing_counts(lat: &Lattice, y: &AdaptedProcess, a: f64, b: f64) -> Result<Vec<usize>> {
    if !lat.is_path_tree() {
        return Err(GevalError::Unsupported("upcrossing counts need the path tree".into()));
    }
    if a >= b {
        return Err(GevalError::BadLevels { a, b });
    }
    y.check(lat)?;
    let n = lat.steps();
    let counts = (0..lat.leaf_count())
        .map(|leaf| {
            let mut armed = false;
            let mut count = 0usize;
            for k in 0..=n {
                let v = y.at(k).values[lat.ancestor(leaf, k).expect("path tree")];
                if !armed && v <= a {
                    armed = true;
                } else if armed && v >= b {
                    count += 1;
                    armed = false;
                }
            }
            count
        })
        .collect();
    Ok(counts)
}

/// The upcrossing inequality for an E^g-supermartingale Y:
/// E^{-mu}[U_a^b] <= e^{2 mu T}/(b-a) {E^mu[(Y_T - a)^-]
///   + E^mu[int e^{mu t} |g(t,0,0)| dt] + a mu T}.
pub fn upcrossing_check(
    lat: &Lattice,
    y: &AdaptedProcess,
    a: f64,
    b: f64,
    g: &Driver,
    cfg: &SolverConfig,
) -> Result<UpcrossReport> {
    let e = Evaluation::from_driver(lat, g.clone(), *cfg)?;
    let report = classify(&e, y)?;
    if !matches!(report.class, MartingaleClass::Supermartingale | MartingaleClass::Martingale) {
        return Err(GevalError::NotSupermartingale(report.super_defect));
    }
    let counts = upcrossing_counts(lat, y, a, b)?;
    let n = lat.steps();
    let dt = lat.dt();
    let mu = g.mu;
    let horizon = lat.spec().horizon;
    let pos = Driver::new("mu_abs_z", mu, true, true, move |_, _, _y, z: &[f64]| {
        mu * z.iter().map(|v| v.abs()).sum::<f64>()
    })?;
    let neg = Driver::new("neg_mu_abs_z", mu, true, true, move |_, _, _y, z: &[f64]| {
        -mu * z.iter().map(|v| v.abs()).sum::<f64>()
    })?;
    let count_claim =
        RandomVariable::new(n, counts.iter().map(|c| *c as f64).collect());
    let lhs = bsde::evaluate_at(lat, &neg, 0, &count_claim, Dividend::Zero, cfg)?.values[0];
    let shortfall = RandomVariable::new(
        n,
        y.at(n).values.iter().map(|v| (-(v - a)).max(0.0)).collect(),
    );
    let term1 = bsde::evaluate_at(lat, &pos, 0, &shortfall, Dividend::Zero, cfg)?.values[0];
    // pathwise integral of e^{mu t} |g(t,0,0)| dt
    let g0_claim = RandomVariable::new(
        n,
        (0..lat.leaf_count())
            .map(|leaf| {
                let mut acc = 0.0;
                for k in 0..n {
                    let node = lat.ancestor(leaf, k).expect("path tree");
                    acc += (mu * lat.time(k)).exp()
                        * g.eval(k, node, 0.0, &vec![0.0; lat.dimension()]).abs()
                        * dt;
                }
                acc
            })
            .collect(),
    );
    let term2 = bsde::evaluate_at(lat, &pos, 0, &g0_claim, Dividend::Zero, cfg)?.values[0];
    let rhs = (2.0 * mu * horizon).exp() / (b - a) * (term1 + term2 + a * mu * horizon);
    let max_count = counts.into_iter().max().unwrap_or(0);
    Ok(UpcrossReport { lhs, rhs, max_count, ok: lhs <= rhs + SLACK })
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingReport {
    pub class: MartingaleClass,
    /// Worst violation of the inequality direction implied by the class.
    pub worst: f64,
    pub ok: bool,
}

/// Optional-stopping check: compare E_{sigma,tau}[Y_tau] with Y_sigma in
/// the direction given by the classification.
pub fn optional_stopping_check(
    e: &Evaluation,
    y: &AdaptedProcess,
    sigma: &StoppingTime,
    tau: &StoppingTime,
) -> Result<StoppingReport> {
    let lat = e.lattice();
    let report = classify(e, y)?;
    let y_tau = stopped_value(lat, y, tau)?;
    let y_sigma = stopped_value(lat, y, sigma)?;
    let eval = e.extend_to_stopping(sigma, tau, &y_tau)?;
    let mut worst = 0.0f64;
    for (lhs, ys) in eval.values.iter().zip(&y_sigma.values) {
        let v = match report.class {
            MartingaleClass::Martingale => (lhs - ys).abs(),
            MartingaleClass::Supermartingale => lhs - ys,
            MartingaleClass::Submartingale => ys - lhs,
            MartingaleClass::None => 0.0,
        };
        worst = worst.max(v);
    }
    Ok(StoppingReport { class: report.class, worst, ok: worst <= SLACK })
}
