//! Builds terminal claims from payoff expressions.

use geval_core::{Lattice, RandomVariable};

use crate::config::MarketConfig;
use crate::payoff::{LeafContext, PayoffExpr};

/// Evaluate a payoff expression at every terminal node.
pub fn terminal_claim(
    lat: &Lattice,
    expr: &PayoffExpr,
    market: &MarketConfig,
) -> Result<RandomVariable, String> {
    let n = lat.steps();
    let d = lat.dimension();
    if expr.max_brownian_coord() > d {
        return Err(format!(
            "payoff references B{} but the lattice has dimension {d}",
            expr.max_brownian_coord()
        ));
    }
    let needs_extrema = expr.uses_running_extrema();
    if needs_extrema && !lat.is_path_tree() {
        return Err("RUNMAX_S / RUNMIN_S need the path-tree topology".to_string());
    }
    let s_at = |t: f64, b1: f64| market.s0 * (market.nu * t + market.sigma * b1).exp();
    let horizon = lat.spec().horizon;
    let values = (0..lat.nodes_at(n))
        .map(|node| {
            let b: Vec<f64> = (0..d).map(|j| lat.brownian_at(n, node, j)).collect();
            let s = s_at(horizon, b[0]);
            let (runmax, runmin) = if needs_extrema {
                let mut hi = market.s0;
                let mut lo = market.s0;
                for k in 1..=n {
                    let ancestor = node >> (d * (n - k));
                    let sk = s_at(lat.time(k), lat.brownian_at(k, ancestor, 0));
                    hi = hi.max(sk);
                    lo = lo.min(sk);
                }
                (hi, lo)
            } else {
                (s, s)
            };
            expr.eval(&LeafContext { b: &b, s, runmax_s: runmax, runmin_s: runmin, horizon })
        })
        .collect();
    Ok(RandomVariable::new(n, values))
}
