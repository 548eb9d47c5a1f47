//! Generator functions g(t, node, y, z): structural flags, builtin families,
//! driver transforms and the tabulated form produced by driver recovery.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GevalError, Result};
use crate::lattice::{is_stopping_time, stopped_table, AdaptedProcess, Lattice, StoppingTime};

type DriverFn = dyn Fn(usize, usize, f64, &[f64]) -> f64 + Send + Sync;

/// A BSDE generator with its declared Lipschitz constant and structural
/// claims. Drivers receive the node index, which enables path dependence;
/// the builtins ignore it.
#[derive(Clone)]
pub struct Driver {
    eval: Arc<DriverFn>,
    /// Declared Lipschitz constant of (h-type) |dg| <= mu (|dy| + |dz|).
    pub mu: f64,
    /// Claims g(., 0, 0) = 0.
    pub zero_at_origin: bool,
    /// Claims g(., y, 0) = 0 (the g-expectation case).
    pub zero_at_z0: bool,
    pub label: String,
}

impl std::fmt::Debug for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Driver")
            .field("label", &self.label)
            .field("mu", &self.mu)
            .field("zero_at_origin", &self.zero_at_origin)
            .field("zero_at_z0", &self.zero_at_z0)
            .finish()
    }
}

impl Driver {
    pub fn new<F>(label: impl Into<String>, mu: f64, zero_at_origin: bool, zero_at_z0: bool, f: F) -> Result<Self>
    where
        F: Fn(usize, usize, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(GevalError::BadParams(format!("mu = {mu}")));
        }
        if zero_at_z0 && !zero_at_origin {
            return Err(GevalError::BadParams(
                "g(., y, 0) = 0 implies g(., 0, 0) = 0".into(),
            ));
        }
        Ok(Driver {
            eval: Arc::new(f),
            mu,
            zero_at_origin,
            zero_at_z0,
            label: label.into(),
        })
    }

    #[inline]
    pub fn eval(&self, k: usize, node: usize, y: f64, z: &[f64]) -> f64 {
        (self.eval)(k, node, y, z)
    }
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn get(params: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| GevalError::BadParams(format!("missing parameter `{key}`")))
}

/// Builtin driver families.
///
/// Recognized names: `zero`, `g_mu` (mu), `neg_g_mu` (mu), `kappa_abs_z`
/// (kappa), `black_scholes` (r, theta), `linear` (a, b).
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Driver> {
    match name {
        "zero" => Driver::new("zero", 0.0, true, true, |_, _, _, _| 0.0),
        "g_mu" => {
            let mu = get(params, "mu")?;
            if mu < 0.0 {
                return Err(GevalError::BadParams(format!("mu = {mu} < 0")));
            }
            Driver::new(format!("g_mu({mu})"), mu, true, false, move |_, _, y, z| {
                mu * y.abs() + mu * norm(z)
            })
        }
        "neg_g_mu" => {
            let mu = get(params, "mu")?;
            if mu < 0.0 {
                return Err(GevalError::BadParams(format!("mu = {mu} < 0")));
            }
            Driver::new(format!("neg_g_mu({mu})"), mu, true, false, move |_, _, y, z| {
                -(mu * y.abs() + mu * norm(z))
            })
        }
        "kappa_abs_z" => {
            let kappa = get(params, "kappa")?;
            if kappa < 0.0 {
                return Err(GevalError::BadParams(format!("kappa = {kappa} < 0")));
            }
            Driver::new(format!("kappa_abs_z({kappa})"), kappa, true, true, move |_, _, _, z| {
                kappa * norm(z)
            })
        }
        "black_scholes" => {
            let r = get(params, "r")?;
            let theta = get(params, "theta")?;
            let mu = r.abs().max(theta.abs());
            let trivial = r == 0.0 && theta == 0.0;
            Driver::new(
                format!("black_scholes(r={r},theta={theta})"),
                mu,
                trivial,
                trivial,
                move |_, _, y, z| -r * y - theta * z.iter().sum::<f64>(),
            )
        }
        "linear" => {
            let a = get(params, "a")?;
            let b = get(params, "b")?;
            Driver::new(
                format!("linear(a={a},b={b})"),
                a.abs().max(b.abs()),
                a == 0.0 && b == 0.0,
                a == 0.0 && b == 0.0,
                move |_, _, y, z| a * y + b * z.iter().sum::<f64>(),
            )
        }
        other => Err(GevalError::UnknownBuiltin(other.into())),
    }
}

/// The reflected driver g*(t, y, z) = -g(t, -y, -z).
pub fn reflect(g: &Driver) -> Driver {
    let inner = g.eval.clone();
    Driver {
        eval: Arc::new(move |k, node, y, z| {
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            -inner(k, node, -y, &neg)
        }),
        mu: g.mu,
        zero_at_origin: g.zero_at_origin,
        zero_at_z0: g.zero_at_z0,
        label: format!("reflect({})", g.label),
    }
}

/// The dividend-shift transform: gbar(s, y, z) = g(s, y - K_s, z) on [0, tau],
/// zero after tau. Solving the plain BSDE with gbar on X + K_tau reproduces
/// Y + K for the dividend-carrying BSDE.
pub fn shift_by_dividend(
    lat: &Lattice,
    g: &Driver,
    k_process: &AdaptedProcess,
    tau: &StoppingTime,
) -> Result<Driver> {
    if !is_stopping_time(lat, tau) {
        return Err(GevalError::NotAStoppingTime);
    }
    k_process.check(lat)?;
    let inner = g.eval.clone();
    let kvals: Vec<Vec<f64>> = k_process.0.iter().map(|rv| rv.values.clone()).collect();
    let stopped = stopped_table(lat, tau);
    Ok(Driver {
        eval: Arc::new(move |k, node, y, z| {
            if stopped[k][node] {
                0.0
            } else {
                inner(k, node, y - kvals[k][node], z)
            }
        }),
        mu: g.mu,
        zero_at_origin: g.zero_at_origin,
        zero_at_z0: g.zero_at_z0,
        label: format!("shifted({})", g.label),
    })
}

/// One sampled difference pair for the Lipschitz diagnostic.
#[derive(Debug, Clone)]
pub struct LipschitzSample {
    pub k: usize,
    pub node: usize,
    pub y: f64,
    pub z: Vec<f64>,
    pub y2: f64,
    pub z2: Vec<f64>,
}

/// Max observed |dg| / (|dy| + |dz|) over the sample grid. Diagnostic only;
/// mu stays a declaration.
pub fn estimate_lipschitz(g: &Driver, samples: &[LipschitzSample]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for s in samples {
        let dz: Vec<f64> = s.z.iter().zip(&s.z2).map(|(a, b)| a - b).collect();
        let denom = (s.y - s.y2).abs() + norm(&dz);
        if denom == 0.0 {
            continue;
        }
        let dg = g.eval(s.k, s.node, s.y, &s.z) - g.eval(s.k, s.node, s.y2, &s.z2);
        best = best.max(dg.abs() / denom);
    }
    if best == f64::NEG_INFINITY {
        return Err(GevalError::DegenerateGrid);
    }
    Ok(best)
}

/// A driver tabulated over a (t, y, z) grid, with multilinear interpolation
/// inside the grid and clamping outside it. Clamping keeps the grid
/// Lipschitz constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabulatedDriver {
    /// Real times of the t-axis knots, strictly increasing.
    pub t_axis: Vec<f64>,
    pub y_axis: Vec<f64>,
    /// One knot list per z coordinate.
    pub z_axes: Vec<Vec<f64>>,
    /// Row-major over (t, y, z1, .., zd).
    pub values: Vec<f64>,
    /// Declared Lipschitz constant carried over from the recovery.
    pub mu: f64,
}

fn strictly_increasing(a: &[f64]) -> bool {
    !a.is_empty() && a.windows(2).all(|w| w[0] < w[1])
}

/// Clamped bracketing of `x` in `axis`: lower index and fraction.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    let last = axis.len() - 1;
    if x >= axis[last] {
        return (last - 1, 1.0);
    }
    let mut i = axis.partition_point(|v| *v <= x) - 1;
    if i >= last {
        i = last - 1;
    }
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

impl TabulatedDriver {
    pub fn validate(&self) -> Result<()> {
        for axis in std::iter::once(&self.t_axis)
            .chain(std::iter::once(&self.y_axis))
            .chain(self.z_axes.iter())
        {
            if !strictly_increasing(axis) {
                return Err(GevalError::BadParams("axis not strictly increasing".into()));
            }
        }
        let cells: usize = self.t_axis.len()
            * self.y_axis.len()
            * self.z_axes.iter().map(|a| a.len()).product::<usize>();
        if self.values.len() != cells {
            return Err(GevalError::BadParams(format!(
                "value tensor has {} entries, grid has {cells}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(GevalError::BadParams("non-finite tabulated value".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.z_axes.len()
    }

    /// Multilinear interpolation with clamped extrapolation.
    pub fn value(&self, t: f64, y: f64, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.z_axes.len());
        let mut axes: Vec<(&[f64], f64)> = Vec::with_capacity(2 + z.len());
        axes.push((&self.t_axis, t));
        axes.push((&self.y_axis, y));
        for (axis, &x) in self.z_axes.iter().zip(z) {
            axes.push((axis, x));
        }
        let loc: Vec<(usize, f64)> = axes.iter().map(|(a, x)| locate(a, *x)).collect();
        let strides: Vec<usize> = {
            let mut s = vec![1usize; axes.len()];
            for i in (0..axes.len() - 1).rev() {
                s[i] = s[i + 1] * axes[i + 1].0.len();
            }
            s
        };
        let corners = 1usize << axes.len();
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut w = 1.0;
            let mut idx = 0usize;
            for (ax, &(i, frac)) in loc.iter().enumerate() {
                let hi = (corner >> ax) & 1 == 1;
                let single = axes[ax].0.len() == 1;
                if hi {
                    if single {
                        w = 0.0;
                        break;
                    }
                    w *= frac;
                    idx += (i + 1) * strides[ax];
                } else {
                    w *= if single { 1.0 } else { 1.0 - frac };
                    idx += i * strides[ax];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    /// Wrap the table as a Driver on a lattice with step size `dt`.
    pub fn to_driver(&self, dt: f64) -> Driver {
        let table = self.clone();
        Driver {
            eval: Arc::new(move |k, _node, y, z| table.value(k as f64 * dt, y, z)),
            mu: self.mu,
            zero_at_origin: false,
            zero_at_z0: false,
            label: "tabulated".into(),
        }
    }
}
