//! Integration of causal curves `dy/du = v(y, u)`.
//!
//! `φ_{x0,x1}(y0)` is the state at time `x1` of the trajectory that passes
//! through `y0` at time `x0`; the cause plays the role of time.

use serde::{Deserialize, Serialize};

use crate::dataset::DataPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    /// Classical RK4 with the largest uniform step not exceeding `step`.
    Rk4 { step: f64 },
    /// Dormand–Prince 5(4) with per-step error control.
    Rk45 { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig::rk45(1e-8, 1e-8)
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4 { step },
            max_steps: 100_000,
        }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk45 { rtol, atol },
            max_steps: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.method {
            Method::Rk4 { step } => step > 0.0 && step.is_finite(),
            Method::Rk45 { rtol, atol } => rtol > 0.0 && atol > 0.0 && rtol.is_finite() && atol.is_finite(),
        };
        if !ok || self.max_steps == 0 {
            return Err(Error::InvalidInput(format!("invalid integrator settings {self:?}")));
        }
        Ok(())
    }
}

fn check(y: f64, u: f64) -> Result<f64> {
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::NonFiniteState { at: u })
    }
}

/// `φ_{x0,x1}(y0)`; `x1 < x0` integrates backward.
pub fn integrate_flow<F>(v: F, y0: f64, x0: f64, x1: f64, config: &IntegratorConfig) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    config.validate()?;
    if !(y0.is_finite() && x0.is_finite() && x1.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite flow arguments ({y0}, {x0}, {x1})")));
    }
    if x0 == x1 {
        return Ok(y0);
    }
    match config.method {
        Method::Rk4 { step } => rk4(&v, y0, x0, x1, step, config.max_steps),
        Method::Rk45 { rtol, atol } => rk45(&v, y0, x0, x1, rtol, atol, config.max_steps),
    }
}

fn rk4<F: Fn(f64, f64) -> f64>(v: &F, y0: f64, x0: f64, x1: f64, step: f64, max_steps: usize) -> Result<f64> {
    let steps = ((x1 - x0).abs() / step).ceil().max(1.0);
    if steps > max_steps as f64 {
        return Err(Error::StepLimitExceeded { max_steps });
    }
    let steps = steps as usize;
    let h = (x1 - x0) / steps as f64;
    let mut y = y0;
    for i in 0..steps {
        let u = x0 + i as f64 * h;
        let k1 = v(y, u);
        let k2 = v(y + 0.5 * h * k1, u + 0.5 * h);
        let k3 = v(y + 0.5 * h * k2, u + 0.5 * h);
        let k4 = v(y + h * k3, u + h);
        y = check(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), u + h)?;
    }
    Ok(y)
}

// Dormand–Prince tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rk45<F: Fn(f64, f64) -> f64>(
    v: &F,
    y0: f64,
    x0: f64,
    x1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<f64> {
    let span = x1 - x0;
    let dir = span.signum();
    let mut u = x0;
    let mut y = y0;
    let mut k = [0.0; 7];
    k[0] = check(v(y, u), u)?;

    // initial step from the local derivative scale
    let scale0 = atol + rtol * y.abs();
    let d0 = y.abs() / scale0;
    let d1 = k[0].abs() / scale0;
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span.abs());

    let mut attempts = 0;
    while (x1 - u) * dir > 0.0 {
        attempts += 1;
        if attempts > max_steps {
            return Err(Error::StepLimitExceeded { max_steps });
        }
        let last = h >= (x1 - u).abs();
        let hs = if last { x1 - u } else { dir * h };
        for s in 1..7 {
            let mut acc = y;
            for (j, a) in A[s][..s].iter().enumerate() {
                acc += hs * a * k[j];
            }
            k[s] = v(acc, u + C[s] * hs);
        }
        let y_new: f64 = y + hs * A[6].iter().zip(&k).map(|(a, kk)| a * kk).sum::<f64>();
        let err_abs: f64 = hs * E.iter().zip(&k).map(|(e, kk)| e * kk).sum::<f64>();
        let tol = atol + rtol * y.abs().max(y_new.abs());
        let err = if err_abs.is_finite() { err_abs.abs() / tol } else { f64::INFINITY };
        if err <= 1.0 && y_new.is_finite() {
            u = if last { x1 } else { u + hs };
            y = y_new;
            k[0] = k[6];
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = hs.abs() * grow;
        } else {
            h = hs.abs() * if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
            if h <= f64::EPSILON * u.abs().max(1.0) {
                return Err(Error::NonFiniteState { at: u });
            }
        }
    }
    Ok(y)
}

/// The causal curve through `(x0, y0)` evaluated along a sorted `grid`,
/// integrating between consecutive grid points.
pub fn causal_curve<F>(v: F, y0: f64, x0: f64, grid: &[f64], config: &IntegratorConfig) -> Result<Vec<(f64, f64)>>
where
    F: Fn(f64, f64) -> f64,
{
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidInput("curve grid must be sorted".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    let (mut u, mut y) = (x0, y0);
    for &g in grid {
        y = integrate_flow(&v, y, u, g, config)?;
        u = g;
        out.push((g, y));
    }
    Ok(out)
}

/// Noise estimates `ε̂_i = φ_{x_i, x0}(y_i)`. Every failing point is
/// reported with its index.
pub fn extract_residuals<F>(v: F, pair: &DataPair, x0: f64, config: &IntegratorConfig) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> f64,
{
    let mut out = Vec::with_capacity(pair.len());
    let mut failures = Vec::new();
    for (i, (&x, &y)) in pair.xs.iter().zip(&pair.ys).enumerate() {
        match integrate_flow(&v, y, x, x0, config) {
            Ok(e) => out.push(e),
            Err(e) => {
                failures.push((i, e));
                out.push(f64::NAN);
            }
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(Error::PointFailures(failures))
    }
}
