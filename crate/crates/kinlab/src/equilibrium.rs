//! Equilibrium structure: the Gibbs density, its position/momentum
//! factorization, the partition function and its small-temperature
//! asymptotics, and the free-energy functional.
//!
//! With the fluctuation-dissipation damping the invariant density is
//!
//! ```text
//!     f*(q, p) = exp(-beta H(q, p)) / Z ,
//! ```
//!
//! which conditions into a position marginal and a Gaussian momentum
//! kernel:
//!
//! ```text
//!     g*(q) proportional to exp(-beta V(q)) sqrt(det M(q)),
//!     h*(p | q) = (2 pi T)^{-n/2} det M(q)^{-1/2}
//!                 exp(-beta p' M(q)^{-1} p / 2),
//!     Z = (2 pi T)^{n/2} integral exp(-beta V) sqrt(det M) dq .
//! ```
//!
//! Fields are assembled in log space and normalized discretely: the
//! position marginal to unit mass on its grid, the momentum kernel to
//! unit mass on each momentum fiber. The product is then a probability
//! field to rounding accuracy, and discrete conditioning identities hold
//! without quadrature caveats.

use crate::error::{Error, Result};
use crate::grid::{DensityField, MarginalField, PhaseGrid, QAxis};
use crate::model::{Axis, ModelSpec, TWO_PI};
use crate::quadrature;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Partition function with the record of its adaptive evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PartitionFunction {
    pub z: f64,
    pub log_z: f64,
    /// Quadrature nodes used at the accepted refinement level.
    pub nodes: usize,
    /// Relative change at the last refinement, an error proxy.
    pub rel_change: f64,
}

/// Gibbs density on a grid together with its conditioning factors and
/// their logarithms (the logs are exact partners of the fields: each
/// field is the exponential of its log entry).
#[derive(Clone, Debug)]
pub struct Equilibrium {
    grid: Arc<PhaseGrid>,
    pub f: DensityField,
    pub g: MarginalField,
    pub h: DensityField,
    pub log_f: DMatrix<f64>,
    pub log_g: DVector<f64>,
    pub log_h: DMatrix<f64>,
    /// Continuum partition function from adaptive quadrature (not the
    /// grid normalizer).
    pub partition: PartitionFunction,
    /// Mass matrix sampled on the grid's position nodes.
    pub mass_on_grid: DVector<f64>,
}

/// Laplace (small-temperature) approximation of the partition function
/// around the potential minimizer.
#[derive(Clone, Copy, Debug)]
pub struct LaplaceApproximation {
    pub q_star: f64,
    pub v_min: f64,
    /// Curvature V'' at the minimizer.
    pub curvature: f64,
    pub z_asymptotic: f64,
    pub z: f64,
    /// z / z_asymptotic; approaches 1 from above as beta grows for the
    /// models handled here.
    pub ratio: f64,
}

fn require_dim1(model: &ModelSpec, what: &str) -> Result<()> {
    if model.dim() != 1 {
        return Err(Error::config(format!("{what} requires a one-dimensional model")));
    }
    Ok(())
}

/// Integrand weight of the position factor, exp(-beta V) sqrt(M).
pub(crate) fn position_weight_log(model: &ModelSpec, q: f64) -> f64 {
    -model.beta() * model.potential(&[q]) + 0.5 * model.mass_matrix(&[q])[(0, 0)].ln()
}

/// Adaptive partition function for one-dimensional models:
/// Z = sqrt(2 pi T) * integral exp(-beta V) sqrt(M) dq, refined until the
/// relative change drops below 1e-9 (or the node budget is exhausted).
pub fn partition_function(model: &ModelSpec) -> Result<PartitionFunction> {
    require_dim1(model, "partition function quadrature")?;
    let (periodic, lo, hi) = match model.space().axes[0] {
        Axis::Circle => (true, 0.0, TWO_PI),
        Axis::Line { lo, hi } => (false, lo, hi),
    };

    // Work with the weight scaled by its maximum so the quadrature stays
    // in a safe floating range even for large beta.
    let mut n = 512usize;
    let coarse_max = (0..n)
        .map(|i| position_weight_log(model, lo + (hi - lo) * (i as f64 + 0.5) / n as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    if !coarse_max.is_finite() {
        return Err(Error::numerical("position weight is not finite on the domain"));
    }

    let eval = |n: usize| -> f64 {
        if periodic {
            let h = (hi - lo) / n as f64;
            let vals: Vec<f64> = (0..n)
                .map(|i| (position_weight_log(model, lo + i as f64 * h) - coarse_max).exp())
                .collect();
            quadrature::periodic_sum(&vals, h)
        } else {
            let h = (hi - lo) / (n - 1) as f64;
            let vals: Vec<f64> = (0..n)
                .map(|i| (position_weight_log(model, lo + i as f64 * h) - coarse_max).exp())
                .collect();
            quadrature::simpson(&vals, h)
        }
    };

    let mut prev = eval(n);
    let mut rel_change = f64::INFINITY;
    while n < (1 << 17) {
        n *= 2;
        let next = eval(n);
        rel_change = ((next - prev) / next).abs();
        prev = next;
        if rel_change < 1e-9 {
            break;
        }
    }

    let temp = model.temperature();
    let log_z = 0.5 * (TWO_PI * temp).ln() + coarse_max + prev.ln();
    Ok(PartitionFunction { z: log_z.exp(), log_z, nodes: n, rel_change })
}

/// Builds the Gibbs equilibrium on a grid. Requires the model to use the
/// fluctuation-dissipation damping (otherwise the Gibbs density is not
/// invariant and downstream diagnostics would silently compare against
/// the wrong reference).
pub fn build_equilibrium(model: &ModelSpec, grid: &Arc<PhaseGrid>) -> Result<Equilibrium> {
    require_dim1(model, "grid equilibrium")?;
    let probe = grid.q(grid.nq() / 2);
    if model.einstein_residual(&[probe]) > 1e-12 {
        return Err(Error::config(
            "equilibrium construction needs fluctuation-dissipation damping",
        ));
    }
    match (grid.q_kind(), &model.space().axes[0]) {
        (QAxis::Periodic, Axis::Circle) => {}
        (QAxis::Line, Axis::Line { .. }) => {}
        _ => return Err(Error::config("grid topology does not match the model's space")),
    }

    let nq = grid.nq();
    let np = grid.np();
    let beta = model.beta();
    let temp = model.temperature();

    let mass_on_grid = DVector::from_fn(nq, |i, _| model.mass_matrix(&[grid.q(i)])[(0, 0)]);

    // Position factor, normalized on the grid in log space.
    let mut log_g = DVector::from_fn(nq, |i, _| position_weight_log(model, grid.q(i)));
    let g_max = log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let g_mass: f64 = log_g.iter().map(|l| (l - g_max).exp()).sum::<f64>() * grid.dq();
    let log_norm = g_max + g_mass.ln();
    for l in log_g.iter_mut() {
        *l -= log_norm;
    }

    // Momentum kernel, normalized per fiber in log space. The analytic
    // normalizer already makes each row close to unit mass; the discrete
    // correction removes the truncation and quadrature remainder so the
    // conditioning identities hold exactly on the grid.
    let mut log_h = DMatrix::zeros(nq, np);
    for i in 0..nq {
        let m = mass_on_grid[i];
        let base = -0.5 * (TWO_PI * temp * m).ln();
        for j in 0..np {
            let p = grid.p(j);
            log_h[(i, j)] = base - 0.5 * beta * p * p / m;
        }
        let row_max = (0..np).map(|j| log_h[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let row_mass: f64 =
            (0..np).map(|j| (log_h[(i, j)] - row_max).exp()).sum::<f64>() * grid.dp();
        // After subtracting ln of the discrete fiber mass, each fiber
        // integrates to one up to rounding.
        let corr = row_max + row_mass.ln();
        for j in 0..np {
            log_h[(i, j)] -= corr;
        }
    }

    let log_f = DMatrix::from_fn(nq, np, |i, j| log_g[i] + log_h[(i, j)]);

    let g = MarginalField::from_data(grid.clone(), DVector::from_fn(nq, |i, _| log_g[i].exp()));
    let h = DensityField::from_data(
        grid.clone(),
        DMatrix::from_fn(nq, np, |i, j| log_h[(i, j)].exp()),
    );
    let f = DensityField::from_data(
        grid.clone(),
        DMatrix::from_fn(nq, np, |i, j| log_f[(i, j)].exp()),
    );

    let partition = partition_function(model)?;

    Ok(Equilibrium {
        grid: grid.clone(),
        f,
        g,
        h,
        log_f,
        log_g,
        log_h,
        partition,
        mass_on_grid,
    })
}

impl Equilibrium {
    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    /// Equilibrium conditional momentum variance at position node i,
    /// namely M(q_i) T.
    pub fn conditional_variance(&self, i: usize, temp: f64) -> f64 {
        self.mass_on_grid[i] * temp
    }
}

/// Equilibrium conditional momentum moments at a position: mean zero,
/// variance M(q) T.
pub fn conditional_equilibrium_moments(model: &ModelSpec, q: f64) -> Result<(f64, f64)> {
    require_dim1(model, "conditional moments")?;
    Ok((0.0, model.mass_matrix(&[q])[(0, 0)] * model.temperature()))
}

/// Free energy of a density field, integral of f (H + T ln f) with the
/// convention 0 ln 0 = 0. Minimized by the Gibbs density, where it equals
/// -T ln Z.
pub fn free_energy(field: &DensityField, model: &ModelSpec) -> Result<f64> {
    require_dim1(model, "free energy")?;
    let grid = field.grid().clone();
    let temp = model.temperature();
    let mut acc = 0.0;
    for i in 0..grid.nq() {
        let q = grid.q(i);
        let v = model.potential(&[q]);
        let m = model.mass_matrix(&[q])[(0, 0)];
        for j in 0..grid.np() {
            let p = grid.p(j);
            let fval = field.data[(i, j)];
            if fval > 0.0 {
                let energy = v + 0.5 * p * p / m;
                acc += fval * (energy + temp * fval.ln());
            } else if fval < 0.0 {
                return Err(Error::numerical("free energy of a field with negative values"));
            }
        }
    }
    Ok(acc * grid.cell_weight())
}

/// Locates the potential minimizer by coarse scan plus Newton polish and
/// forms the small-temperature partition asymptotics
/// Z_asy = (2 pi T) exp(-beta V(q*)) sqrt(M(q*) / V''(q*)).
pub fn laplace_partition(model: &ModelSpec) -> Result<LaplaceApproximation> {
    require_dim1(model, "partition asymptotics")?;
    let (lo, hi, periodic) = match model.space().axes[0] {
        Axis::Circle => (0.0, TWO_PI, true),
        Axis::Line { lo, hi } => (lo, hi, false),
    };

    // Coarse scan of V.
    let scan = 1024;
    let mut best_q = lo;
    let mut best_v = f64::INFINITY;
    for i in 0..scan {
        let q = lo + (hi - lo) * (i as f64 + 0.5) / scan as f64;
        let v = model.potential(&[q]);
        if v < best_v {
            best_v = v;
            best_q = q;
        }
    }

    // Newton polish on V'.
    let mut q = best_q;
    for _ in 0..60 {
        let dv = model.grad_potential(&[q])[0];
        let ddv = model.hess_potential(&[q])[(0, 0)];
        if !ddv.is_finite() || ddv <= 0.0 {
            break;
        }
        let step = dv / ddv;
        q -= step;
        if periodic {
            q = q.rem_euclid(TWO_PI);
        } else {
            q = q.clamp(lo, hi);
        }
        if step.abs() < 1e-14 * (1.0 + q.abs()) {
            break;
        }
    }

    let v_min = model.potential(&[q]);
    let curvature = model.hess_potential(&[q])[(0, 0)];
    if !curvature.is_finite() || curvature <= 0.0 {
        return Err(Error::numerical(format!(
            "potential minimizer at q = {q} has nonpositive curvature {curvature}"
        )));
    }
    let mass = model.mass_matrix(&[q])[(0, 0)];
    let temp = model.temperature();
    let z_asymptotic =
        TWO_PI * temp * (-model.beta() * v_min).exp() * (mass / curvature).sqrt();
    let z = partition_function(model)?.z;
    Ok(LaplaceApproximation { q_star: q, v_min, curvature, z_asymptotic, z, ratio: z / z_asymptotic })
}

/// Maximizers of the position marginal g*, i.e. minimizers of the
/// effective potential U = V - (T/2) ln det M. All global minimizers are
/// returned (sorted), so symmetric double wells report both wells.
pub fn position_pdf_maxima(model: &ModelSpec) -> Result<Vec<f64>> {
    require_dim1(model, "position density maxima")?;
    let (lo, hi, periodic) = match model.space().axes[0] {
        Axis::Circle => (0.0, TWO_PI, true),
        Axis::Line { lo, hi } => (lo, hi, false),
    };
    let temp = model.temperature();
    let u = |q: f64| {
        model.potential(&[q]) - 0.5 * temp * model.mass_matrix(&[q])[(0, 0)].ln()
    };
    let du = |q: f64| {
        let m = model.mass_matrix(&[q])[(0, 0)];
        let dm = model.mass_partial(&[q], 0)[(0, 0)];
        model.grad_potential(&[q])[0] - 0.5 * temp * dm / m
    };

    let scan = 2048usize;
    let h = (hi - lo) / scan as f64;
    let qs: Vec<f64> = (0..scan).map(|i| lo + (i as f64 + 0.5) * h).collect();
    let us: Vec<f64> = qs.iter().map(|&q| u(q)).collect();

    let mut candidates = Vec::new();
    for i in 0..scan {
        let (prev, next) = if periodic {
            (us[(i + scan - 1) % scan], us[(i + 1) % scan])
        } else {
            if i == 0 || i == scan - 1 {
                continue;
            }
            (us[i - 1], us[i + 1])
        };
        if us[i] <= prev && us[i] <= next {
            // Parabolic vertex through the three nodes, then a short
            // Newton run on dU with a finite-difference slope.
            let denom = prev - 2.0 * us[i] + next;
            let mut q = if denom.abs() > 1e-300 {
                qs[i] + 0.5 * h * (prev - next) / denom
            } else {
                qs[i]
            };
            for _ in 0..30 {
                let g = du(q);
                let fd = 1e-6 * (1.0 + q.abs());
                let gp = (du(q + fd) - du(q - fd)) / (2.0 * fd);
                if !gp.is_finite() || gp.abs() <= 1e-300 {
                    break;
                }
                let step = g / gp;
                q -= step;
                if periodic {
                    q = q.rem_euclid(TWO_PI);
                } else {
                    q = q.clamp(lo, hi);
                }
                if step.abs() < 1e-13 * (1.0 + q.abs()) {
                    break;
                }
            }
            candidates.push(q);
        }
    }

    // Deduplicate and keep the global minimizer set.
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup_by(|a, b| {
        let sep = (*a - *b).abs();
        let wrapped = if periodic { sep.min(TWO_PI - sep) } else { sep };
        wrapped < 1e-6 * (hi - lo)
    });
    if candidates.is_empty() {
        return Err(Error::numerical("no interior maximizer of the position density"));
    }
    let u_min = candidates.iter().map(|&q| u(q)).fold(f64::INFINITY, f64::min);
    let scale = 1.0 + u_min.abs();
    let mut out: Vec<f64> = candidates
        .into_iter()
        .filter(|&q| u(q) <= u_min + 1e-9 * scale)
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}
