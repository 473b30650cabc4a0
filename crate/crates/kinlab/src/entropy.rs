//! Relative-entropy decomposition for grid densities.
//!
//! The distance to equilibrium splits along the conditioning of momentum
//! on position: the total relative entropy equals the entropy of the
//! position marginal plus the position-averaged entropy of the
//! conditional momentum factor.  This module computes the log-ratio
//! triple behind that split, the entropy values with their L1 bounds,
//! the dissipation-rate formula, and a local polynomial analysis of
//! dissipation breaks, the instants when the conditional factor passes
//! through its invariant value and the dissipation rate touches zero.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{position_weight_log, Equilibrium};
use crate::fpke::{DtChoice, Evolution, FpkeOperator};
use crate::grid::DensityField;
use crate::linalg::polyfit;
use crate::model::ModelSpec;
use crate::{Error, Result};

/// Nodes at or below this density are treated as empty: they contribute
/// exactly zero to entropy integrals (the 0 ln 0 convention) and their
/// log ratios are reported as the position value with a zero
/// conditional part.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Logarithmic ratios of a density against the equilibrium factors:
/// total = ln(f/f*), position = ln(g/g*), conditional = ln(h/h*),
/// with total = position + conditional holding node by node.
#[derive(Clone, Debug)]
pub struct LogRatioFields {
    pub theta: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub eta: DMatrix<f64>,
    /// Position marginal of the density the ratios were taken from.
    pub marginal: DVector<f64>,
    /// Phase-space nodes at or below the density floor.
    pub floored_nodes: usize,
    pub total_nodes: usize,
}

impl LogRatioFields {
    pub fn floored_fraction(&self) -> f64 {
        self.floored_nodes as f64 / self.total_nodes as f64
    }
}

/// Entropy triple with its decomposition residual, rate formulas and
/// the L1 deviations next to their entropy bounds.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyReport {
    pub t: f64,
    /// Relative entropy of the full density against equilibrium.
    pub total: f64,
    /// Relative entropy of the position marginal.
    pub position: f64,
    /// Position-averaged relative entropy of the conditional momentum
    /// factor.
    pub conditional: f64,
    /// total - (position + conditional); rounding-level by construction.
    pub decomposition_gap: f64,
    /// -(1/2) E_f |d_p eta|_D^2, the slope of the total entropy.
    pub dissipation_rate: f64,
    /// E_g(gamma^T M^-1 d_q xi), the slope of the position entropy.
    pub position_rate: f64,
    /// Total variation distance (1/2)|f - f*|_1.
    pub total_variation: f64,
    /// sqrt(total/2); dominates the total variation.
    pub pinsker_bound: f64,
    pub position_l1: f64,
    /// sqrt(2 position); dominates the marginal L1 deviation.
    pub position_l1_bound: f64,
    /// L1 distance between the momentum marginal and the marginal the
    /// momentum would have with the conditional factor at equilibrium.
    pub momentum_l1: f64,
    /// sqrt(2 conditional); dominates the momentum L1 deviation.
    pub momentum_l1_bound: f64,
    pub floored_fraction: f64,
}

/// First and second time derivatives of the position entropy along the
/// grid evolution, with the second derivative's two terms kept apart.
#[derive(Clone, Debug, Serialize)]
pub struct PositionEntropyDerivatives {
    pub gdot: f64,
    pub gddot: f64,
    /// E_f(d_q xi^T M^-1 P d_t eta), the conditional-rate term.
    pub gddot_rate_term: f64,
    /// -E_g(gamma^T M^-1 d_q((1/g*) div_q(g* M^-1 gamma))), the
    /// transport term; vanishes with gamma.
    pub gddot_transport_term: f64,
    pub floored_fraction: f64,
}

/// Smooth reshapings of the invariant position factor used to set up
/// dissipation-break states f0 = g0 h*.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionTilt {
    /// g0 proportional to g* (1 + a cos(mode q)); circle topology only.
    Cosine { mode: usize, amplitude: f64 },
    /// g0 proportional to g* (1 + a exp(-(q-center)^2 / (2 width^2))),
    /// with the distance wrapped on circles.
    GaussianBump { center: f64, width: f64, amplitude: f64 },
    /// g0(q) = g*(q - offset), rebuilt from the invariant weight.
    Shift { offset: f64 },
}

impl PositionTilt {
    /// Feasibility of the tilt for a model: positivity margin of the
    /// multiplicative factors and topology of the position space.
    pub(crate) fn validate(&self, model: &ModelSpec) -> Result<()> {
        let periodic = matches!(model.space().axes[0], crate::model::Axis::Circle);
        match *self {
            PositionTilt::Cosine { amplitude, .. } => {
                if !periodic {
                    return Err(Error::config("cosine tilts need a periodic position axis"));
                }
                if amplitude.abs() > 0.5 {
                    return Err(Error::config(
                        "tilt amplitude beyond 0.5 loses the positivity margin",
                    ));
                }
            }
            PositionTilt::GaussianBump { width, amplitude, .. } => {
                if !width.is_finite() || width <= 0.0 {
                    return Err(Error::config("bump width must be positive"));
                }
                if amplitude.abs() > 0.5 {
                    return Err(Error::config(
                        "tilt amplitude beyond 0.5 loses the positivity margin",
                    ));
                }
            }
            PositionTilt::Shift { .. } => {}
        }
        Ok(())
    }

    /// Unnormalized log weight of the tilted position density at a point,
    /// the continuum counterpart of [`build_break_initial_condition`].
    pub(crate) fn weight_log(&self, model: &ModelSpec, q: f64) -> f64 {
        let periodic = matches!(model.space().axes[0], crate::model::Axis::Circle);
        match *self {
            PositionTilt::Cosine { mode, amplitude } => {
                position_weight_log(model, q) + (1.0 + amplitude * (mode as f64 * q).cos()).ln()
            }
            PositionTilt::GaussianBump { center, width, amplitude } => {
                let mut d = q - center;
                if periodic {
                    d -= crate::model::TWO_PI * (d / crate::model::TWO_PI).round();
                }
                position_weight_log(model, q)
                    + (1.0 + amplitude * (-d * d / (2.0 * width * width)).exp()).ln()
            }
            PositionTilt::Shift { offset } => position_weight_log(model, q - offset),
        }
    }
}

/// One verified identity in a break report.
#[derive(Clone, Debug, Serialize)]
pub struct BreakCheck {
    pub name: &'static str,
    pub measured: f64,
    pub reference: f64,
    /// |measured - reference| over the check's natural scale.
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Local polynomial picture of the entropies around a dissipation
/// break, fitted values next to the predictions from the position log
/// ratio alone.
#[derive(Clone, Debug, Serialize)]
pub struct BreakAnalysis {
    pub tilt: PositionTilt,
    pub window: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub total_series: Vec<f64>,
    pub position_series: Vec<f64>,
    pub conditional_series: Vec<f64>,
    /// Ascending cubic coefficients fitted to each entropy series.
    pub total_fit: Vec<f64>,
    pub position_fit: Vec<f64>,
    pub conditional_fit: Vec<f64>,
    pub total_r2: f64,
    pub position_r2: f64,
    pub conditional_r2: f64,
    /// -E(|M^-1 d_q xi|_D^2): the predicted third derivative of the
    /// total entropy at the break.
    pub total_dddot_predicted: f64,
    /// T E(|d_q xi|^2_{M^-1}): the predicted second derivative of the
    /// conditional entropy at the break; the position entropy is
    /// predicted to curve by the negative of this.
    pub conditional_ddot_predicted: f64,
    pub checks: Vec<BreakCheck>,
    pub all_pass: bool,
}

/// Monotonicity audit of the total entropy along one evolution, with
/// flat stretches exhibited next to the conditional entropy and the
/// waterbed sign check on the component increments.
#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    pub times: Vec<f64>,
    pub total_series: Vec<f64>,
    pub position_series: Vec<f64>,
    pub conditional_series: Vec<f64>,
    /// Largest signed increment of the total entropy between adjacent
    /// snapshots; nonpositive up to quadrature noise.
    pub max_increase: f64,
    /// Snapshot indices where |delta total| < 1e-8, paired with the
    /// conditional entropy there.
    pub flat_segments: Vec<(usize, f64)>,
    /// Largest over intervals of min(delta position, delta
    /// conditional); a positive value would mean both components rose
    /// across one interval.
    pub waterbed_excess: f64,
}

fn require_matching_grid(f: &DensityField, eq: &Equilibrium) -> Result<()> {
    let a = f.grid();
    let b = eq.grid();
    let same = Arc::ptr_eq(a, b)
        || (a.nq() == b.nq()
            && a.np() == b.np()
            && a.is_periodic() == b.is_periodic()
            && a.q_bounds() == b.q_bounds()
            && a.p_max() == b.p_max());
    if same {
        Ok(())
    } else {
        Err(Error::config("density and equilibrium live on different grids"))
    }
}

/// Log ratios of a density against the equilibrium factors, with the
/// conditional part taken through the grid marginal so the three ratios
/// cancel exactly where the density is resolved.
pub fn log_ratio_fields(f: &DensityField, eq: &Equilibrium) -> Result<LogRatioFields> {
    require_matching_grid(f, eq)?;
    let grid = f.grid();
    let (nq, np) = (grid.nq(), grid.np());
    let marginal = f.marginalize_position().data;
    let mut theta = DMatrix::zeros(nq, np);
    let mut eta = DMatrix::zeros(nq, np);
    let mut xi = DVector::zeros(nq);
    let mut floored = 0usize;
    for i in 0..nq {
        let g_i = marginal[i];
        let row_ok = g_i > DENSITY_FLOOR;
        if row_ok {
            xi[i] = g_i.ln() - eq.log_g[i];
        }
        for j in 0..np {
            let v = f.data[(i, j)];
            if row_ok && v > DENSITY_FLOOR {
                let ln_f = v.ln();
                theta[(i, j)] = ln_f - eq.log_f[(i, j)];
                eta[(i, j)] = (ln_f - g_i.ln()) - eq.log_h[(i, j)];
            } else {
                floored += 1;
                theta[(i, j)] = xi[i];
            }
        }
    }
    Ok(LogRatioFields { theta, xi, eta, marginal, floored_nodes: floored, total_nodes: nq * np })
}

/// Entropy triple by grid quadrature over the unfloored nodes.
fn entropy_sums(f: &DensityField, fields: &LogRatioFields) -> (f64, f64, f64) {
    let grid = f.grid();
    let w = grid.cell_weight();
    let dq = grid.dq();
    let mut total = 0.0;
    let mut conditional = 0.0;
    for i in 0..grid.nq() {
        if fields.marginal[i] <= DENSITY_FLOOR {
            continue;
        }
        for j in 0..grid.np() {
            let v = f.data[(i, j)];
            if v > DENSITY_FLOOR {
                total += v * fields.theta[(i, j)] * w;
                conditional += v * fields.eta[(i, j)] * w;
            }
        }
    }
    let mut position = 0.0;
    for i in 0..grid.nq() {
        let g = fields.marginal[i];
        if g > DENSITY_FLOOR {
            position += g * fields.xi[i] * dq;
        }
    }
    (total, position, conditional)
}

fn dissipation_from(f: &DensityField, fields: &LogRatioFields, model: &ModelSpec) -> f64 {
    let grid = f.grid();
    let dpeta = grid.deriv_p(&fields.eta);
    let w = grid.cell_weight();
    let mut sum = 0.0;
    for i in 0..grid.nq() {
        let d = model.diffusion_matrix(&[grid.q(i)])[(0, 0)];
        for j in 0..grid.np() {
            let v = f.data[(i, j)];
            if v > DENSITY_FLOOR {
                let s = dpeta[(i, j)];
                sum += v * d * s * s * w;
            }
        }
    }
    -0.5 * sum
}

fn position_rate_from(f: &DensityField, fields: &LogRatioFields, model: &ModelSpec) -> f64 {
    let grid = f.grid();
    let moment1 = f.momentum_moment(1);
    let dxi = grid.deriv_q_vec(&fields.xi);
    let mut rate = 0.0;
    for i in 0..grid.nq() {
        let m_inv = 1.0 / model.mass_matrix(&[grid.q(i)])[(0, 0)];
        // g gamma^T M^-1 d_q xi = moment1 M^-1 d_q xi.
        rate += moment1.data[i] * m_inv * dxi[i] * grid.dq();
    }
    rate
}

/// Slope of the total entropy, -(1/2) E_f |d_p eta|_D^2; nonpositive,
/// and zero exactly when the conditional factor is at equilibrium.
pub fn dissipation_rate(f: &DensityField, eq: &Equilibrium, model: &ModelSpec) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::config("entropy diagnostics require a one-dimensional model"));
    }
    let fields = log_ratio_fields(f, eq)?;
    Ok(dissipation_from(f, &fields, model))
}

/// Entropy triple with decomposition residual, rate formulas, total
/// variation and the three L1 deviation bounds.
pub fn entropies(t: f64, f: &DensityField, eq: &Equilibrium, model: &ModelSpec) -> Result<EntropyReport> {
    if model.dim() != 1 {
        return Err(Error::config("entropy diagnostics require a one-dimensional model"));
    }
    let fields = log_ratio_fields(f, eq)?;
    let (total, position, conditional) = entropy_sums(f, &fields);
    for (name, value) in [("total", total), ("position", position), ("conditional", conditional)] {
        if value < -1e-10 {
            return Err(Error::numerical(format!(
                "{name} entropy {value:.3e} is negative beyond quadrature tolerance; \
                 the density is not a normalized probability on this grid"
            )));
        }
    }
    let decomposition_gap = total - (position + conditional);
    if decomposition_gap.abs() > 1e-9 {
        return Err(Error::invariant(format!(
            "entropy decomposition residual {decomposition_gap:.3e} exceeds 1e-9"
        )));
    }

    let grid = f.grid();
    let dq = grid.dq();
    let total_variation = 0.5 * f.l1_distance(&eq.f);
    let mut position_l1 = 0.0;
    for i in 0..grid.nq() {
        position_l1 += (fields.marginal[i] - eq.g.data[i]).abs() * dq;
    }
    // Momentum marginal of f against the one it would have with the
    // conditional factor at equilibrium.
    let rho = f.momentum_marginal();
    let mut momentum_l1 = 0.0;
    for j in 0..grid.np() {
        let mut rho_hat = 0.0;
        for i in 0..grid.nq() {
            rho_hat += fields.marginal[i] * eq.h.data[(i, j)] * dq;
        }
        momentum_l1 += (rho[j] - rho_hat).abs() * grid.dp();
    }

    Ok(EntropyReport {
        t,
        total,
        position,
        conditional,
        decomposition_gap,
        dissipation_rate: dissipation_from(f, &fields, model),
        position_rate: position_rate_from(f, &fields, model),
        total_variation,
        pinsker_bound: (total.max(0.0) / 2.0).sqrt(),
        position_l1,
        position_l1_bound: (2.0 * position.max(0.0)).sqrt(),
        momentum_l1,
        momentum_l1_bound: (2.0 * conditional.max(0.0)).sqrt(),
        floored_fraction: fields.floored_fraction(),
    })
}

/// First and second time derivatives of the position entropy, the
/// second split into its conditional-rate and transport terms.  The
/// conditional log-ratio rate is taken from the evolution right-hand
/// side, d_t eta = (d_t f)/f - (d_t g)/g, so its accuracy inherits the
/// transport discretization's order.
pub fn position_entropy_derivatives(
    f: &DensityField,
    eq: &Equilibrium,
    model: &ModelSpec,
) -> Result<PositionEntropyDerivatives> {
    let fields = log_ratio_fields(f, eq)?;
    let op = FpkeOperator::new(model, f.grid())?;
    let grid = f.grid().clone();
    let (nq, np) = (grid.nq(), grid.np());
    let gdot = position_rate_from(f, &fields, model);

    let m_inv: Vec<f64> = (0..nq).map(|i| 1.0 / model.mass_matrix(&[grid.q(i)])[(0, 0)]).collect();
    let af = op.apply_adjoint(&f.data);
    let marginal_rate = op.marginal_rhs(f);
    let dxi = grid.deriv_q_vec(&fields.xi);
    let w = grid.cell_weight();
    let mut rate_term = 0.0;
    for i in 0..nq {
        let g = fields.marginal[i];
        if g <= DENSITY_FLOOR {
            continue;
        }
        let gr = marginal_rate[i] / g;
        for j in 0..np {
            let v = f.data[(i, j)];
            if v > DENSITY_FLOOR {
                let eta_rate = af[(i, j)] / v - gr;
                rate_term += v * dxi[i] * m_inv[i] * grid.p(j) * eta_rate * w;
            }
        }
    }

    // Transport term: the composite keeps g* inside the divergence, so
    // the division by g* never meets a bare tail value.
    let moment1 = f.momentum_moment(1);
    let mut gamma = DVector::zeros(nq);
    let mut u = DVector::zeros(nq);
    for i in 0..nq {
        let g = fields.marginal[i];
        gamma[i] = if g > DENSITY_FLOOR { moment1.data[i] / g } else { 0.0 };
        u[i] = eq.g.data[i] * m_inv[i] * gamma[i];
    }
    let div_u = grid.deriv_q_vec(&u);
    let v_comp = DVector::from_fn(nq, |i, _| div_u[i] / eq.g.data[i]);
    let dv_comp = grid.deriv_q_vec(&v_comp);
    let mut transport_term = 0.0;
    for i in 0..nq {
        transport_term -= fields.marginal[i] * gamma[i] * m_inv[i] * dv_comp[i] * grid.dq();
    }

    Ok(PositionEntropyDerivatives {
        gdot,
        gddot: rate_term + transport_term,
        gddot_rate_term: rate_term,
        gddot_transport_term: transport_term,
        floored_fraction: fields.floored_fraction(),
    })
}

/// Break state f0 = g0 h*: the conditional factor sits at equilibrium
/// while the position marginal is tilted away from g*.
pub fn build_break_initial_condition(
    model: &ModelSpec,
    eq: &Equilibrium,
    tilt: &PositionTilt,
) -> Result<DensityField> {
    if model.dim() != 1 {
        return Err(Error::config("break construction requires a one-dimensional model"));
    }
    let grid = eq.grid().clone();
    let nq = grid.nq();
    let mut g0 = DVector::zeros(nq);
    match *tilt {
        PositionTilt::Cosine { mode, amplitude } => {
            if !grid.is_periodic() {
                return Err(Error::config("cosine tilts need a periodic position axis"));
            }
            if amplitude.abs() > 0.5 {
                return Err(Error::config("tilt amplitude beyond 0.5 loses the positivity margin"));
            }
            for i in 0..nq {
                g0[i] = eq.g.data[i] * (1.0 + amplitude * (mode as f64 * grid.q(i)).cos());
            }
        }
        PositionTilt::GaussianBump { center, width, amplitude } => {
            if !width.is_finite() || width <= 0.0 {
                return Err(Error::config("bump width must be positive"));
            }
            if amplitude.abs() > 0.5 {
                return Err(Error::config("tilt amplitude beyond 0.5 loses the positivity margin"));
            }
            let (lo, hi) = grid.q_bounds();
            let span = hi - lo;
            for i in 0..nq {
                let mut d = grid.q(i) - center;
                if grid.is_periodic() {
                    d -= span * (d / span).round();
                }
                g0[i] = eq.g.data[i] * (1.0 + amplitude * (-d * d / (2.0 * width * width)).exp());
            }
        }
        PositionTilt::Shift { offset } => {
            let logs =
                DVector::from_fn(nq, |i, _| position_weight_log(model, grid.q(i) - offset));
            let top = logs.max();
            for i in 0..nq {
                g0[i] = (logs[i] - top).exp();
            }
        }
    }
    if g0.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::config("tilt produced a non-positive position density"));
    }
    let mass: f64 = g0.sum() * grid.dq();
    g0 /= mass;
    let data = DMatrix::from_fn(nq, grid.np(), |i, j| g0[i] * eq.h.data[(i, j)]);
    Ok(DensityField::from_data(grid, data))
}

/// Near-equilibrium state with the position factor invariant and the
/// conditional momentum factor shifted by a constant mean offset; the
/// canonical state with zero position entropy and positive conditional
/// entropy.
pub fn shifted_momentum_state(model: &ModelSpec, eq: &Equilibrium, shift: f64) -> Result<DensityField> {
    if model.dim() != 1 {
        return Err(Error::config("momentum shifts require a one-dimensional model"));
    }
    let grid = eq.grid().clone();
    let beta = model.beta();
    let data = DMatrix::from_fn(grid.nq(), grid.np(), |i, j| {
        let m = eq.mass_on_grid[i];
        let d = grid.p(j) - shift;
        eq.g.data[i] * (beta / (crate::model::TWO_PI * m)).sqrt() * (-0.5 * beta * d * d / m).exp()
    });
    Ok(DensityField::from_data(grid, data))
}

struct EntropySeries {
    times: Vec<f64>,
    total: Vec<f64>,
    position: Vec<f64>,
    conditional: Vec<f64>,
}

fn sample_entropy_series(
    op: &FpkeOperator,
    f0: &DensityField,
    eq: &Equilibrium,
    window: f64,
    dt: f64,
) -> Result<EntropySeries> {
    let times: Vec<f64> = (0..9).map(|k| window * k as f64 / 8.0).collect();
    let evolution = op.evolve(f0, &times, DtChoice::Fixed(dt))?;
    let mut total = Vec::with_capacity(9);
    let mut position = Vec::with_capacity(9);
    let mut conditional = Vec::with_capacity(9);
    for snap in &evolution.snapshots {
        let fields = log_ratio_fields(snap, eq)?;
        let (f_ent, g_ent, h_ent) = entropy_sums(snap, &fields);
        total.push(f_ent);
        position.push(g_ent);
        conditional.push(h_ent);
    }
    Ok(EntropySeries { times, total, position, conditional })
}

fn scaled_check(
    name: &'static str,
    measured: f64,
    reference: f64,
    scale: f64,
    tolerance: f64,
) -> BreakCheck {
    let error = (measured - reference).abs() / scale;
    BreakCheck { name, measured, reference, error, tolerance, pass: error <= tolerance }
}

/// Evolves a break state over a short window and fits the entropy
/// series with cubics to compare the derivatives at the break against
/// the predictions from the position log ratio: the total entropy
/// starts as a strictly decreasing cubic parabola, the conditional
/// entropy curves up by T E|d_q xi|^2_{M^-1}, and the position entropy
/// curves down by the same amount.
///
/// With `window = None` the window is chosen in two passes: a probe
/// window sized so the cubic term moves the total entropy by a tenth,
/// then a final window keeping the fitted quartic contamination under
/// half a percent.  Cubic fits (rather than quadratics) are used for
/// all three series because the neglected next-order term over any
/// window resolving the curvatures would otherwise bias the fitted
/// coefficients by more than the comparison tolerance.
pub fn break_analysis(
    model: &ModelSpec,
    eq: &Equilibrium,
    tilt: &PositionTilt,
    window: Option<f64>,
    dt: DtChoice,
) -> Result<BreakAnalysis> {
    let f0 = build_break_initial_condition(model, eq, tilt)?;
    let fields0 = log_ratio_fields(&f0, eq)?;
    if fields0.floored_fraction() > 1e-3 {
        return Err(Error::numerical(format!(
            "{:.2}% of nodes sit at the density floor; the break state is not resolved",
            100.0 * fields0.floored_fraction()
        )));
    }
    let grid = f0.grid().clone();
    let op = FpkeOperator::new(model, &grid)?;

    // Predictions at the break from the position log ratio alone.
    let dxi = grid.deriv_q_vec(&fields0.xi);
    let temp = model.temperature();
    let mut total_dddot_predicted = 0.0;
    let mut conditional_ddot_predicted = 0.0;
    for i in 0..grid.nq() {
        let q = grid.q(i);
        let m_inv = 1.0 / model.mass_matrix(&[q])[(0, 0)];
        let d = model.diffusion_matrix(&[q])[(0, 0)];
        let s = fields0.marginal[i] * dxi[i] * dxi[i] * grid.dq();
        total_dddot_predicted -= d * m_inv * m_inv * s;
        conditional_ddot_predicted += temp * m_inv * s;
    }

    let (total0, _, conditional0) = entropy_sums(&f0, &fields0);
    let dt_step = match dt {
        DtChoice::Auto => op.max_dt(),
        DtChoice::Fixed(v) => {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!("fixed step must be positive, got {v}")));
            }
            v
        }
    };
    let has_signal = total0 > 1e-10 && total_dddot_predicted.abs() > 1e-14;

    let window = match window {
        Some(w) if w > 0.0 && w.is_finite() => w,
        Some(w) => return Err(Error::config(format!("window must be positive, got {w}"))),
        None => {
            // Probe pass: a tenth of the initial entropy in cubic change.
            let mut probe = (0.6 * total0 / total_dddot_predicted.abs()).cbrt();
            if !probe.is_finite() || probe <= 0.0 {
                probe = 0.5;
            }
            let lo = 16.0 * dt_step;
            probe = probe.clamp(lo, 2.0_f64.max(lo));
            if !has_signal {
                probe
            } else {
                let series = sample_entropy_series(&op, &f0, eq, probe, dt_step)?;
                let (coeffs, _) = polyfit(&series.times, &series.total, 4)?;
                let (c3, c4) = (coeffs[3], coeffs[4]);
                // Quartic-to-cubic ratio at the window edge held to
                // 1.5%, which biases the fitted third derivative by
                // about twice that, inside the comparison tolerance.
                let refined = if c4.abs() * probe > 0.015 * c3.abs() {
                    0.015 * (c3 / c4).abs()
                } else {
                    probe
                };
                refined.clamp(lo, probe.max(lo))
            }
        }
    };

    let series = sample_entropy_series(&op, &f0, eq, window, dt_step)?;
    let (total_fit, total_r2) = polyfit(&series.times, &series.total, 3)?;
    let (position_fit, position_r2) = polyfit(&series.times, &series.position, 3)?;
    let (conditional_fit, conditional_r2) = polyfit(&series.times, &series.conditional, 3)?;
    if has_signal && total_r2 < 0.999 {
        return Err(Error::numerical(format!(
            "cubic fit of the total entropy explains too little (r2 = {total_r2:.6}); \
             the window is too wide, retry near {:.3e}",
            window / 4.0
        )));
    }

    let checks = if has_signal {
        // Measured conditional log-ratio rate at the break via a
        // one-sided difference over a short spacing of its own (so the
        // truncation error stays below the spatial one), against
        // -p M^-1 d_q xi.
        let delta = (16.0 * dt_step).min(window / 8.0);
        let rate_evo = op.evolve(&f0, &[0.0, delta, 2.0 * delta], DtChoice::Fixed(dt_step))?;
        let m_inv: Vec<f64> =
            (0..grid.nq()).map(|i| 1.0 / model.mass_matrix(&[grid.q(i)])[(0, 0)]).collect();
        let eta0 = &fields0.eta;
        let eta1 = log_ratio_fields(&rate_evo.snapshots[1], eq)?.eta;
        let eta2 = log_ratio_fields(&rate_evo.snapshots[2], eq)?.eta;
        let w_cell = grid.cell_weight();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..grid.nq() {
            for j in 0..grid.np() {
                let measured =
                    (-3.0 * eta0[(i, j)] + 4.0 * eta1[(i, j)] - eta2[(i, j)]) / (2.0 * delta);
                let reference = -grid.p(j) * m_inv[i] * dxi[i];
                let wgt = eq.f.data[(i, j)] * w_cell;
                num += wgt * (measured - reference) * (measured - reference);
                den += wgt * reference * reference;
            }
        }
        let eta_rate_error = num.sqrt() / den.sqrt().max(1e-12);

        let gamma_sup = {
            let moment1 = f0.momentum_moment(1);
            (0..grid.nq())
                .map(|i| {
                    let g = fields0.marginal[i];
                    if g > DENSITY_FLOOR { (moment1.data[i] / g).abs() } else { 0.0 }
                })
                .fold(0.0, f64::max)
        };
        let marginal_rate_sup = op.marginal_rhs(&f0).amax();
        let dissipation0 = dissipation_from(&f0, &fields0, model);

        // Natural scales: the cubic change of the total entropy over
        // the window for its linear term, the quadratic change of the
        // components for theirs, and the predicted component curvature
        // for all curvature comparisons (the total curvature vanishes
        // at the break only relative to what its components carry).
        let cubic_change = (total_dddot_predicted.abs() * window.powi(3) / 6.0).max(1e-12);
        let quad_change = (conditional_ddot_predicted.abs() * window.powi(2) / 2.0).max(1e-12);
        let curvature_scale = conditional_ddot_predicted.abs().max(1e-9);

        vec![
            scaled_check("conditional-entropy-at-break", conditional0, 0.0, 1.0, 1e-10),
            scaled_check("dissipation-rate-at-break", dissipation0, 0.0, 1.0, 1e-10),
            scaled_check("momentum-mean-at-break", gamma_sup, 0.0, 1.0, 1e-9),
            scaled_check("marginal-rate-at-break", marginal_rate_sup, 0.0, 1.0, 1e-9),
            scaled_check(
                "total-entropy-linear-term",
                total_fit[1] * window,
                0.0,
                cubic_change,
                0.05,
            ),
            scaled_check("total-entropy-curvature", 2.0 * total_fit[2], 0.0, curvature_scale, 0.05),
            scaled_check(
                "total-entropy-cubic-coefficient",
                6.0 * total_fit[3],
                total_dddot_predicted,
                total_dddot_predicted.abs().max(1e-9),
                0.05,
            ),
            scaled_check(
                "conditional-entropy-linear-term",
                conditional_fit[1] * window,
                0.0,
                quad_change,
                0.05,
            ),
            scaled_check(
                "conditional-entropy-curvature",
                2.0 * conditional_fit[2],
                conditional_ddot_predicted,
                curvature_scale,
                0.05,
            ),
            scaled_check(
                "position-entropy-linear-term",
                position_fit[1] * window,
                0.0,
                quad_change,
                0.05,
            ),
            scaled_check(
                "waterbed-curvature",
                2.0 * position_fit[2],
                -2.0 * conditional_fit[2],
                curvature_scale,
                0.05,
            ),
            scaled_check("conditional-rate-field", eta_rate_error, 0.0, 1.0, 0.02),
            scaled_check("cubic-local-form", 1.0 - total_r2, 0.0, 1.0, 1e-3),
        ]
    } else {
        // Starting at equilibrium there is no break structure to fit:
        // the entropy may only creep along the discrete stationarity
        // defect, quadratically in time at most.
        let residual = op.apply_adjoint(&eq.f.data);
        let w_cell = grid.cell_weight();
        let mut quad = 0.0;
        for i in 0..grid.nq() {
            for j in 0..grid.np() {
                let v = eq.f.data[(i, j)];
                if v > DENSITY_FLOOR {
                    quad += residual[(i, j)] * residual[(i, j)] / v * w_cell;
                }
            }
        }
        let drift = 0.5 * window * window * quad;
        let flat_sup = series.total.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        vec![scaled_check("entropy-stays-flat", flat_sup, 0.0, 1.0, (2.0 * drift).max(1e-9))]
    };
    let all_pass = checks.iter().all(|c| c.pass);

    Ok(BreakAnalysis {
        tilt: tilt.clone(),
        window,
        dt: dt_step,
        times: series.times,
        total_series: series.total,
        position_series: series.position,
        conditional_series: series.conditional,
        total_fit,
        position_fit,
        conditional_fit,
        total_r2,
        position_r2,
        conditional_r2,
        total_dddot_predicted,
        conditional_ddot_predicted,
        checks,
        all_pass,
    })
}

/// Checks that the total entropy never rises along an evolution, shows
/// flat stretches next to the conditional entropy, and measures the
/// waterbed excess (both components rising across one interval).
pub fn monotonicity_audit(evolution: &Evolution, eq: &Equilibrium) -> Result<MonotonicityReport> {
    if evolution.snapshots.len() < 20 {
        return Err(Error::config(format!(
            "monotonicity audit needs at least 20 snapshots, got {}",
            evolution.snapshots.len()
        )));
    }
    let mut total = Vec::with_capacity(evolution.snapshots.len());
    let mut position = Vec::with_capacity(evolution.snapshots.len());
    let mut conditional = Vec::with_capacity(evolution.snapshots.len());
    for snap in &evolution.snapshots {
        let fields = log_ratio_fields(snap, eq)?;
        let (f_ent, g_ent, h_ent) = entropy_sums(snap, &fields);
        total.push(f_ent);
        position.push(g_ent);
        conditional.push(h_ent);
    }
    let mut max_increase = f64::NEG_INFINITY;
    let mut waterbed_excess = f64::NEG_INFINITY;
    let mut flat_segments = Vec::new();
    for k in 0..total.len() - 1 {
        let df = total[k + 1] - total[k];
        max_increase = max_increase.max(df);
        if df > 1e-9 {
            return Err(Error::numerical(format!(
                "total entropy rose by {df:.3e} on [{:.4}, {:.4}]",
                evolution.times[k],
                evolution.times[k + 1]
            )));
        }
        if df.abs() < 1e-8 {
            flat_segments.push((k, conditional[k]));
        }
        let dg = position[k + 1] - position[k];
        let dh = conditional[k + 1] - conditional[k];
        waterbed_excess = waterbed_excess.max(dg.min(dh));
    }
    Ok(MonotonicityReport {
        times: evolution.times.clone(),
        total_series: total,
        position_series: position,
        conditional_series: conditional,
        max_increase,
        flat_segments,
        waterbed_excess,
    })
}
