//! Phase-plane grids and the fields living on them.
//!
//! The position axis is either periodic (nodes i dq on the circle,
//! dq = 2 pi / nq) or a truncated line sampled at cell centers
//! (nodes lo + (i + 1/2) dq, dq = (hi - lo) / nq). The momentum axis is
//! symmetric about zero with an odd node count, so p = 0 is a node and
//! mirror nodes satisfy p[np-1-j] = -p[j] bit for bit.
//!
//! Integrals use plain node-weight sums (midpoint on line axes, the
//! periodic rectangle rule in q, uniform weights in p). Uniform weights
//! make discrete flux divergences telescope exactly, which is what keeps
//! the transport solver's mass conservation at rounding level; for the
//! smooth, boundary-vanishing densities handled here the rectangle rule
//! is also spectrally accurate on the periodic axis.
//!
//! Derivatives are second-order central stencils, wrapped on the periodic
//! axis and closed with one-sided second-order stencils on line edges.
//! Fourth-order variants exist for operator assembly where the extra
//! accuracy is worth the wider stencil.

use crate::error::{Error, Result};
use crate::model::{Axis, ModelSpec, TWO_PI};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QAxis {
    Periodic,
    Line,
}

#[derive(Clone, Debug)]
pub struct PhaseGrid {
    q_kind: QAxis,
    q_lo: f64,
    q_hi: f64,
    dq: f64,
    nq: usize,
    p_max: f64,
    dp: f64,
    np: usize,
}

impl PhaseGrid {
    pub const MIN_Q_NODES: usize = 16;
    pub const MIN_P_NODES: usize = 17;

    /// Grid over the circle times [-p_max, p_max].
    pub fn periodic(nq: usize, np: usize, p_max: f64) -> Result<Self> {
        Self::build(QAxis::Periodic, 0.0, TWO_PI, nq, np, p_max)
    }

    /// Grid over [lo, hi] times [-p_max, p_max], cell-centered in q.
    pub fn line(lo: f64, hi: f64, nq: usize, np: usize, p_max: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::config("line grid needs finite hi > lo"));
        }
        Self::build(QAxis::Line, lo, hi, nq, np, p_max)
    }

    /// Grid adapted to a one-dimensional model: the position axis follows
    /// the model's space, and the momentum cutoff defaults to seven thermal
    /// standard deviations of the heaviest accessible inertia.
    pub fn for_model(model: &ModelSpec, nq: usize, np: usize, p_max: Option<f64>) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::config("phase grids cover one-dimensional models"));
        }
        let (kind, lo, hi) = match model.space().axes[0] {
            Axis::Circle => (QAxis::Periodic, 0.0, TWO_PI),
            Axis::Line { lo, hi } => (QAxis::Line, lo, hi),
        };
        let p_max = match p_max {
            Some(v) => v,
            None => {
                let mut max_mass = 0.0_f64;
                let dq = (hi - lo) / nq as f64;
                for i in 0..nq {
                    let q = lo + (i as f64 + 0.5) * dq;
                    max_mass = max_mass.max(model.mass_matrix(&[q])[(0, 0)]);
                }
                7.0 * (model.temperature() * max_mass).sqrt()
            }
        };
        Self::build(kind, lo, hi, nq, np, p_max)
    }

    fn build(q_kind: QAxis, q_lo: f64, q_hi: f64, nq: usize, np: usize, p_max: f64) -> Result<Self> {
        if nq < Self::MIN_Q_NODES {
            return Err(Error::config(format!(
                "need at least {} position nodes, got {nq}",
                Self::MIN_Q_NODES
            )));
        }
        if np < Self::MIN_P_NODES || np.is_multiple_of(2) {
            return Err(Error::config(format!(
                "need an odd momentum node count of at least {}, got {np}",
                Self::MIN_P_NODES
            )));
        }
        if !p_max.is_finite() || p_max <= 0.0 {
            return Err(Error::config(format!("momentum cutoff must be positive, got {p_max}")));
        }
        let dq = (q_hi - q_lo) / nq as f64;
        let dp = p_max / ((np - 1) / 2) as f64;
        Ok(PhaseGrid { q_kind, q_lo, q_hi, dq, nq, p_max, dp, np })
    }

    pub fn q_kind(&self) -> QAxis {
        self.q_kind
    }
    pub fn is_periodic(&self) -> bool {
        self.q_kind == QAxis::Periodic
    }
    pub fn nq(&self) -> usize {
        self.nq
    }
    pub fn np(&self) -> usize {
        self.np
    }
    pub fn dq(&self) -> f64 {
        self.dq
    }
    pub fn dp(&self) -> f64 {
        self.dp
    }
    pub fn p_max(&self) -> f64 {
        self.p_max
    }
    pub fn q_bounds(&self) -> (f64, f64) {
        (self.q_lo, self.q_hi)
    }

    pub fn q(&self, i: usize) -> f64 {
        match self.q_kind {
            QAxis::Periodic => i as f64 * self.dq,
            QAxis::Line => self.q_lo + (i as f64 + 0.5) * self.dq,
        }
    }

    /// Momentum nodes are built symmetrically around the central node so
    /// that p(np-1-j) = -p(j) holds exactly.
    pub fn p(&self, j: usize) -> f64 {
        let mid = (self.np - 1) / 2;
        (j as isize - mid as isize) as f64 * self.dp
    }

    pub fn mid_p(&self) -> usize {
        (self.np - 1) / 2
    }

    pub fn mirror_p(&self, j: usize) -> usize {
        self.np - 1 - j
    }

    pub fn q_nodes(&self) -> Vec<f64> {
        (0..self.nq).map(|i| self.q(i)).collect()
    }

    pub fn p_nodes(&self) -> Vec<f64> {
        (0..self.np).map(|j| self.p(j)).collect()
    }

    /// Weight of one phase cell.
    pub fn cell_weight(&self) -> f64 {
        self.dq * self.dp
    }

    /// Grid with both axes refined: position count doubled, momentum
    /// count doubled keeping the symmetric layout and the same cutoff.
    pub fn refined(&self) -> Self {
        PhaseGrid {
            q_kind: self.q_kind,
            q_lo: self.q_lo,
            q_hi: self.q_hi,
            dq: (self.q_hi - self.q_lo) / (2 * self.nq) as f64,
            nq: 2 * self.nq,
            p_max: self.p_max,
            dp: self.p_max / (self.np - 1) as f64,
            np: 2 * self.np - 1,
        }
    }

    /// First q-derivative of a field, second-order stencils.
    pub fn deriv_q(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_q(f, 2, 1)
    }

    /// First q-derivative, fourth-order stencils.
    pub fn deriv_q4(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_q(f, 4, 1)
    }

    /// First p-derivative of a field, second-order stencils.
    pub fn deriv_p(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_p(f, 2, 1)
    }

    pub fn deriv_p4(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_p(f, 4, 1)
    }

    /// Second p-derivative of a field, second-order stencils.
    pub fn deriv2_p(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_p(f, 2, 2)
    }

    pub fn deriv2_p4(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_p(f, 4, 2)
    }

    /// First derivative of a marginal (function of q alone).
    pub fn deriv_q_vec(&self, g: &DVector<f64>) -> DVector<f64> {
        let as_matrix = DMatrix::from_fn(self.nq, 1, |i, _| g[i]);
        let d = self.apply_q_axis(&as_matrix, 2, 1);
        DVector::from_fn(self.nq, |i, _| d[(i, 0)])
    }

    fn apply_q(&self, f: &DMatrix<f64>, order: usize, deriv: usize) -> DMatrix<f64> {
        assert_eq!(f.nrows(), self.nq, "field has wrong q extent");
        assert_eq!(f.ncols(), self.np, "field has wrong p extent");
        self.apply_q_axis(f, order, deriv)
    }

    fn apply_q_axis(&self, f: &DMatrix<f64>, order: usize, deriv: usize) -> DMatrix<f64> {
        let n = f.nrows();
        let cols = f.ncols();
        let mut out = DMatrix::zeros(n, cols);
        let periodic = self.is_periodic();
        for c in 0..cols {
            for i in 0..n {
                let get = |off: isize| -> f64 {
                    let k = i as isize + off;
                    if periodic {
                        f[(k.rem_euclid(n as isize) as usize, c)]
                    } else {
                        f[(k as usize, c)]
                    }
                };
                out[(i, c)] = stencil_value(i, n, periodic, order, deriv, self.dq, &get);
            }
        }
        out
    }

    fn apply_p(&self, f: &DMatrix<f64>, order: usize, deriv: usize) -> DMatrix<f64> {
        assert_eq!(f.nrows(), self.nq, "field has wrong q extent");
        assert_eq!(f.ncols(), self.np, "field has wrong p extent");
        let n = self.np;
        let mut out = DMatrix::zeros(self.nq, n);
        for i in 0..self.nq {
            for j in 0..n {
                let get = |off: isize| -> f64 { f[(i, (j as isize + off) as usize)] };
                out[(i, j)] = stencil_value(j, n, false, order, deriv, self.dp, &get);
            }
        }
        out
    }
}

/// One stencil evaluation: central in the interior, one-sided of matching
/// order at non-periodic edges.
fn stencil_value(
    i: usize,
    n: usize,
    periodic: bool,
    order: usize,
    deriv: usize,
    h: f64,
    get: &dyn Fn(isize) -> f64,
) -> f64 {
    let half = order / 2;
    let interior = periodic || (i >= half && i + half < n);
    match (deriv, order) {
        (1, 2) => {
            if interior {
                (get(1) - get(-1)) / (2.0 * h)
            } else if i < half {
                (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * h)
            } else {
                (3.0 * get(0) - 4.0 * get(-1) + get(-2)) / (2.0 * h)
            }
        }
        (1, 4) => {
            if interior {
                (get(-2) - 8.0 * get(-1) + 8.0 * get(1) - get(2)) / (12.0 * h)
            } else if i < half {
                // Shifted five-point stencils keep fourth order at edges.
                let s = if i == 0 {
                    [-25.0 / 12.0, 4.0, -3.0, 4.0 / 3.0, -0.25]
                } else {
                    [-0.25, -5.0 / 6.0, 1.5, -0.5, 1.0 / 12.0]
                };
                let base = -(i as isize);
                (0..5).map(|k| s[k] * get(base + k as isize)).sum::<f64>() / h
            } else {
                let s = if i == n - 1 {
                    [0.25, -4.0 / 3.0, 3.0, -4.0, 25.0 / 12.0]
                } else {
                    [-1.0 / 12.0, 0.5, -1.5, 5.0 / 6.0, 0.25]
                };
                let base = (n - 1 - i) as isize - 4;
                (0..5).map(|k| s[k] * get(base + k as isize)).sum::<f64>() / h
            }
        }
        (2, 2) => {
            if interior {
                (get(-1) - 2.0 * get(0) + get(1)) / (h * h)
            } else if i < half {
                (2.0 * get(0) - 5.0 * get(1) + 4.0 * get(2) - get(3)) / (h * h)
            } else {
                (2.0 * get(0) - 5.0 * get(-1) + 4.0 * get(-2) - get(-3)) / (h * h)
            }
        }
        (2, 4) => {
            if interior {
                (-get(-2) + 16.0 * get(-1) - 30.0 * get(0) + 16.0 * get(1) - get(2))
                    / (12.0 * h * h)
            } else {
                // Six-point one-sided closures, fourth order.
                let (s, base): ([f64; 6], isize) = if i < half {
                    let s0 = [
                        15.0 / 4.0,
                        -77.0 / 6.0,
                        107.0 / 6.0,
                        -13.0,
                        61.0 / 12.0,
                        -5.0 / 6.0,
                    ];
                    let s1 = [
                        5.0 / 6.0,
                        -5.0 / 4.0,
                        -1.0 / 3.0,
                        7.0 / 6.0,
                        -0.5,
                        1.0 / 12.0,
                    ];
                    if i == 0 {
                        (s0, 0)
                    } else {
                        (s1, -1)
                    }
                } else {
                    let s0 = [
                        -5.0 / 6.0,
                        61.0 / 12.0,
                        -13.0,
                        107.0 / 6.0,
                        -77.0 / 6.0,
                        15.0 / 4.0,
                    ];
                    let s1 = [
                        1.0 / 12.0,
                        -0.5,
                        7.0 / 6.0,
                        -1.0 / 3.0,
                        -5.0 / 4.0,
                        5.0 / 6.0,
                    ];
                    if i == n - 1 {
                        (s0, -5)
                    } else {
                        (s1, -4)
                    }
                };
                (0..6).map(|k| s[k] * get(base + k as isize)).sum::<f64>() / (h * h)
            }
        }
        _ => unreachable!("unsupported stencil request"),
    }
}

/// Scalar field on the phase plane, indexed (q node, p node).
#[derive(Clone, Debug)]
pub struct DensityField {
    grid: Arc<PhaseGrid>,
    pub data: DMatrix<f64>,
}

/// Function of position alone, sampled on the grid's q nodes.
#[derive(Clone, Debug)]
pub struct MarginalField {
    grid: Arc<PhaseGrid>,
    pub data: DVector<f64>,
}

impl DensityField {
    pub fn zeros(grid: Arc<PhaseGrid>) -> Self {
        let data = DMatrix::zeros(grid.nq(), grid.np());
        DensityField { grid, data }
    }

    pub fn from_fn(grid: Arc<PhaseGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let data = DMatrix::from_fn(grid.nq(), grid.np(), |i, j| f(grid.q(i), grid.p(j)));
        DensityField { grid, data }
    }

    pub fn from_data(grid: Arc<PhaseGrid>, data: DMatrix<f64>) -> Self {
        assert_eq!(data.nrows(), grid.nq());
        assert_eq!(data.ncols(), grid.np());
        DensityField { grid, data }
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    /// Integral of the field over the phase plane.
    pub fn mass(&self) -> f64 {
        self.data.sum() * self.grid.cell_weight()
    }

    /// Integral of g(q, p, f(q, p)).
    pub fn integrate(&self, g: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.grid.nq() {
            let q = self.grid.q(i);
            for j in 0..self.grid.np() {
                acc += g(q, self.grid.p(j), self.data[(i, j)]);
            }
        }
        acc * self.grid.cell_weight()
    }

    pub fn normalize(&mut self) -> Result<f64> {
        let m = self.mass();
        if !m.is_finite() || m <= 0.0 {
            return Err(Error::numerical(format!("cannot normalize field with mass {m}")));
        }
        self.data /= m;
        Ok(m)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mass fraction carried by negative values, |integral over f < 0|
    /// relative to the integral of |f|.
    pub fn negative_fraction(&self) -> f64 {
        let mut neg = 0.0;
        let mut all = 0.0;
        for v in self.data.iter() {
            all += v.abs();
            if *v < 0.0 {
                neg += -v;
            }
        }
        if all == 0.0 {
            0.0
        } else {
            neg / all
        }
    }

    pub fn l1_distance(&self, other: &DensityField) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += (a - b).abs();
        }
        acc * self.grid.cell_weight()
    }

    /// Redistributes the field's cell masses onto another grid over the
    /// same domain by exact cell-overlap fractions, then divides by the
    /// target cell weight. Conserves mass to rounding; typically used to
    /// compare a fine solution against a coarse histogram.
    pub fn restricted_to(&self, target: &Arc<PhaseGrid>) -> Result<DensityField> {
        let src = &self.grid;
        if src.q_kind() != target.q_kind()
            || src.q_bounds() != target.q_bounds()
            || src.p_max() != target.p_max()
        {
            return Err(Error::config("grids cover different domains"));
        }
        let q_map = overlap_map(
            |i| src.q(i) - 0.5 * src.dq(),
            src.dq(),
            src.nq(),
            |k| target.q(k) - 0.5 * target.dq(),
            target.dq(),
            target.nq(),
            src.is_periodic(),
        );
        let p_map = overlap_map(
            |j| src.p(j) - 0.5 * src.dp(),
            src.dp(),
            src.np(),
            |k| target.p(k) - 0.5 * target.dp(),
            target.dp(),
            target.np(),
            false,
        );
        let mut data = DMatrix::zeros(target.nq(), target.np());
        let w_src = src.cell_weight();
        for (i, q_cells) in q_map.iter().enumerate() {
            for (iq, fq) in q_cells {
                for (j, p_cells) in p_map.iter().enumerate() {
                    let m = self.data[(i, j)] * w_src * fq;
                    for (jp, fp) in p_cells {
                        data[(*iq, *jp)] += m * fp;
                    }
                }
            }
        }
        data /= target.cell_weight();
        Ok(DensityField { grid: target.clone(), data })
    }

    /// Position marginal, integral of the field over p.
    pub fn marginalize_position(&self) -> MarginalField {
        let dp = self.grid.dp();
        let data = DVector::from_fn(self.grid.nq(), |i, _| self.data.row(i).sum() * dp);
        MarginalField { grid: self.grid.clone(), data }
    }

    /// Raw momentum moment per position node: integral of p^k f(q, p) dp.
    pub fn momentum_moment(&self, k: u32) -> MarginalField {
        let dp = self.grid.dp();
        let data = DVector::from_fn(self.grid.nq(), |i, _| {
            (0..self.grid.np())
                .map(|j| self.grid.p(j).powi(k as i32) * self.data[(i, j)])
                .sum::<f64>()
                * dp
        });
        MarginalField { grid: self.grid.clone(), data }
    }

    /// Conditional density of p given q, the field divided row-wise by its
    /// position marginal. Marginal values are floored at 1e-13 of their
    /// maximum so thin tails do not amplify noise; each returned row then
    /// integrates to one up to that floor and rounding.
    pub fn conditional_pdf(&self) -> DensityField {
        let marginal = self.marginalize_position();
        let floor = 1e-13 * marginal.data.iter().cloned().fold(0.0_f64, f64::max);
        let mut data = self.data.clone();
        for i in 0..self.grid.nq() {
            let g = marginal.data[i].max(floor).max(f64::MIN_POSITIVE);
            for j in 0..self.grid.np() {
                data[(i, j)] /= g;
            }
        }
        DensityField { grid: self.grid.clone(), data }
    }

    /// Conditional momentum mean per position node.
    pub fn conditional_mean(&self) -> MarginalField {
        let marginal = self.marginalize_position();
        let first = self.momentum_moment(1);
        let floor = 1e-13 * marginal.data.iter().cloned().fold(0.0_f64, f64::max);
        let data = DVector::from_fn(self.grid.nq(), |i, _| {
            first.data[i] / marginal.data[i].max(floor).max(f64::MIN_POSITIVE)
        });
        MarginalField { grid: self.grid.clone(), data }
    }

    /// Splits the field into its even and odd parts under p -> -p. The
    /// even part is mirror-symmetric and the odd part mirror-antisymmetric
    /// bit for bit; their sum returns the field to rounding accuracy.
    pub fn parity_split(&self) -> (DensityField, DensityField) {
        let mut even = DMatrix::zeros(self.grid.nq(), self.grid.np());
        let mut odd = DMatrix::zeros(self.grid.nq(), self.grid.np());
        for i in 0..self.grid.nq() {
            for j in 0..self.grid.np() {
                let jm = self.grid.mirror_p(j);
                let a = self.data[(i, j)];
                let b = self.data[(i, jm)];
                even[(i, j)] = 0.5 * (a + b);
                odd[(i, j)] = 0.5 * (a - b);
            }
        }
        (
            DensityField { grid: self.grid.clone(), data: even },
            DensityField { grid: self.grid.clone(), data: odd },
        )
    }

    /// Momentum marginal, integral of the field over q.
    pub fn momentum_marginal(&self) -> DVector<f64> {
        let dq = self.grid.dq();
        DVector::from_fn(self.grid.np(), |j, _| self.data.column(j).sum() * dq)
    }
}

impl MarginalField {
    pub fn from_fn(grid: Arc<PhaseGrid>, f: impl Fn(f64) -> f64) -> Self {
        let data = DVector::from_fn(grid.nq(), |i, _| f(grid.q(i)));
        MarginalField { grid, data }
    }

    pub fn from_data(grid: Arc<PhaseGrid>, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), grid.nq());
        MarginalField { grid, data }
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn mass(&self) -> f64 {
        self.data.sum() * self.grid.dq()
    }

    pub fn normalize(&mut self) -> Result<f64> {
        let m = self.mass();
        if !m.is_finite() || m <= 0.0 {
            return Err(Error::numerical(format!("cannot normalize marginal with mass {m}")));
        }
        self.data /= m;
        Ok(m)
    }

    pub fn deriv(&self) -> MarginalField {
        MarginalField { grid: self.grid.clone(), data: self.grid.deriv_q_vec(&self.data) }
    }
}

/// For every source cell [left(i), left(i) + width), the target cells it
/// overlaps and the fraction of its length inside each. Target cells are
/// the affine family left(k) = left(0) + k width; with `wrap` the target
/// index is taken modulo the count instead of clamping at the ends.
fn overlap_map(
    src_left: impl Fn(usize) -> f64,
    src_width: f64,
    src_count: usize,
    tgt_left: impl Fn(usize) -> f64,
    tgt_width: f64,
    tgt_count: usize,
    wrap: bool,
) -> Vec<Vec<(usize, f64)>> {
    let l0 = tgt_left(0);
    let mut map = Vec::with_capacity(src_count);
    for i in 0..src_count {
        let a = src_left(i);
        let b = a + src_width;
        let mut pieces = Vec::with_capacity(2);
        let mut k = ((a - l0) / tgt_width).floor() as i64;
        if !wrap {
            k = k.max(0);
        }
        loop {
            let lo = l0 + k as f64 * tgt_width;
            if lo >= b || (!wrap && k >= tgt_count as i64) {
                break;
            }
            let overlap = (b.min(lo + tgt_width) - a.max(lo)).max(0.0);
            if overlap > 0.0 {
                let idx =
                    if wrap { k.rem_euclid(tgt_count as i64) as usize } else { k as usize };
                pieces.push((idx, overlap / src_width));
            }
            k += 1;
        }
        map.push(pieces);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn demo_grid() -> Arc<PhaseGrid> {
        Arc::new(PhaseGrid::periodic(32, 33, 7.0).unwrap())
    }

    #[test]
    fn node_layout_periodic() {
        let g = PhaseGrid::periodic(16, 17, 4.0).unwrap();
        assert_eq!(g.q(0), 0.0);
        assert!((g.dq() - TWO_PI / 16.0).abs() < 1e-15);
        assert_eq!(g.p(8), 0.0);
        assert_eq!(g.p(0), -4.0);
        assert_eq!(g.p(16), 4.0);
    }

    #[test]
    fn node_layout_line_cell_centered() {
        let g = PhaseGrid::line(-2.0, 2.0, 16, 17, 4.0).unwrap();
        assert!((g.q(0) - (-2.0 + 0.125)).abs() < 1e-15);
        assert!((g.q(15) - (2.0 - 0.125)).abs() < 1e-15);
        let total: f64 = (0..16).map(|_| g.dq()).sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_mirror_is_exact() {
        let g = PhaseGrid::periodic(16, 33, 3.7).unwrap();
        assert_eq!(g.p(g.mid_p()).to_bits(), 0.0_f64.to_bits());
        for j in 0..33 {
            let jm = g.mirror_p(j);
            assert_eq!(g.mirror_p(jm), j);
            if j != g.mid_p() {
                assert_eq!(g.p(j).to_bits(), (-g.p(jm)).to_bits());
            }
        }
    }

    #[test]
    fn rejects_undersized_or_even_grids() {
        assert!(PhaseGrid::periodic(8, 33, 1.0).is_err());
        assert!(PhaseGrid::periodic(32, 32, 1.0).is_err());
        assert!(PhaseGrid::periodic(32, 15, 1.0).is_err());
        assert!(PhaseGrid::line(1.0, -1.0, 32, 33, 1.0).is_err());
        assert!(PhaseGrid::periodic(32, 33, 0.0).is_err());
    }

    #[test]
    fn gaussian_mass_is_accurate() {
        let grid = Arc::new(PhaseGrid::periodic(64, 65, 7.0).unwrap());
        let f = DensityField::from_fn(grid, |q, p| {
            (1.0 + 0.3 * q.cos()) * (-0.5 * p * p).exp() / (TWO_PI * (2.0 * PI).sqrt())
        });
        // Integral of (1 + 0.3 cos q)/(2 pi) dq = 1; Gaussian in p = 1.
        // The floor is the ~2.6e-12 of Gaussian mass beyond the 7 sigma
        // cutoff, not the quadrature rule.
        assert!((f.mass() - 1.0).abs() < 1e-11, "mass {}", f.mass());
    }

    #[test]
    fn marginal_and_moment_consistency() {
        let grid = demo_grid();
        let f = DensityField::from_fn(grid.clone(), |q, p| {
            (-0.5 * (p - 0.4 * q.sin()).powi(2)).exp()
        });
        let g = f.marginalize_position();
        let gamma = f.conditional_mean();
        for i in 0..grid.nq() {
            // Conditional mean of a shifted Gaussian is its shift, up to
            // the mass beyond the momentum cutoff (~6.6 sigma here).
            assert!((gamma.data[i] - 0.4 * grid.q(i).sin()).abs() < 1e-8);
            assert!(g.data[i] > 0.0);
        }
    }

    #[test]
    fn conditional_rows_integrate_to_one() {
        let grid = demo_grid();
        let f = DensityField::from_fn(grid.clone(), |q, p| {
            (2.0 + q.cos()) * (-0.5 * p * p).exp()
        });
        let h = f.conditional_pdf();
        let dp = grid.dp();
        for i in 0..grid.nq() {
            let row_mass: f64 = h.data.row(i).sum() * dp;
            assert!((row_mass - 1.0).abs() < 1e-13, "row {i}: {row_mass}");
        }
    }

    #[test]
    fn parity_split_reconstructs_exactly() {
        let grid = demo_grid();
        let f = DensityField::from_fn(grid.clone(), |q, p| {
            (-0.4 * (p - 0.3 * q.sin()).powi(2)).exp()
        });
        let (even, odd) = f.parity_split();
        for i in 0..grid.nq() {
            for j in 0..grid.np() {
                let jm = grid.mirror_p(j);
                let v = f.data[(i, j)];
                // Rounding enters through (a + b)/2, so the tolerance
                // scales with the larger mirror partner.
                let scale = v.abs().max(f.data[(i, jm)].abs()).max(1e-300);
                let back = even.data[(i, j)] + odd.data[(i, j)];
                assert!((back - v).abs() <= 2.0 * f64::EPSILON * scale);
                assert_eq!(even.data[(i, j)].to_bits(), even.data[(i, jm)].to_bits());
                assert_eq!(odd.data[(i, j)], -odd.data[(i, jm)]);
            }
        }
    }

    #[test]
    fn derivatives_converge_at_advertised_orders() {
        // Periodic q derivative of cos q, exact derivative -sin q.
        let err_q = |nq: usize| {
            let grid = Arc::new(PhaseGrid::periodic(nq, 17, 1.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |q, _| q.cos());
            let d = grid.deriv_q(&f.data);
            (0..nq)
                .map(|i| (d[(i, 0)] + grid.q(i).sin()).abs())
                .fold(0.0_f64, f64::max)
        };
        let ratio = err_q(32) / err_q(64);
        assert!(ratio > 3.5 && ratio < 4.5, "q order-2 ratio {ratio}");

        // p derivative of a Gaussian on the closed interval.
        let err_p = |np: usize| {
            let grid = Arc::new(PhaseGrid::periodic(16, np, 4.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |_, p| (-0.5 * p * p).exp());
            let d = grid.deriv_p(&f.data);
            (0..np)
                .map(|j| {
                    let p = grid.p(j);
                    (d[(0, j)] + p * (-0.5 * p * p).exp()).abs()
                })
                .fold(0.0_f64, f64::max)
        };
        let ratio = err_p(33) / err_p(65);
        assert!(ratio > 3.5 && ratio < 4.6, "p order-2 ratio {ratio}");

        let err_p2 = |np: usize| {
            let grid = Arc::new(PhaseGrid::periodic(16, np, 4.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |_, p| (-0.5 * p * p).exp());
            let d = grid.deriv2_p(&f.data);
            (0..np)
                .map(|j| {
                    let p = grid.p(j);
                    (d[(0, j)] - (p * p - 1.0) * (-0.5 * p * p).exp()).abs()
                })
                .fold(0.0_f64, f64::max)
        };
        let ratio = err_p2(33) / err_p2(65);
        assert!(ratio > 3.5 && ratio < 4.6, "p second-derivative ratio {ratio}");
    }

    #[test]
    fn fourth_order_stencils_gain_accuracy() {
        let err = |np: usize, fourth: bool| {
            let grid = Arc::new(PhaseGrid::periodic(16, np, 4.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |_, p| (-0.5 * p * p).exp());
            let d = if fourth { grid.deriv_p4(&f.data) } else { grid.deriv_p(&f.data) };
            (0..np)
                .map(|j| {
                    let p = grid.p(j);
                    (d[(0, j)] + p * (-0.5 * p * p).exp()).abs()
                })
                .fold(0.0_f64, f64::max)
        };
        let ratio4 = err(33, true) / err(65, true);
        assert!(ratio4 > 12.0 && ratio4 < 20.0, "p order-4 ratio {ratio4}");
        assert!(err(33, true) < 0.2 * err(33, false));

        // Order measured away from the edges, where the pure central
        // formula applies; edge closures converge at the same order but
        // with a different constant, which muddies the ratio.
        let err2 = |np: usize, interior: bool| {
            let grid = Arc::new(PhaseGrid::periodic(16, np, 4.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |_, p| (-0.5 * p * p).exp());
            let d = grid.deriv2_p4(&f.data);
            let (jl, jr) = if interior { (4, np - 4) } else { (0, np) };
            (jl..jr)
                .map(|j| {
                    let p = grid.p(j);
                    (d[(0, j)] - (p * p - 1.0) * (-0.5 * p * p).exp()).abs()
                })
                .fold(0.0_f64, f64::max)
        };
        let ratio = err2(33, true) / err2(65, true);
        assert!(ratio > 11.0 && ratio < 21.0, "p order-4 second-derivative ratio {ratio}");
        assert!(err2(65, false) < err2(33, false), "edge closures must not degrade refinement");
    }

    #[test]
    fn line_edge_stencils_are_exact_on_quadratics() {
        let grid = Arc::new(PhaseGrid::line(-1.0, 3.0, 20, 17, 2.0).unwrap());
        let f = DensityField::from_fn(grid.clone(), |q, _| 1.5 * q * q - 2.0 * q + 0.7);
        let d = grid.deriv_q(&f.data);
        for i in 0..grid.nq() {
            let expect = 3.0 * grid.q(i) - 2.0;
            assert!((d[(i, 0)] - expect).abs() < 1e-12, "node {i}");
        }
        let fp = DensityField::from_fn(grid.clone(), |_, p| 0.5 * p * p + p);
        let d2 = grid.deriv2_p(&fp.data);
        for j in 0..grid.np() {
            assert!((d2[(0, j)] - 1.0).abs() < 1e-12, "p node {j}");
        }
    }

    #[test]
    fn refinement_nests_momentum_nodes() {
        let g = PhaseGrid::periodic(16, 33, 5.0).unwrap();
        let r = g.refined();
        assert_eq!(r.nq(), 32);
        assert_eq!(r.np(), 65);
        for j in 0..g.np() {
            assert!((r.p(2 * j) - g.p(j)).abs() < 1e-13);
        }
    }

    #[test]
    fn restriction_conserves_mass_and_constants() {
        let fine = Arc::new(PhaseGrid::periodic(64, 97, 5.0).unwrap());
        let coarse = Arc::new(PhaseGrid::periodic(16, 17, 5.0).unwrap());
        let f = DensityField::from_fn(fine.clone(), |q, p| {
            (1.0 + 0.5 * q.sin()) * (-0.4 * p * p).exp()
        });
        let r = f.restricted_to(&coarse).unwrap();
        assert!((r.mass() - f.mass()).abs() <= 1e-12 * f.mass());

        let ones = DensityField::from_fn(fine.clone(), |_, _| 1.0);
        let r1 = ones.restricted_to(&coarse).unwrap();
        for i in 0..coarse.nq() {
            // Interior rows are covered completely; the outermost momentum
            // rows only receive the mass that exists on the fine grid.
            for j in 1..coarse.np() - 1 {
                assert!((r1.data[(i, j)] - 1.0).abs() < 1e-12, "node ({i}, {j})");
            }
            assert!(r1.data[(i, 0)] < 1.0);
        }
    }

    #[test]
    fn restriction_keeps_seam_cells_local() {
        let fine = Arc::new(PhaseGrid::periodic(64, 33, 3.0).unwrap());
        let coarse = Arc::new(PhaseGrid::periodic(16, 17, 3.0).unwrap());
        // A unit point mass in the fine cell straddling q = 0 must land
        // entirely in the coarse cell straddling q = 0.
        let mut f = DensityField::zeros(fine.clone());
        f.data[(0, fine.mid_p())] = 1.0 / fine.cell_weight();
        let r = f.restricted_to(&coarse).unwrap();
        assert!((r.data[(0, coarse.mid_p())] * coarse.cell_weight() - 1.0).abs() < 1e-12);
        assert!((r.mass() - 1.0).abs() < 1e-12);

        let incompatible = Arc::new(PhaseGrid::periodic(16, 17, 2.5).unwrap());
        assert!(f.restricted_to(&incompatible).is_err());
    }

    proptest! {
        #[test]
        fn conditional_rows_normalized_for_random_fields(
            seed in 0u64..1000,
            shift in -1.0f64..1.0,
        ) {
            let grid = Arc::new(PhaseGrid::periodic(16, 21, 4.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |q, p| {
                let wob = 1.0 + 0.5 * ((seed as f64) * 0.01 + q).sin();
                wob * (-0.5 * (p - shift * q.cos()).powi(2)).exp()
            });
            let h = f.conditional_pdf();
            let dp = grid.dp();
            for i in 0..grid.nq() {
                let m: f64 = h.data.row(i).sum() * dp;
                prop_assert!((m - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn parity_parts_sum_back(seed in 0u64..1000) {
            let grid = Arc::new(PhaseGrid::periodic(16, 17, 3.0).unwrap());
            let f = DensityField::from_fn(grid.clone(), |q, p| {
                ((seed % 7) as f64 + q.sin() + 0.3 * p).cos()
            });
            let (even, odd) = f.parity_split();
            for i in 0..grid.nq() {
                for j in 0..grid.np() {
                    let jm = grid.mirror_p(j);
                    let v = f.data[(i, j)];
                    let scale = v.abs().max(f.data[(i, jm)].abs()).max(1e-300);
                    let back = even.data[(i, j)] + odd.data[(i, j)];
                    prop_assert!((back - v).abs() <= 2.0 * f64::EPSILON * scale);
                    prop_assert_eq!(even.data[(i, j)].to_bits(), even.data[(i, jm)].to_bits());
                }
            }
        }
    }
}
