//! Model layer: position-space topology, potential, mass matrix, diffusion
//! and damping, plus the mechanical quantities built from them.
//!
//! A model fixes the data (S, V, M, D, beta) of the system
//!
//! ```text
//!     dQ = M(Q)^{-1} P dt
//!     dP = -(dH/dq + F(Q) M(Q)^{-1} P) dt + sqrt(D(Q)) dW
//! ```
//!
//! with H = V(q) + p' M(q)^{-1} p / 2. The position gradient of H carries
//! the centrifugal correction from a position-dependent mass:
//!
//! ```text
//!     (dH/dq)_k = V'_k(q) - p' M_k(q) p / 2,
//!     M_k = M^{-1} (d M / d q_k) M^{-1} = -d(M^{-1})/d q_k .
//! ```
//!
//! The damping defaults to the fluctuation-dissipation value F = (beta/2) D,
//! the unique choice that makes the Gibbs density invariant; explicit or
//! rescaled damping is accepted for diagnostic runs and its departure is
//! reported by [`ModelSpec::einstein_residual`].

use crate::error::{Error, Result};
use crate::linalg::symmetric_sqrt;
use crate::spline::CubicSpline;
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::sync::Arc;

pub const TWO_PI: f64 = 2.0 * PI;

/// One position coordinate: an unbounded line (with the truncation window
/// used by grids and samplers) or a circle of period 2 pi.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    Line { lo: f64, hi: f64 },
    Circle,
}

/// Product of line and circle factors.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSpace {
    pub axes: Vec<Axis>,
}

impl PositionSpace {
    pub fn line(lo: f64, hi: f64) -> Self {
        PositionSpace { axes: vec![Axis::Line { lo, hi }] }
    }

    pub fn circle() -> Self {
        PositionSpace { axes: vec![Axis::Circle] }
    }

    pub fn product(axes: Vec<Axis>) -> Self {
        PositionSpace { axes }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Canonicalizes circle coordinates into [0, 2 pi); line coordinates
    /// pass through. Idempotent: a canonical coordinate is returned bit
    /// for bit unchanged.
    pub fn wrap(&self, q: &mut [f64]) {
        for (x, axis) in q.iter_mut().zip(&self.axes) {
            if matches!(axis, Axis::Circle) && (*x >= TWO_PI || *x < 0.0) {
                *x = x.rem_euclid(TWO_PI);
                if *x >= TWO_PI {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn wrapped(&self, q: &[f64]) -> Vec<f64> {
        let mut out = q.to_vec();
        self.wrap(&mut out);
        out
    }
}

/// Damping specification.
#[derive(Clone, Debug)]
pub enum Damping {
    /// F = (beta/2) D, the invariance condition for the Gibbs density.
    Einstein,
    /// F = s (beta/2) D. Useful for probing how diagnostics react to a
    /// broken fluctuation-dissipation relation.
    ScaledEinstein(f64),
    /// Explicit constant matrix, independent of D (e.g. friction without
    /// noise in deterministic runs).
    Constant(DMatrix<f64>),
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type MatrixPartialFn = Arc<dyn Fn(&[f64], usize) -> DMatrix<f64> + Send + Sync>;

/// Pieces of a closure-defined model. Derivative slots left `None` fall
/// back to central finite differences.
#[derive(Clone)]
pub struct CustomParts {
    pub potential: ScalarFn,
    pub grad_potential: Option<VectorFn>,
    pub hess_potential: Option<MatrixFn>,
    pub mass: MatrixFn,
    pub mass_partial: Option<MatrixPartialFn>,
    pub diffusion: MatrixFn,
}

#[derive(Clone)]
enum Kind {
    Harmonic { kappa: f64, mass: f64, diffusion: f64 },
    Pendulum { v0: f64, mass: f64, diffusion: f64 },
    VariableMassPendulum { v0: f64, m0: f64, mu: f64, diffusion: f64 },
    Tabulated { v: CubicSpline, m: CubicSpline, d: CubicSpline },
    Custom(CustomParts),
}

/// Energy of a phase point split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergySplit {
    pub potential: f64,
    pub kinetic: f64,
    pub total: f64,
}

/// Position-dependent coefficients of a one-dimensional model, the
/// allocation-free counterpart of the matrix accessors.
#[derive(Clone, Copy, Debug)]
pub struct ScalarCoeffs {
    pub potential: f64,
    pub grad_potential: f64,
    pub mass: f64,
    pub mass_deriv: f64,
    pub diffusion: f64,
    pub damping: f64,
}

impl ScalarCoeffs {
    /// dH/dq = V' - p^2 M' / (2 M^2), the centrifugal term included.
    #[inline]
    pub fn grad_hamiltonian(&self, p: f64) -> f64 {
        self.grad_potential - 0.5 * p * p * self.mass_deriv / (self.mass * self.mass)
    }

    #[inline]
    pub fn kinetic(&self, p: f64) -> f64 {
        0.5 * p * p / self.mass
    }

    /// Instantaneous mean energy rate (1/2) <M^-1, D> - |q_dot|^2_F at a
    /// phase point.
    #[inline]
    pub fn energy_rate(&self, p: f64) -> f64 {
        let v = p / self.mass;
        0.5 * self.diffusion / self.mass - self.damping * v * v
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    space: PositionSpace,
    beta: f64,
    damping: Damping,
    kind: Kind,
}

impl ModelSpec {
    /// Harmonic well V = kappa |q|^2 / 2 with constant scalar mass and
    /// diffusion, on a product of lines truncated at 8 thermal standard
    /// deviations.
    pub fn harmonic(dim: usize, kappa: f64, mass: f64, diffusion: f64, beta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("harmonic model needs dim >= 1"));
        }
        if !kappa.is_finite() || kappa <= 0.0 {
            return Err(Error::config(format!("harmonic stiffness must be positive, got {kappa}")));
        }
        let temp = check_beta(beta)?;
        let half_width = 8.0 * (temp / kappa).sqrt();
        let axes = vec![Axis::Line { lo: -half_width, hi: half_width }; dim];
        let model = ModelSpec {
            name: "harmonic".into(),
            space: PositionSpace::product(axes),
            beta,
            damping: Damping::Einstein,
            kind: Kind::Harmonic { kappa, mass, diffusion },
        };
        model.validate()?;
        Ok(model)
    }

    /// Pendulum V = v0 (1 - cos q) on the circle, constant mass and
    /// diffusion.
    pub fn pendulum(v0: f64, mass: f64, diffusion: f64, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let model = ModelSpec {
            name: "pendulum".into(),
            space: PositionSpace::circle(),
            beta,
            damping: Damping::Einstein,
            kind: Kind::Pendulum { v0, mass, diffusion },
        };
        model.validate()?;
        Ok(model)
    }

    /// Pendulum with angle-dependent inertia M(q) = m0 (1 + mu cos q),
    /// |mu| < 1.
    pub fn variable_mass_pendulum(
        v0: f64,
        m0: f64,
        mu: f64,
        diffusion: f64,
        beta: f64,
    ) -> Result<Self> {
        check_beta(beta)?;
        if !mu.is_finite() || mu.abs() >= 1.0 {
            return Err(Error::config(format!(
                "mass modulation must satisfy |mu| < 1, got {mu}"
            )));
        }
        let model = ModelSpec {
            name: "variable-mass-pendulum".into(),
            space: PositionSpace::circle(),
            beta,
            damping: Damping::Einstein,
            kind: Kind::VariableMassPendulum { v0, m0, mu, diffusion },
        };
        model.validate()?;
        Ok(model)
    }

    /// One-dimensional model from uniform samples of V, M and D, connected
    /// by cubic splines (periodic on the circle, natural on a line). The
    /// samples start at the lower edge of the space; on a line the last
    /// sample sits at the upper edge, on a circle one period is covered
    /// without repeating the seam.
    pub fn tabulated(
        space: PositionSpace,
        v_samples: &[f64],
        m_samples: &[f64],
        d_samples: &[f64],
        beta: f64,
    ) -> Result<Self> {
        check_beta(beta)?;
        if space.dim() != 1 {
            return Err(Error::config("tabulated models are one-dimensional"));
        }
        if v_samples.len() != m_samples.len() || v_samples.len() != d_samples.len() {
            return Err(Error::config("tabulated sample arrays must have equal length"));
        }
        let (v, m, d) = match space.axes[0] {
            Axis::Circle => {
                let h = TWO_PI / v_samples.len() as f64;
                (
                    CubicSpline::periodic(0.0, h, v_samples)?,
                    CubicSpline::periodic(0.0, h, m_samples)?,
                    CubicSpline::periodic(0.0, h, d_samples)?,
                )
            }
            Axis::Line { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                    return Err(Error::config("line axis needs hi > lo"));
                }
                let h = (hi - lo) / (v_samples.len() - 1) as f64;
                (
                    CubicSpline::natural(lo, h, v_samples)?,
                    CubicSpline::natural(lo, h, m_samples)?,
                    CubicSpline::natural(lo, h, d_samples)?,
                )
            }
        };
        let model = ModelSpec {
            name: "tabulated".into(),
            space,
            beta,
            damping: Damping::Einstein,
            kind: Kind::Tabulated { v, m, d },
        };
        model.validate()?;
        Ok(model)
    }

    /// Model defined by closures; see [`CustomParts`].
    pub fn custom(space: PositionSpace, beta: f64, parts: CustomParts) -> Result<Self> {
        check_beta(beta)?;
        let model = ModelSpec {
            name: "custom".into(),
            space,
            beta,
            damping: Damping::Einstein,
            kind: Kind::Custom(parts),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_damping(mut self, damping: Damping) -> Result<Self> {
        if let Damping::Constant(f) = &damping {
            let n = self.dim();
            if f.nrows() != n || f.ncols() != n {
                return Err(Error::config("explicit damping matrix has wrong shape"));
            }
            check_psd(f, "damping")?;
        }
        if let Damping::ScaledEinstein(s) = damping {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::config("damping scale must be finite and nonnegative"));
            }
        }
        self.damping = damping;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn space(&self) -> &PositionSpace {
        &self.space
    }
    pub fn dim(&self) -> usize {
        self.space.dim()
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn temperature(&self) -> f64 {
        1.0 / self.beta
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        let q = self.space.wrapped(q);
        match &self.kind {
            Kind::Harmonic { kappa, .. } => 0.5 * kappa * q.iter().map(|x| x * x).sum::<f64>(),
            Kind::Pendulum { v0, .. } | Kind::VariableMassPendulum { v0, .. } => {
                v0 * (1.0 - q[0].cos())
            }
            Kind::Tabulated { v, .. } => v.eval(q[0]),
            Kind::Custom(parts) => (parts.potential)(&q),
        }
    }

    pub fn grad_potential(&self, q: &[f64]) -> DVector<f64> {
        let q = self.space.wrapped(q);
        match &self.kind {
            Kind::Harmonic { kappa, .. } => DVector::from_iterator(q.len(), q.iter().map(|x| kappa * x)),
            Kind::Pendulum { v0, .. } | Kind::VariableMassPendulum { v0, .. } => {
                DVector::from_element(1, v0 * q[0].sin())
            }
            Kind::Tabulated { v, .. } => DVector::from_element(1, v.deriv(q[0])),
            Kind::Custom(parts) => match &parts.grad_potential {
                Some(g) => g(&q),
                None => fd_gradient(|x| (parts.potential)(x), &q),
            },
        }
    }

    pub fn hess_potential(&self, q: &[f64]) -> DMatrix<f64> {
        let q = self.space.wrapped(q);
        let n = q.len();
        match &self.kind {
            Kind::Harmonic { kappa, .. } => DMatrix::identity(n, n) * *kappa,
            Kind::Pendulum { v0, .. } | Kind::VariableMassPendulum { v0, .. } => {
                DMatrix::from_element(1, 1, v0 * q[0].cos())
            }
            Kind::Tabulated { v, .. } => DMatrix::from_element(1, 1, v.deriv2(q[0])),
            Kind::Custom(parts) => match &parts.hess_potential {
                Some(h) => h(&q),
                None => fd_hessian(|x| (parts.potential)(x), &q),
            },
        }
    }

    pub fn mass_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let q = self.space.wrapped(q);
        let n = q.len();
        match &self.kind {
            Kind::Harmonic { mass, .. } => DMatrix::identity(n, n) * *mass,
            Kind::Pendulum { mass, .. } => DMatrix::from_element(1, 1, *mass),
            Kind::VariableMassPendulum { m0, mu, .. } => {
                DMatrix::from_element(1, 1, m0 * (1.0 + mu * q[0].cos()))
            }
            Kind::Tabulated { m, .. } => DMatrix::from_element(1, 1, m.eval(q[0])),
            Kind::Custom(parts) => (parts.mass)(&q),
        }
    }

    /// dM/dq_k.
    pub fn mass_partial(&self, q: &[f64], k: usize) -> DMatrix<f64> {
        let q = self.space.wrapped(q);
        let n = q.len();
        match &self.kind {
            Kind::Harmonic { .. } | Kind::Pendulum { .. } => DMatrix::zeros(n, n),
            Kind::VariableMassPendulum { m0, mu, .. } => {
                DMatrix::from_element(1, 1, -m0 * mu * q[0].sin())
            }
            Kind::Tabulated { m, .. } => DMatrix::from_element(1, 1, m.deriv(q[0])),
            Kind::Custom(parts) => match &parts.mass_partial {
                Some(dm) => dm(&q, k),
                None => fd_matrix_partial(|x| (parts.mass)(x), &q, k),
            },
        }
    }

    pub fn mass_inv(&self, q: &[f64]) -> DMatrix<f64> {
        let m = self.mass_matrix(q);
        m.clone().try_inverse().unwrap_or_else(|| {
            // validate() rejects singular mass; reaching this is a bug.
            panic!("mass matrix not invertible at q = {q:?}")
        })
    }

    /// M_k = M^{-1} (dM/dq_k) M^{-1}, the sensitivity entering the
    /// centrifugal force; equals -d(M^{-1})/dq_k.
    pub fn mass_sensitivity(&self, q: &[f64], k: usize) -> DMatrix<f64> {
        let minv = self.mass_inv(q);
        &minv * self.mass_partial(q, k) * &minv
    }

    pub fn diffusion_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let q = self.space.wrapped(q);
        let n = q.len();
        match &self.kind {
            Kind::Harmonic { diffusion, .. } => DMatrix::identity(n, n) * *diffusion,
            Kind::Pendulum { diffusion, .. } | Kind::VariableMassPendulum { diffusion, .. } => {
                DMatrix::from_element(1, 1, *diffusion)
            }
            Kind::Tabulated { d, .. } => DMatrix::from_element(1, 1, d.eval(q[0])),
            Kind::Custom(parts) => (parts.diffusion)(&q),
        }
    }

    pub fn diffusion_sqrt(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        symmetric_sqrt(&self.diffusion_matrix(q))
    }

    /// Damping matrix F(q); defaults to the fluctuation-dissipation value
    /// (beta/2) D(q).
    pub fn damping_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        match &self.damping {
            Damping::Einstein => self.diffusion_matrix(q) * (0.5 * self.beta),
            Damping::ScaledEinstein(s) => self.diffusion_matrix(q) * (0.5 * self.beta * s),
            Damping::Constant(f) => f.clone(),
        }
    }

    /// Relative departure of the damping from the fluctuation-dissipation
    /// value, ||F - (beta/2) D|| / max(||(beta/2) D||, tiny).
    pub fn einstein_residual(&self, q: &[f64]) -> f64 {
        let fd = self.diffusion_matrix(q) * (0.5 * self.beta);
        let dev = (self.damping_matrix(q) - &fd).norm();
        dev / fd.norm().max(1e-300)
    }

    pub fn kinetic_energy(&self, q: &[f64], p: &[f64]) -> f64 {
        let pv = DVector::from_column_slice(p);
        0.5 * pv.dot(&(self.mass_inv(q) * &pv))
    }

    pub fn hamiltonian(&self, q: &[f64], p: &[f64]) -> EnergySplit {
        let potential = self.potential(q);
        let kinetic = self.kinetic_energy(q, p);
        EnergySplit { potential, kinetic, total: potential + kinetic }
    }

    pub fn velocity(&self, q: &[f64], p: &[f64]) -> DVector<f64> {
        self.mass_inv(q) * DVector::from_column_slice(p)
    }

    pub fn momentum_from_velocity(&self, q: &[f64], v: &[f64]) -> DVector<f64> {
        self.mass_matrix(q) * DVector::from_column_slice(v)
    }

    /// (dH/dq, dH/dp) with the centrifugal correction in the position part.
    pub fn grad_hamiltonian(&self, q: &[f64], p: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let pv = DVector::from_column_slice(p);
        let mut dq = self.grad_potential(q);
        for k in 0..n {
            let mk = self.mass_sensitivity(q, k);
            dq[k] -= 0.5 * pv.dot(&(&mk * &pv));
        }
        let dp = self.mass_inv(q) * pv;
        (dq, dp)
    }

    /// Scalar coefficient bundle at a one-dimensional position: the same
    /// quantities as the matrix accessors without their allocations, for
    /// per-particle hot loops. Panics if the model is not one-dimensional.
    pub fn scalar_coeffs(&self, q: f64) -> ScalarCoeffs {
        assert_eq!(self.dim(), 1, "scalar coefficients need a one-dimensional model");
        let mut qa = [q];
        self.space.wrap(&mut qa);
        let q = qa[0];
        let (v, dv, mass, dm, diffusion) = match &self.kind {
            Kind::Harmonic { kappa, mass, diffusion } => {
                (0.5 * kappa * q * q, kappa * q, *mass, 0.0, *diffusion)
            }
            Kind::Pendulum { v0, mass, diffusion } => {
                (v0 * (1.0 - q.cos()), v0 * q.sin(), *mass, 0.0, *diffusion)
            }
            Kind::VariableMassPendulum { v0, m0, mu, diffusion } => (
                v0 * (1.0 - q.cos()),
                v0 * q.sin(),
                m0 * (1.0 + mu * q.cos()),
                -m0 * mu * q.sin(),
                *diffusion,
            ),
            Kind::Tabulated { v, m, d } => {
                (v.eval(q), v.deriv(q), m.eval(q), m.deriv(q), d.eval(q))
            }
            Kind::Custom(parts) => (
                (parts.potential)(&qa),
                self.grad_potential(&qa)[0],
                (parts.mass)(&qa)[(0, 0)],
                self.mass_partial(&qa, 0)[(0, 0)],
                (parts.diffusion)(&qa)[(0, 0)],
            ),
        };
        let damping = match &self.damping {
            Damping::Einstein => 0.5 * self.beta * diffusion,
            Damping::ScaledEinstein(s) => 0.5 * self.beta * s * diffusion,
            Damping::Constant(f) => f[(0, 0)],
        };
        ScalarCoeffs { potential: v, grad_potential: dv, mass, mass_deriv: dm, diffusion, damping }
    }

    /// Structural checks: finite positive beta, symmetric positive definite
    /// mass, positive semidefinite diffusion and damping, probed on a small
    /// deterministic set of positions.
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        for axis in &self.space.axes {
            if let Axis::Line { lo, hi } = axis {
                if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                    return Err(Error::config("line axis needs finite hi > lo"));
                }
            }
        }
        for q in self.probe_points() {
            let m = self.mass_matrix(&q);
            check_spd(&m, "mass")?;
            let d = self.diffusion_matrix(&q);
            check_psd(&d, "diffusion")?;
            let f = self.damping_matrix(&q);
            check_psd(&f, "damping")?;
            if !self.potential(&q).is_finite() {
                return Err(Error::config(format!("potential not finite at q = {q:?}")));
            }
        }
        Ok(())
    }

    fn probe_points(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let coords: Vec<Vec<f64>> = self
            .space
            .axes
            .iter()
            .map(|axis| match axis {
                Axis::Circle => vec![0.0, 1.1, PI, 4.9],
                Axis::Line { lo, hi } => {
                    vec![*lo, 0.75 * lo + 0.25 * hi, 0.5 * (lo + hi), *hi]
                }
            })
            .collect();
        // Diagonal probes keep the count linear in the dimension.
        (0..4).map(|k| (0..n).map(|i| coords[i][k]).collect()).collect()
    }
}

fn check_beta(beta: f64) -> Result<f64> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::config(format!("inverse temperature must be positive, got {beta}")));
    }
    Ok(1.0 / beta)
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    check_symmetric(m, what)?;
    let eigs = m.clone().symmetric_eigen().eigenvalues;
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() || min <= 0.0 {
        return Err(Error::config(format!(
            "{what} matrix must be positive definite (smallest eigenvalue {min})"
        )));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    check_symmetric(m, what)?;
    let eigs = m.clone().symmetric_eigen().eigenvalues;
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = eigs.iter().fold(0.0_f64, |a, &x| a.max(x.abs())).max(1e-300);
    if min < -1e-12 * scale {
        return Err(Error::config(format!(
            "{what} matrix must be positive semidefinite (smallest eigenvalue {min})"
        )));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::config(format!("{what} matrix must be square")));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-10 * m.norm().max(1e-300) {
        return Err(Error::config(format!("{what} matrix must be symmetric")));
    }
    Ok(())
}

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, q: &[f64]) -> DVector<f64> {
    let n = q.len();
    let mut out = DVector::zeros(n);
    let mut work = q.to_vec();
    for k in 0..n {
        let h = 1e-5 * q[k].abs().max(1.0);
        work[k] = q[k] + h;
        let fp = f(&work);
        work[k] = q[k] - h;
        let fm = f(&work);
        work[k] = q[k];
        out[k] = (fp - fm) / (2.0 * h);
    }
    out
}

fn fd_hessian<F: Fn(&[f64]) -> f64>(f: F, q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let mut out = DMatrix::zeros(n, n);
    let mut work = q.to_vec();
    let f0 = f(q);
    for k in 0..n {
        let hk = 1e-4 * q[k].abs().max(1.0);
        for l in 0..=k {
            let hl = 1e-4 * q[l].abs().max(1.0);
            let val = if k == l {
                work[k] = q[k] + hk;
                let fp = f(&work);
                work[k] = q[k] - hk;
                let fm = f(&work);
                work[k] = q[k];
                (fp - 2.0 * f0 + fm) / (hk * hk)
            } else {
                let mut probe = |sk: f64, sl: f64| {
                    work[k] = q[k] + sk * hk;
                    work[l] = q[l] + sl * hl;
                    let v = f(&work);
                    work[k] = q[k];
                    work[l] = q[l];
                    v
                };
                (probe(1.0, 1.0) - probe(1.0, -1.0) - probe(-1.0, 1.0) + probe(-1.0, -1.0))
                    / (4.0 * hk * hl)
            };
            out[(k, l)] = val;
            out[(l, k)] = val;
        }
    }
    out
}

fn fd_matrix_partial<F: Fn(&[f64]) -> DMatrix<f64>>(f: F, q: &[f64], k: usize) -> DMatrix<f64> {
    let mut work = q.to_vec();
    let h = 1e-5 * q[k].abs().max(1.0);
    work[k] = q[k] + h;
    let mp = f(&work);
    work[k] = q[k] - h;
    let mm = f(&work);
    (mp - mm) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_mass_model() -> ModelSpec {
        // n = 1, V = 0, M(q) = e^q: the sensitivity M_1 = e^{-q} has a
        // clean closed form while staying genuinely position-dependent.
        ModelSpec::custom(
            PositionSpace::line(-2.0, 2.0),
            1.0,
            CustomParts {
                potential: Arc::new(|_| 0.0),
                grad_potential: None,
                hess_potential: None,
                mass: Arc::new(|q: &[f64]| DMatrix::from_element(1, 1, q[0].exp())),
                mass_partial: None,
                diffusion: Arc::new(|_| DMatrix::identity(1, 1)),
            },
        )
        .unwrap()
    }

    #[test]
    fn kinetic_energy_identity_mass_two_dof() {
        let m = ModelSpec::harmonic(2, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(m.kinetic_energy(&[0.3, -0.7], &[1.0, 2.0]), 2.5);
    }

    #[test]
    fn kinetic_energy_scalar_mass() {
        let m = ModelSpec::custom(
            PositionSpace::line(-1.0, 1.0),
            1.0,
            CustomParts {
                potential: Arc::new(|_| 0.0),
                grad_potential: None,
                hess_potential: None,
                mass: Arc::new(|_| DMatrix::from_element(1, 1, 1.5)),
                mass_partial: None,
                diffusion: Arc::new(|_| DMatrix::identity(1, 1)),
            },
        )
        .unwrap();
        // p^2 / (2 M) = 9 / 3
        assert!((m.kinetic_energy(&[0.0], &[3.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn pendulum_energy_at_the_top() {
        let m = ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0).unwrap();
        let e = m.hamiltonian(&[PI], &[0.0]);
        assert!((e.total - 2.0).abs() < 1e-15);
        assert_eq!(e.kinetic, 0.0);
    }

    #[test]
    fn momentum_from_velocity_diagonal_mass() {
        let m = ModelSpec::custom(
            PositionSpace::product(vec![
                Axis::Line { lo: -1.0, hi: 1.0 },
                Axis::Line { lo: -1.0, hi: 1.0 },
            ]),
            1.0,
            CustomParts {
                potential: Arc::new(|_| 0.0),
                grad_potential: None,
                hess_potential: None,
                mass: Arc::new(|_| DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))),
                mass_partial: None,
                diffusion: Arc::new(|_| DMatrix::identity(2, 2)),
            },
        )
        .unwrap();
        let p = m.momentum_from_velocity(&[0.0, 0.0], &[1.0, 1.0]);
        assert!((p[0] - 2.0).abs() < 1e-15 && (p[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mass_sensitivity_modulated_inertia() {
        let m = ModelSpec::variable_mass_pendulum(1.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        // M = 1 + cos(q)/2: at q = pi/2, M = 1 and M' = -1/2, so
        // M_1 = M' / M^2 = -1/2.
        let s = m.mass_sensitivity(&[PI / 2.0], 0)[(0, 0)];
        assert!((s + 0.5).abs() < 1e-14, "sensitivity {s}");
    }

    #[test]
    fn mass_sensitivity_matches_derivative_of_inverse_mass() {
        let m = exp_mass_model();
        for q in [-1.5, -0.3, 0.0, 0.8, 1.9] {
            let s = m.mass_sensitivity(&[q], 0)[(0, 0)];
            assert!((s - (-q).exp()).abs() < 1e-6 * (-q).exp(), "closed form at {q}");
            // M_1 = -d(M^{-1})/dq, checked by finite differences.
            let h = 1e-6;
            let fd = -(((q + h).exp().recip()) - ((q - h).exp().recip())) / (2.0 * h);
            assert!((s - fd).abs() < 1e-6, "fd cross-check at {q}");
        }
    }

    #[test]
    fn grad_hamiltonian_harmonic() {
        let m = ModelSpec::harmonic(1, 2.0, 1.0, 1.0, 1.0).unwrap();
        let (dq, dp) = m.grad_hamiltonian(&[1.0], &[3.0]);
        assert!((dq[0] - 2.0).abs() < 1e-15);
        assert!((dp[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn grad_hamiltonian_centrifugal_term() {
        let m = exp_mass_model();
        // V = 0, M = e^q, p = 2: dH/dq = -p^2 M_1 / 2 = -2 e^{-q}.
        let (dq, dp) = m.grad_hamiltonian(&[0.0], &[2.0]);
        assert!((dq[0] + 2.0).abs() < 1e-6, "dq = {}", dq[0]);
        assert!((dp[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_hamiltonian_matches_finite_differences_all_families() {
        let models = [
            ModelSpec::harmonic(1, 1.7, 0.8, 0.5, 2.0).unwrap(),
            ModelSpec::pendulum(1.3, 0.9, 0.7, 1.5).unwrap(),
            ModelSpec::variable_mass_pendulum(1.0, 1.2, -0.6, 1.0, 1.0).unwrap(),
        ];
        for m in &models {
            for (q, p) in [(0.4, 1.2), (2.8, -0.9), (5.1, 0.3)] {
                let (dq, dp) = m.grad_hamiltonian(&[q], &[p]);
                let h = 1e-6;
                let fdq =
                    (m.hamiltonian(&[q + h], &[p]).total - m.hamiltonian(&[q - h], &[p]).total)
                        / (2.0 * h);
                let fdp =
                    (m.hamiltonian(&[q], &[p + h]).total - m.hamiltonian(&[q], &[p - h]).total)
                        / (2.0 * h);
                assert!((dq[0] - fdq).abs() < 1e-6, "{}: dH/dq at ({q},{p})", m.name());
                assert!((dp[0] - fdp).abs() < 1e-6, "{}: dH/dp at ({q},{p})", m.name());
            }
        }
    }

    #[test]
    fn damping_follows_fluctuation_dissipation() {
        let m = ModelSpec::custom(
            PositionSpace::circle(),
            4.0,
            CustomParts {
                potential: Arc::new(|q: &[f64]| 1.0 - q[0].cos()),
                grad_potential: None,
                hess_potential: None,
                mass: Arc::new(|_| DMatrix::identity(1, 1)),
                mass_partial: None,
                diffusion: Arc::new(|q: &[f64]| {
                    DMatrix::from_element(1, 1, 1.0 + 0.25 * q[0].sin().powi(2))
                }),
            },
        )
        .unwrap();
        // F = (beta/2) D = 2 * 1.25 at q = pi/2.
        let f = m.damping_matrix(&[PI / 2.0])[(0, 0)];
        assert!((f - 2.5).abs() < 1e-12);
        assert!(m.einstein_residual(&[PI / 2.0]) < 1e-14);
    }

    #[test]
    fn scaled_damping_reports_its_departure() {
        let m = ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0)
            .unwrap()
            .with_damping(Damping::ScaledEinstein(1.5))
            .unwrap();
        assert!((m.einstein_residual(&[0.7]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tabulated_model_tracks_its_source() {
        let n = 256;
        let h = TWO_PI / n as f64;
        let qs: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let v: Vec<f64> = qs.iter().map(|q| 1.0 - q.cos()).collect();
        let mm: Vec<f64> = qs.iter().map(|q| 1.0 + 0.3 * q.cos()).collect();
        let d: Vec<f64> = vec![1.0; n];
        let m = ModelSpec::tabulated(PositionSpace::circle(), &v, &mm, &d, 1.0).unwrap();
        for q in [0.3, 2.0, 4.4, 6.0] {
            assert!((m.potential(&[q]) - (1.0 - q.cos())).abs() < 1e-7);
            assert!((m.grad_potential(&[q])[0] - q.sin()).abs() < 1e-5);
            assert!((m.mass_matrix(&[q])[(0, 0)] - (1.0 + 0.3 * q.cos())).abs() < 1e-7);
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(ModelSpec::harmonic(1, -1.0, 1.0, 1.0, 1.0).is_err());
        assert!(ModelSpec::pendulum(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(ModelSpec::pendulum(1.0, 1.0, -0.5, 1.0).is_err());
        assert!(ModelSpec::pendulum(1.0, 1.0, 1.0, 0.0).is_err());
        assert!(ModelSpec::variable_mass_pendulum(1.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(ModelSpec::variable_mass_pendulum(1.0, 1.0, -1.2, 1.0, 1.0).is_err());
    }

    #[test]
    fn wrap_is_idempotent_and_canonical() {
        let space = PositionSpace::circle();
        for q in [0.0, 1.0, PI, 6.2, -0.1, 7.0, -12.9, 100.0] {
            let w = space.wrapped(&[q]);
            assert!((0.0..TWO_PI).contains(&w[0]), "wrap({q}) = {}", w[0]);
            let ww = space.wrapped(&w);
            assert_eq!(w[0].to_bits(), ww[0].to_bits(), "idempotence at {q}");
        }
    }

    #[test]
    fn wrapped_states_have_identical_energies() {
        let m = ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0).unwrap();
        let space = PositionSpace::circle();
        for q in [0.0, 0.5, 2.0, PI, 5.5] {
            // A canonical coordinate evaluates identically whether or not
            // it passes through the wrap again.
            let w = space.wrapped(&[q]);
            assert_eq!(
                m.hamiltonian(&[q], &[0.4]).total.to_bits(),
                m.hamiltonian(&w, &[0.4]).total.to_bits()
            );
            // Shifting by a full period changes the energy only through
            // the rounding of q + 2 pi itself.
            let shifted = m.hamiltonian(&[q + TWO_PI], &[0.4]).total;
            let base = m.hamiltonian(&[q], &[0.4]).total;
            assert!((shifted - base).abs() <= 8.0 * f64::EPSILON * (1.0 + base.abs()));
        }
    }

    #[test]
    fn scalar_coefficients_match_matrix_accessors() {
        let vmp = ModelSpec::variable_mass_pendulum(1.2, 1.0, 0.4, 0.8, 2.0).unwrap();
        let tab = {
            let qs: Vec<f64> = (0..64).map(|i| TWO_PI * i as f64 / 64.0).collect();
            let v: Vec<f64> = qs.iter().map(|q| 1.0 - q.cos()).collect();
            let m: Vec<f64> = qs.iter().map(|q| 1.0 + 0.3 * (2.0 * q).sin()).collect();
            let d: Vec<f64> = qs.iter().map(|q| 0.5 + 0.2 * q.cos()).collect();
            ModelSpec::tabulated(PositionSpace::circle(), &v, &m, &d, 1.5).unwrap()
        };
        let models = [
            ModelSpec::harmonic(1, 2.0, 0.7, 1.3, 1.0).unwrap(),
            ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0).unwrap(),
            vmp,
            tab,
            exp_mass_model(),
            ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0)
                .unwrap()
                .with_damping(Damping::Constant(DMatrix::from_element(1, 1, 0.3)))
                .unwrap(),
        ];
        for m in &models {
            for k in 0..9 {
                let q = -1.9 + 0.45 * k as f64;
                let c = m.scalar_coeffs(q);
                // Same expressions evaluated through both routes: the
                // agreement must be exact, not merely close.
                assert_eq!(c.potential.to_bits(), m.potential(&[q]).to_bits());
                assert_eq!(c.grad_potential.to_bits(), m.grad_potential(&[q])[0].to_bits());
                assert_eq!(c.mass.to_bits(), m.mass_matrix(&[q])[(0, 0)].to_bits());
                assert_eq!(c.mass_deriv.to_bits(), m.mass_partial(&[q], 0)[(0, 0)].to_bits());
                assert_eq!(c.diffusion.to_bits(), m.diffusion_matrix(&[q])[(0, 0)].to_bits());
                assert_eq!(c.damping.to_bits(), m.damping_matrix(&[q])[(0, 0)].to_bits());
                let p = 0.8;
                let (dq, _) = m.grad_hamiltonian(&[q], &[p]);
                assert!((c.grad_hamiltonian(p) - dq[0]).abs() <= 1e-14 * (1.0 + dq[0].abs()));
                assert!(
                    (c.kinetic(p) - m.kinetic_energy(&[q], &[p])).abs()
                        <= 1e-14 * (1.0 + c.kinetic(p).abs())
                );
            }
        }
    }
}
