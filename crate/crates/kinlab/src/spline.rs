//! Cubic splines on uniform grids, natural and periodic, with first and
//! second derivatives. Backs the tabulated model family.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    /// Second derivatives at the nodes.
    m: Vec<f64>,
    periodic: bool,
}

impl CubicSpline {
    /// Natural spline (zero second derivative at both ends) through uniform
    /// samples `y` starting at `x0` with spacing `h`.
    pub fn natural(x0: f64, h: f64, y: &[f64]) -> Result<Self> {
        let n = y.len();
        if n < 4 || !h.is_finite() || h <= 0.0 {
            return Err(Error::config("spline needs >= 4 nodes and positive spacing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![4.0; k];
            let mut rhs: Vec<f64> = (1..n - 1)
                .map(|i| 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]) / (h * h))
                .collect();
            // Thomas elimination, off-diagonals are all 1.
            for i in 1..k {
                let w = 1.0 / diag[i - 1];
                diag[i] -= w;
                let prev = rhs[i - 1];
                rhs[i] -= w * prev;
            }
            m[n - 2] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
            }
        }
        Ok(CubicSpline { x0, h, y: y.to_vec(), m, periodic: false })
    }

    /// Periodic spline: `y` holds one full period, the sample at `x0 + n h`
    /// is implicitly `y[0]`.
    pub fn periodic(x0: f64, h: f64, y: &[f64]) -> Result<Self> {
        let n = y.len();
        if n < 4 || !h.is_finite() || h <= 0.0 {
            return Err(Error::config("spline needs >= 4 nodes and positive spacing"));
        }
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let prev = y[(i + n - 1) % n];
                let next = y[(i + 1) % n];
                6.0 * (prev - 2.0 * y[i] + next) / (h * h)
            })
            .collect();
        let m = solve_cyclic_tridiagonal(4.0, 1.0, &rhs)?;
        Ok(CubicSpline { x0, h, y: y.to_vec(), m, periodic: true })
    }

    fn locate(&self, x: f64) -> (usize, usize, f64) {
        let n = self.y.len();
        if self.periodic {
            let period = n as f64 * self.h;
            let mut t = (x - self.x0).rem_euclid(period) / self.h;
            if t >= n as f64 {
                t = 0.0;
            }
            let i = (t.floor() as usize).min(n - 1);
            (i, (i + 1) % n, t - i as f64)
        } else {
            let t = ((x - self.x0) / self.h).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            (i, i + 1, t - i as f64)
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (i, j, t) = self.locate(x);
        let (h, u) = (self.h, 1.0 - t);
        let h2 = h * h;
        self.m[i] * u * u * u * h2 / 6.0
            + self.m[j] * t * t * t * h2 / 6.0
            + (self.y[i] - self.m[i] * h2 / 6.0) * u
            + (self.y[j] - self.m[j] * h2 / 6.0) * t
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let (i, j, t) = self.locate(x);
        let (h, u) = (self.h, 1.0 - t);
        -self.m[i] * u * u * h / 2.0
            + self.m[j] * t * t * h / 2.0
            + (self.y[j] - self.y[i]) / h
            - (self.m[j] - self.m[i]) * h / 6.0
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        let (i, j, t) = self.locate(x);
        self.m[i] * (1.0 - t) + self.m[j] * t
    }
}

/// Solves (b on diagonal, a on both off-diagonals, cyclic corners) x = rhs
/// by Sherman-Morrison on top of the Thomas algorithm.
fn solve_cyclic_tridiagonal(b: f64, a: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let gamma = -b;
    // Modified diagonal removes the corner entries.
    let solve_tri = |d0: f64, dn: f64, r: &[f64]| -> Result<Vec<f64>> {
        let mut diag = vec![b; n];
        diag[0] = d0;
        diag[n - 1] = dn;
        let mut c = r.to_vec();
        for i in 1..n {
            if diag[i - 1].abs() < 1e-300 {
                return Err(Error::numerical("singular tridiagonal system"));
            }
            let w = a / diag[i - 1];
            diag[i] -= w * a;
            let prev = c[i - 1];
            c[i] -= w * prev;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = c[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (c[i] - a * x[i + 1]) / diag[i];
        }
        Ok(x)
    };
    let d0 = b - gamma;
    let dn = b - a * a / gamma;
    let x = solve_tri(d0, dn, rhs)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = a;
    let z = solve_tri(d0, dn, &u)?;
    let vx = x[0] + a / gamma * x[n - 1];
    let vz = z[0] + a / gamma * z[n - 1];
    let factor = vx / (1.0 + vz);
    Ok((0..n).map(|i| x[i] - factor * z[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn periodic_spline_reproduces_cosine_and_derivatives() {
        let n = 256;
        let h = 2.0 * PI / n as f64;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * h).cos()).collect();
        let s = CubicSpline::periodic(0.0, h, &y).unwrap();
        for k in 0..40 {
            let q = 0.137 + k as f64 * 0.15;
            assert!((s.eval(q) - q.cos()).abs() < 2e-8, "value at {q}");
            assert!((s.deriv(q) + q.sin()).abs() < 2e-6, "derivative at {q}");
            assert!((s.deriv2(q) + q.cos()).abs() < 2e-4, "curvature at {q}");
        }
        // Periodicity: shifting the query by one period changes nothing
        // beyond roundoff in the argument reduction.
        assert!((s.eval(1.0 + 2.0 * PI) - s.eval(1.0)).abs() < 1e-12);
    }

    #[test]
    fn natural_spline_interpolates_nodes_exactly() {
        let y = [1.0, -0.5, 2.0, 0.25, 1.5, -1.0];
        let s = CubicSpline::natural(-1.0, 0.4, &y).unwrap();
        for (i, v) in y.iter().enumerate() {
            let x = -1.0 + 0.4 * i as f64;
            assert!((s.eval(x) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn natural_spline_fourth_order_in_the_interior() {
        let err = |n: usize| {
            let h = 2.0 / (n - 1) as f64;
            let y: Vec<f64> = (0..n).map(|i| (-1.0 + i as f64 * h).exp()).collect();
            let s = CubicSpline::natural(-1.0, h, &y).unwrap();
            // Probe away from the natural-boundary layers.
            (-40..40)
                .map(|k| {
                    let x = k as f64 * 0.01;
                    (s.eval(x) - x.exp()).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(65) / err(129);
        assert!(ratio > 10.0, "interior refinement ratio {ratio}");
    }
}
