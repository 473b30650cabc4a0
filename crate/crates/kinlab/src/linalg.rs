//! Dense linear-algebra support: a real nonsymmetric eigensolver with
//! eigenvectors (Householder reduction to Hessenberg form followed by the
//! Martin-Wilkinson double-shift QR, the EISPACK `orthes`/`hqr2` pair),
//! a symmetric positive square root, and polynomial least squares.
//!
//! The eigensolver is the classic algorithm rather than a binding so the
//! crate stays self-contained; its results are cross-checked in tests
//! against an independent Schur implementation.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Eigendecomposition of a real dense matrix.
///
/// Complex conjugate pairs occupy adjacent slots k, k+1 with `im[k] > 0 >
/// im[k+1]`; columns k and k+1 of `vectors` then hold the real and
/// imaginary parts of the eigenvector belonging to the eigenvalue with
/// positive imaginary part, and its conjugate is obtained by flipping the
/// sign of the imaginary column.
pub struct DenseEigen {
    pub n: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    /// Row-major n x n, columns are (components of) eigenvectors.
    pub vectors: Vec<f64>,
}

impl DenseEigen {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::config("eigensolver needs a square nonempty matrix"));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("eigensolver input contains non-finite entries"));
        }
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = a[(i, j)];
            }
        }
        let mut v = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        let mut e = vec![0.0; n];
        orthes(n, &mut h, &mut v);
        hqr2(n, &mut h, &mut v, &mut d, &mut e)?;
        Ok(DenseEigen { n, re: d, im: e, vectors: v })
    }

    /// Eigenvector k as (real part, imaginary part).
    pub fn eigenvector(&self, k: usize) -> (DVector<f64>, DVector<f64>) {
        let n = self.n;
        let col = |j: usize| DVector::from_fn(n, |i, _| self.vectors[i * n + j]);
        if self.im[k] > 0.0 {
            (col(k), col(k + 1))
        } else if self.im[k] < 0.0 {
            (col(k - 1), -col(k))
        } else {
            (col(k), DVector::zeros(n))
        }
    }

    /// Indices sorted by a key function on (re, im).
    pub fn order_by<K: Fn(f64, f64) -> f64>(&self, key: K) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|&i, &j| {
            key(self.re[i], self.im[i])
                .partial_cmp(&key(self.re[j], self.im[j]))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    }

    pub fn spectral_radius(&self) -> f64 {
        (0..self.n).map(|k| self.re[k].hypot(self.im[k])).fold(0.0, f64::max)
    }
}

/// Householder reduction of h to upper Hessenberg form, accumulating the
/// orthogonal transformation in v.
fn orthes(nn: usize, h: &mut [f64], v: &mut [f64]) {
    if nn < 3 {
        for i in 0..nn {
            for j in 0..nn {
                v[i * nn + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        return;
    }
    let low = 0usize;
    let high = nn - 1;
    let mut ort = vec![0.0; nn];

    for m in (low + 1)..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[i * nn + (m - 1)].abs();
        }
        if scale != 0.0 {
            let mut hh = 0.0;
            for i in (m..=high).rev() {
                ort[i] = h[i * nn + (m - 1)] / scale;
                hh += ort[i] * ort[i];
            }
            let mut g = hh.sqrt();
            if ort[m] > 0.0 {
                g = -g;
            }
            let hh = hh - ort[m] * g;
            ort[m] -= g;

            for j in m..nn {
                let mut f = 0.0;
                for i in (m..=high).rev() {
                    f += ort[i] * h[i * nn + j];
                }
                f /= hh;
                for i in m..=high {
                    h[i * nn + j] -= f * ort[i];
                }
            }
            for i in 0..=high {
                let mut f = 0.0;
                for j in (m..=high).rev() {
                    f += ort[j] * h[i * nn + j];
                }
                f /= hh;
                for j in m..=high {
                    h[i * nn + j] -= f * ort[j];
                }
            }
            ort[m] *= scale;
            h[m * nn + (m - 1)] = scale * g;
        }
    }

    for i in 0..nn {
        for j in 0..nn {
            v[i * nn + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    for m in ((low + 1)..high).rev() {
        if h[m * nn + (m - 1)] != 0.0 {
            for i in (m + 1)..=high {
                ort[i] = h[i * nn + (m - 1)];
            }
            for j in m..=high {
                let mut g = 0.0;
                for i in m..=high {
                    g += ort[i] * v[i * nn + j];
                }
                // Double division avoids possible underflow.
                g = (g / ort[m]) / h[m * nn + (m - 1)];
                for i in m..=high {
                    v[i * nn + j] += g * ort[i];
                }
            }
        }
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

/// Double-shift QR on a Hessenberg matrix with Schur-vector accumulation and
/// eigenvector back-substitution.
#[allow(clippy::needless_range_loop)]
fn hqr2(nn: usize, h: &mut [f64], v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let ni = nn as isize;
    let low: isize = 0;
    let high: isize = ni - 1;
    let eps = 2.0_f64.powi(-52);
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut t, mut w, mut x, mut y);

    macro_rules! hm {
        ($i:expr, $j:expr) => {
            h[($i) as usize * nn + ($j) as usize]
        };
    }
    macro_rules! vm {
        ($i:expr, $j:expr) => {
            v[($i) as usize * nn + ($j) as usize]
        };
    }

    let mut norm = 0.0;
    for i in 0..ni {
        for j in (i - 1).max(0)..ni {
            norm += hm!(i, j).abs();
        }
    }

    let mut n = ni - 1;
    let mut iter = 0;
    while n >= low {
        // Look for a single small subdiagonal element.
        let mut l = n;
        while l > low {
            s = hm!(l - 1, l - 1).abs() + hm!(l, l).abs();
            if s == 0.0 {
                s = norm;
            }
            if hm!(l, l - 1).abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            hm!(n, n) += exshift;
            d[n as usize] = hm!(n, n);
            e[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found.
            w = hm!(n, n - 1) * hm!(n - 1, n);
            p = (hm!(n - 1, n - 1) - hm!(n, n)) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            hm!(n, n) += exshift;
            hm!(n - 1, n - 1) += exshift;
            x = hm!(n, n);
            if q >= 0.0 {
                // Real pair.
                z = if p >= 0.0 { p + z } else { p - z };
                d[(n - 1) as usize] = x + z;
                d[n as usize] = d[(n - 1) as usize];
                if z != 0.0 {
                    d[n as usize] = x - w / z;
                }
                e[(n - 1) as usize] = 0.0;
                e[n as usize] = 0.0;
                x = hm!(n, n - 1);
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in (n - 1)..ni {
                    z = hm!(n - 1, j);
                    hm!(n - 1, j) = q * z + p * hm!(n, j);
                    hm!(n, j) = q * hm!(n, j) - p * z;
                }
                for i in 0..=n {
                    z = hm!(i, n - 1);
                    hm!(i, n - 1) = q * z + p * hm!(i, n);
                    hm!(i, n) = q * hm!(i, n) - p * z;
                }
                for i in low..=high {
                    z = vm!(i, n - 1);
                    vm!(i, n - 1) = q * z + p * vm!(i, n);
                    vm!(i, n) = q * vm!(i, n) - p * z;
                }
            } else {
                // Complex pair.
                d[(n - 1) as usize] = x + p;
                d[n as usize] = x + p;
                e[(n - 1) as usize] = z;
                e[n as usize] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet; form a shift.
            x = hm!(n, n);
            y = 0.0;
            w = 0.0;
            if l < n {
                y = hm!(n - 1, n - 1);
                w = hm!(n, n - 1) * hm!(n - 1, n);
            }
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    hm!(i, i) -= x;
                }
                s = hm!(n, n - 1).abs() + hm!(n - 1, n - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        hm!(i, i) -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = 0.964;
                    w = 0.964;
                }
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::numerical("QR iteration failed to converge"));
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                z = hm!(m, m);
                r = x - z;
                s = y - z;
                p = (r * s - w) / hm!(m + 1, m) + hm!(m, m + 1);
                q = hm!(m + 1, m + 1) - z - r - s;
                r = hm!(m + 2, m + 1);
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if hm!(m, m - 1).abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (hm!(m - 1, m - 1).abs() + z.abs() + hm!(m + 1, m + 1).abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=n {
                hm!(i, i - 2) = 0.0;
                if i > m + 2 {
                    hm!(i, i - 3) = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            for k in m..n {
                let notlast = k != n - 1;
                if k != m {
                    p = hm!(k, k - 1);
                    q = hm!(k + 1, k - 1);
                    r = if notlast { hm!(k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        hm!(k, k - 1) = -s * x;
                    } else if l != m {
                        hm!(k, k - 1) = -hm!(k, k - 1);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..ni {
                        p = hm!(k, j) + q * hm!(k + 1, j);
                        if notlast {
                            p += r * hm!(k + 2, j);
                            hm!(k + 2, j) -= p * z;
                        }
                        hm!(k, j) -= p * x;
                        hm!(k + 1, j) -= p * y;
                    }
                    for i in 0..=n.min(k + 3) {
                        p = x * hm!(i, k) + y * hm!(i, k + 1);
                        if notlast {
                            p += z * hm!(i, k + 2);
                            hm!(i, k + 2) -= p * r;
                        }
                        hm!(i, k) -= p;
                        hm!(i, k + 1) -= p * q;
                    }
                    for i in low..=high {
                        p = x * vm!(i, k) + y * vm!(i, k + 1);
                        if notlast {
                            p += z * vm!(i, k + 2);
                            vm!(i, k + 2) -= p * r;
                        }
                        vm!(i, k) -= p;
                        vm!(i, k + 1) -= p * q;
                    }
                }
            }
        }
    }

    // Back-substitution on the quasi-triangular matrix.
    if norm == 0.0 {
        return Ok(());
    }
    for n in (0..ni).rev() {
        p = d[n as usize];
        q = e[n as usize];
        if q == 0.0 {
            // Real eigenvector.
            let mut l = n;
            hm!(n, n) = 1.0;
            for i in (0..n).rev() {
                w = hm!(i, i) - p;
                r = 0.0;
                for j in l..=n {
                    r += hm!(i, j) * hm!(j, n);
                }
                if e[i as usize] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        if w != 0.0 {
                            hm!(i, n) = -r / w;
                        } else {
                            hm!(i, n) = -r / (eps * norm);
                        }
                    } else {
                        // Solve the real 2x2 system of a conjugate pair row.
                        x = hm!(i, i + 1);
                        y = hm!(i + 1, i);
                        q = (d[i as usize] - p) * (d[i as usize] - p)
                            + e[i as usize] * e[i as usize];
                        t = (x * s - z * r) / q;
                        hm!(i, n) = t;
                        if x.abs() > z.abs() {
                            hm!(i + 1, n) = (-r - w * t) / x;
                        } else {
                            hm!(i + 1, n) = (-s - y * t) / z;
                        }
                    }
                    // Overflow control.
                    t = hm!(i, n).abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            hm!(j, n) /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            // Complex eigenvector; the pair occupies columns n-1 and n.
            let mut l = n - 1;
            if hm!(n, n - 1).abs() > hm!(n - 1, n).abs() {
                hm!(n - 1, n - 1) = q / hm!(n, n - 1);
                hm!(n - 1, n) = -(hm!(n, n) - p) / hm!(n, n - 1);
            } else {
                let (cr, ci) = cdiv(0.0, -hm!(n - 1, n), hm!(n - 1, n - 1) - p, q);
                hm!(n - 1, n - 1) = cr;
                hm!(n - 1, n) = ci;
            }
            hm!(n, n - 1) = 0.0;
            hm!(n, n) = 1.0;
            for i in (0..=(n - 2)).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += hm!(i, j) * hm!(j, n - 1);
                    sa += hm!(i, j) * hm!(j, n);
                }
                w = hm!(i, i) - p;
                if e[i as usize] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        hm!(i, n - 1) = cr;
                        hm!(i, n) = ci;
                    } else {
                        x = hm!(i, i + 1);
                        y = hm!(i + 1, i);
                        let mut vr = (d[i as usize] - p) * (d[i as usize] - p)
                            + e[i as usize] * e[i as usize]
                            - q * q;
                        let vi = (d[i as usize] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps
                                * norm
                                * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        hm!(i, n - 1) = cr;
                        hm!(i, n) = ci;
                        if x.abs() > z.abs() + q.abs() {
                            hm!(i + 1, n - 1) =
                                (-ra - w * hm!(i, n - 1) + q * hm!(i, n)) / x;
                            hm!(i + 1, n) = (-sa - w * hm!(i, n) - q * hm!(i, n - 1)) / x;
                        } else {
                            let (cr, ci) =
                                cdiv(-r - y * hm!(i, n - 1), -s - y * hm!(i, n), z, q);
                            hm!(i + 1, n - 1) = cr;
                            hm!(i + 1, n) = ci;
                        }
                    }
                    t = hm!(i, n - 1).abs().max(hm!(i, n).abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            hm!(j, n - 1) /= t;
                            hm!(j, n) /= t;
                        }
                    }
                }
            }
        }
    }

    // Back-transform to eigenvectors of the original matrix.
    for j in (low..ni).rev() {
        for i in low..=high {
            z = 0.0;
            for k in low..=j.min(high) {
                z += vm!(i, k) * hm!(k, j);
            }
            vm!(i, j) = z;
        }
    }
    Ok(())
}

/// Symmetric positive semidefinite square root via spectral decomposition.
/// Negative eigenvalues below `-1e-12 * max` are rejected; small negative
/// roundoff is clamped to zero.
pub fn symmetric_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let sym = 0.5 * (a + a.transpose());
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    let mut roots = DVector::zeros(n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-12 * max.max(1e-300) {
            return Err(Error::numerical(format!(
                "matrix is not positive semidefinite (eigenvalue {lam})"
            )));
        }
        roots[k] = lam.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Least-squares polynomial fit y ~ sum c_k t^k, degree `deg`. Returns the
/// coefficients (ascending powers) and the coefficient of determination.
/// The abscissa is internally rescaled for conditioning.
pub fn polyfit(t: &[f64], y: &[f64], deg: usize) -> Result<(Vec<f64>, f64)> {
    let m = t.len();
    if y.len() != m || m < deg + 1 {
        return Err(Error::config("polyfit: need at least deg+1 samples"));
    }
    let scale = t.iter().fold(0.0_f64, |a, &x| a.max(x.abs())).max(1e-300);
    let mut vand = DMatrix::zeros(m, deg + 1);
    for i in 0..m {
        let u = t[i] / scale;
        let mut pw = 1.0;
        for k in 0..=deg {
            vand[(i, k)] = pw;
            pw *= u;
        }
    }
    let rhs = DVector::from_column_slice(y);
    let svd = vand.clone().svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::numerical(format!("polyfit solve failed: {e}")))?;
    let fitted = &vand * &sol;
    let mean = y.iter().sum::<f64>() / m as f64;
    let ss_res: f64 = (0..m).map(|i| (y[i] - fitted[i]).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let mut coeffs = Vec::with_capacity(deg + 1);
    let mut pw = 1.0;
    for k in 0..=deg {
        coeffs.push(sol[k] / pw);
        pw *= scale;
    }
    Ok((coeffs, r2))
}
