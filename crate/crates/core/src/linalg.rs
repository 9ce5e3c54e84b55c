//! Small dense helpers shared by the model fits.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a Gram matrix is treated as singular.
pub const RANK_TOL: f64 = 1e-10;

/// Weighted least squares. Returns `None` when `XᵀWX` is numerically singular.
pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Option<DVector<f64>> {
    let (n, p) = x.shape();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            xtwy[a] += xa * y[i];
            for b in 0..=a {
                xtwx[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    solve_spd(&xtwx, &xtwy)
}

/// Solves `A b = rhs` for symmetric positive definite `A`, rejecting
/// numerically singular systems.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if !is_well_conditioned(a) {
        return None;
    }
    let chol = a.clone().cholesky()?;
    Some(chol.solve(rhs))
}

/// Cholesky pivots relative to the diagonal must stay above [`RANK_TOL`].
pub fn is_well_conditioned(a: &DMatrix<f64>) -> bool {
    let Some(chol) = a.clone().cholesky() else {
        return false;
    };
    let l = chol.l_dirty();
    (0..a.nrows()).all(|i| {
        let d = a[(i, i)];
        d > 0.0 && l[(i, i)] * l[(i, i)] > RANK_TOL * d
    })
}

/// In-place Cholesky solve of a small `q × q` SPD system stored row-major.
/// `a` is overwritten with the factor; returns `false` if not (numerically)
/// positive definite.
pub fn small_spd_solve(a: &mut [f64], b: &mut [f64], q: usize) -> bool {
    for j in 0..q {
        let diag0 = a[j * q + j];
        let mut d = diag0;
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > RANK_TOL * diag0.abs()) || d <= 0.0 {
            return false;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in (j + 1)..q {
            let mut s = a[i * q + j];
            for k in 0..j {
                s -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = s / d;
        }
    }
    for i in 0..q {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * q + k] * b[k];
        }
        b[i] = s / a[i * q + i];
    }
    for i in (0..q).rev() {
        let mut s = b[i];
        for k in (i + 1)..q {
            s -= a[k * q + i] * b[k];
        }
        b[i] = s / a[i * q + i];
    }
    true
}

/// Brent's method for minimising `f` on `[a, b]`.
pub fn brent_minimize(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol + 4.0 * f64::EPSILON * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}
