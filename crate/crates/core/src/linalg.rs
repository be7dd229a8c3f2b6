//! Small dense linear-algebra helpers over `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

/// Solve `a x = b` by LU; `None` when `a` is singular or the result is not finite.
pub fn solve(a: &Mat, b: &Vect) -> Option<Vect> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn inverse(a: &Mat) -> Option<Mat> {
    let inv = a.clone().try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Clamp negative eigenvalues at zero. Returns the projected matrix and
/// whether any eigenvalue was clamped.
pub fn psd_project(a: &Mat) -> (Mat, bool) {
    let s = symmetrize(a);
    let eig = SymmetricEigen::new(s.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().all(|&v| v >= -1e-14 * scale) {
        return (s, false);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let r = &eig.eigenvectors * Mat::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (symmetrize(&r), true)
}

/// Lower Cholesky factor of a PSD matrix after adding `jitter` to the diagonal.
pub fn cholesky_jitter(a: &Mat, jitter: f64) -> Option<Mat> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    m.cholesky().map(|c| c.l())
}

/// Nearest correlation matrix that is positive definite: alternating
/// projections between the PSD cone (eigenvalue floor) and the unit-diagonal
/// set. Inputs that are already positive definite are returned unchanged.
pub fn nearest_pd_correlation(a: &Mat, floor: f64) -> Option<Mat> {
    let s = symmetrize(a);
    if is_pd(&s, floor) {
        return Some(s);
    }
    let n = s.nrows();
    let mut y = s.clone();
    let mut ds = Mat::zeros(n, n);
    for _ in 0..500 {
        let r = &y - &ds;
        let eig = SymmetricEigen::new(symmetrize(&r));
        let clamped = eig.eigenvalues.map(|v| v.max(2.0 * floor));
        let x = &eig.eigenvectors * Mat::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        ds = &x - &r;
        y = symmetrize(&x);
        for i in 0..n {
            y[(i, i)] = 1.0;
        }
        if is_pd(&y, floor) {
            return Some(y);
        }
    }
    None
}

pub fn is_pd(a: &Mat, floor: f64) -> bool {
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().all(|&v| v > floor)
}

/// Weighted least-squares fit with HC0 sandwich covariance.
#[derive(Clone, Debug)]
pub struct WlsFit {
    pub coef: Vect,
    pub resid: Vect,
    pub cov_hc0: Mat,
    /// Set when the design was rank deficient and a ridge penalty was used.
    pub ridge_fallback: bool,
}

/// Weighted least squares via QR of the sqrt-weight scaled design. If the
/// scaled design is numerically rank deficient, falls back to the ridge
/// system `(X'WX + ridge I) b = X'Wy`.
pub fn wls(x: &Mat, y: &Vect, w: &Vect, ridge: f64) -> Option<WlsFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n < p || p == 0 {
        return None;
    }
    let sw = w.map(|v| v.sqrt());
    let mut xs = x.clone();
    for i in 0..n {
        for j in 0..p {
            xs[(i, j)] *= sw[i];
        }
    }
    let ys = y.component_mul(&sw);
    let qr = xs.clone().qr();
    let r = qr.r();
    let rmax = (0..p).fold(0.0f64, |m, i| m.max(r[(i, i)].abs()));
    let full_rank = (0..p).all(|i| r[(i, i)].abs() > 1e-10 * rmax.max(1e-300));
    let (coef, bread, ridge_fallback) = if full_rank {
        let mut qty = ys.clone();
        qr.q_tr_mul(&mut qty);
        let rinv = r.clone().try_inverse()?;
        let coef = &rinv * qty.rows(0, p);
        let bread = &rinv * rinv.transpose();
        (coef, bread, false)
    } else {
        let mut xtx = xs.transpose() * &xs;
        for i in 0..p {
            xtx[(i, i)] += ridge;
        }
        let bread = inverse(&xtx)?;
        let coef = &bread * (xs.transpose() * &ys);
        (coef, bread, true)
    };
    let resid = y - x * &coef;
    let mut meat = Mat::zeros(p, p);
    for i in 0..n {
        let e = sw[i] * resid[i];
        let row = xs.row(i);
        let sc = e * e;
        for a in 0..p {
            let ra = row[a] * sc;
            for b in 0..p {
                meat[(a, b)] += ra * row[b];
            }
        }
    }
    let cov = symmetrize(&(&bread * meat * &bread));
    Some(WlsFit { coef, resid, cov_hc0: cov, ridge_fallback })
}
