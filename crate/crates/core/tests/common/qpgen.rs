//! Random QP instances with known solutions, plus a dense oracle that solves
//! the equality-constrained problem on a given active set by null-space
//! elimination.

use nalgebra::{DMatrix, DVector};
use pvko::qp::QpProblem;
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Planted {
    pub qp: QpProblem,
    pub p: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// Rows active at the optimum and the bound each one sits on.
    pub active: Vec<(usize, f64)>,
}

fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Strictly convex QP with at most `max_vars` variables whose optimum and
/// active set are fixed in advance through the multipliers.
pub fn planted_qp(rng: &mut impl Rng, max_vars: usize) -> Planted {
    let n = rng.gen_range(2..=max_vars);
    let m = rng.gen_range(1..=2 * n);
    let f = normal_matrix(rng, n, n);
    let p = f.transpose() * &f + DMatrix::identity(n, n) * 0.1;
    let a = normal_matrix(rng, m, n);
    let x = normal_vector(rng, n);
    let ax = &a * &x;
    let mut y = DVector::zeros(m);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    let mut active = Vec::new();
    for i in 0..m {
        let gap = rng.gen_range(0.5..2.0);
        let mult = rng.gen_range(0.1..2.0);
        // Keep the active rows independent by never exceeding n of them.
        let kind = if active.len() >= n { 3 } else { rng.gen_range(0..4) };
        match kind {
            0 => {
                l[i] = ax[i];
                u[i] = ax[i];
                y[i] = if rng.gen_bool(0.5) { mult } else { -mult };
                active.push((i, ax[i]));
            }
            1 => {
                l[i] = ax[i] - gap;
                u[i] = ax[i];
                y[i] = mult;
                active.push((i, ax[i]));
            }
            2 => {
                l[i] = ax[i];
                u[i] = if rng.gen_bool(0.3) { f64::INFINITY } else { ax[i] + gap };
                y[i] = -mult;
                active.push((i, ax[i]));
            }
            _ => {
                l[i] = if rng.gen_bool(0.3) {
                    f64::NEG_INFINITY
                } else {
                    ax[i] - gap
                };
                u[i] = ax[i] + rng.gen_range(0.5..2.0);
            }
        }
    }
    let q = -(&p * &x) - a.transpose() * &y;
    Planted {
        qp: QpProblem::dense(&p, q, &a, l, u).expect("valid instance"),
        p,
        a,
        active,
    }
}

/// Minimizes `½ x'Px + q'x` subject to `A_i x = b_i` over the given rows.
/// Returns the primal solution and the full multiplier vector.
pub fn elimination_oracle(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    active: &[(usize, f64)],
) -> (DVector<f64>, DVector<f64>) {
    let n = p.nrows();
    let k = active.len();
    let mut aa = DMatrix::zeros(k, n);
    let mut b = DVector::zeros(k);
    for (r, &(i, bound)) in active.iter().enumerate() {
        aa.row_mut(r).copy_from(&a.row(i));
        b[r] = bound;
    }
    let (xp, z) = if k == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        // Orthonormal range of A_A' from QR, completed to a basis of R^n; the
        // trailing columns span the null space of A_A.
        let xp = aa.clone().pseudo_inverse(1e-12).expect("pseudo-inverse") * &b;
        let basis = complete_basis(&aa.transpose().qr().q(), n);
        (xp, basis.columns(k, n - k).into_owned())
    };
    let reduced = z.transpose() * p * &z;
    let rhs = -(z.transpose() * (p * &xp + q));
    let zz = if reduced.nrows() == 0 {
        DVector::zeros(0)
    } else {
        reduced
            .cholesky()
            .expect("reduced Hessian is positive definite")
            .solve(&rhs)
    };
    let x = &xp + &z * zz;
    let grad = p * &x + q;
    let mut y = DVector::zeros(a.nrows());
    if k > 0 {
        let ya = aa.transpose().pseudo_inverse(1e-12).expect("pseudo-inverse") * (-&grad);
        for (r, &(i, _)) in active.iter().enumerate() {
            y[i] = ya[r];
        }
    }
    (x, y)
}

/// Extends the thin orthonormal basis `q` (n x k) to a full orthonormal basis.
fn complete_basis(q: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = q.ncols();
    let mut basis = DMatrix::zeros(n, n);
    basis.columns_mut(0, k).copy_from(q);
    let mut filled = k;
    for e in 0..n {
        if filled == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        for j in 0..filled {
            let c = basis.column(j).dot(&v);
            v -= basis.column(j) * c;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.column_mut(filled).copy_from(&(v / norm));
            filled += 1;
        }
    }
    basis
}

pub struct Infeasible {
    pub qp: QpProblem,
    pub a: DMatrix<f64>,
    /// Farkas certificate: `A'y = 0` and `u'y⁺ + l'y⁻ < 0`.
    pub certificate: DVector<f64>,
}

/// Strictly convex QP whose constraints contain a hidden contradiction: one
/// row is a negative combination of others with an incompatible bound.
pub fn infeasible_qp(rng: &mut impl Rng, max_vars: usize) -> Infeasible {
    let n = rng.gen_range(2..=max_vars);
    let k = rng.gen_range(1..=n);
    let extra = rng.gen_range(0..=n);
    let m = k + 1 + extra;
    let f = normal_matrix(rng, n, n);
    let p = f.transpose() * &f + DMatrix::identity(n, n) * 0.1;
    let q = normal_vector(rng, n);
    let mut a = normal_matrix(rng, m, n);
    let mut l = DVector::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::from_element(m, f64::INFINITY);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..2.0)).collect();
    let mut combo = DVector::zeros(n);
    let mut bound = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let b = rng.gen_range(-2.0..2.0);
        u[i] = b;
        l[i] = b - rng.gen_range(1.0..3.0);
        combo += a.row(i).transpose() * *w;
        bound += w * b;
    }
    // Σ w_i a_i x <= Σ w_i u_i, but row k demands Σ w_i a_i x >= Σ w_i u_i + gap.
    let gap = rng.gen_range(0.1..1.0);
    a.row_mut(k).copy_from(&combo.transpose());
    l[k] = bound + gap;
    u[k] = if rng.gen_bool(0.5) {
        f64::INFINITY
    } else {
        bound + gap + 1.0
    };
    for i in k + 1..m {
        let c = rng.gen_range(-1.0..1.0);
        l[i] = c - 5.0;
        u[i] = c + 5.0;
    }
    let mut cert = DVector::zeros(m);
    for (i, w) in weights.iter().enumerate() {
        cert[i] = *w;
    }
    cert[k] = -1.0;
    Infeasible {
        qp: QpProblem::dense(&p, q, &a, l, u).expect("valid instance"),
        a,
        certificate: cert,
    }
}

/// Checks the Farkas conditions for `y` on the constraint set of `qp`.
pub fn is_farkas_certificate(a: &DMatrix<f64>, l: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>, tol: f64) -> bool {
    let aty = a.transpose() * y;
    let scale = y.amax().max(1e-300);
    if aty.amax() > tol * scale {
        return false;
    }
    let mut support = 0.0;
    for i in 0..y.len() {
        if y[i] > 0.0 {
            if !u[i].is_finite() {
                return false;
            }
            support += u[i] * y[i];
        } else if y[i] < 0.0 {
            if !l[i].is_finite() {
                return false;
            }
            support += l[i] * y[i];
        }
    }
    support < -tol * scale
}
