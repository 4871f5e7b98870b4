//! Convex quadratic programs
//!
//! minimize `½ x'Px + q'x` subject to `l <= Ax <= u`,
//!
//! solved by operator splitting (ADMM) on the quasi-definite KKT system, with
//! Ruiz equilibration, adaptive step size, primal infeasibility certificates
//! and an active-set polishing step that recovers high-accuracy solutions.
//! Equality rows have `l = u`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Full symmetric Hessian.
    pub p: CscMatrix<f64>,
    pub q: DVector<f64>,
    pub a: CscMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// Builds from triplets; duplicate entries are summed. `p_triplets` may
    /// list the upper triangle only, the lower triangle is mirrored.
    pub fn from_triplets(
        n: usize,
        p_triplets: &[(usize, usize, f64)],
        q: DVector<f64>,
        m: usize,
        a_triplets: &[(usize, usize, f64)],
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let mut pc = CooMatrix::new(n, n);
        for &(i, j, v) in p_triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!("Hessian entry ({i}, {j}) out of range")));
            }
            if i > j {
                return Err(Error::InvalidInput("Hessian triplets must be upper triangular".into()));
            }
            pc.push(i, j, v);
            if i != j {
                pc.push(j, i, v);
            }
        }
        let mut ac = CooMatrix::new(m, n);
        for &(i, j, v) in a_triplets {
            if i >= m || j >= n {
                return Err(Error::InvalidInput(format!("constraint entry ({i}, {j}) out of range")));
            }
            ac.push(i, j, v);
        }
        let qp = QpProblem {
            p: CscMatrix::from(&pc),
            q,
            a: CscMatrix::from(&ac),
            l,
            u,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn dense(
        p: &DMatrix<f64>,
        q: DVector<f64>,
        a: &DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(Error::dim("Hessian columns", n, p.ncols()));
        }
        if a.ncols() != n {
            return Err(Error::dim("constraint columns", n, a.ncols()));
        }
        if (p - p.transpose()).amax() > 1e-12 * (1.0 + p.amax()) {
            return Err(Error::InvalidInput("Hessian is not symmetric".into()));
        }
        let mut pt = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if p[(i, j)] != 0.0 {
                    pt.push((i, j, p[(i, j)]));
                }
            }
        }
        let mut at = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    at.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(n, &pt, q, a.nrows(), &at, l, u)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.q.len(), self.l.len());
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::dim("Hessian", n, self.p.nrows()));
        }
        if self.a.ncols() != n || self.a.nrows() != m || self.u.len() != m {
            return Err(Error::dim("constraint matrix", m, self.a.nrows()));
        }
        ensure_finite(self.p.values(), "Hessian")?;
        ensure_finite(self.a.values(), "constraint matrix")?;
        ensure_finite(self.q.iter(), "linear cost")?;
        for i in 0..m {
            if self.l[i].is_nan() || self.u[i].is_nan() || self.l[i] == f64::INFINITY || self.u[i] == f64::NEG_INFINITY
            {
                return Err(Error::NonFinite(format!("constraint bounds of row {i}")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let mut px = DVector::zeros(x.len());
        csc_mul_acc(&self.p, x, &mut px, 1.0);
        0.5 * x.dot(&px) + self.q.dot(x)
    }

    /// Largest violation among stationarity, primal feasibility, dual sign and
    /// complementarity, all in the original units.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let n = x.len();
        let mut stat = self.q.clone();
        csc_mul_acc(&self.p, x, &mut stat, 1.0);
        csc_tmul_acc(&self.a, y, &mut stat, 1.0);
        let mut ax = DVector::zeros(self.l.len());
        csc_mul_acc(&self.a, x, &mut ax, 1.0);
        let mut worst = if n > 0 { stat.amax() } else { 0.0 };
        for i in 0..ax.len() {
            let (lo, hi) = (self.l[i], self.u[i]);
            worst = worst.max((ax[i] - hi).max(lo - ax[i]).max(0.0));
            let yp = y[i].max(0.0);
            let ym = (-y[i]).max(0.0);
            if hi.is_infinite() {
                worst = worst.max(yp);
            } else {
                worst = worst.max(yp.min((hi - ax[i]).abs()));
            }
            if lo.is_infinite() {
                worst = worst.max(ym);
            } else {
                worst = worst.max(ym.min((ax[i] - lo).abs()));
            }
        }
        worst
    }

    /// Largest magnitude among `Px`, `A'y`, `q` and `Ax`; the reference for
    /// relative KKT tolerances.
    pub fn kkt_scale(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut px = DVector::zeros(x.len());
        csc_mul_acc(&self.p, x, &mut px, 1.0);
        let mut aty = DVector::zeros(x.len());
        csc_tmul_acc(&self.a, y, &mut aty, 1.0);
        let mut ax = DVector::zeros(self.l.len());
        csc_mul_acc(&self.a, x, &mut ax, 1.0);
        [px, aty, self.q.clone(), ax]
            .iter()
            .map(|v| v.iter().fold(0.0_f64, |m, e| m.max(e.abs())))
            .fold(0.0, f64::max)
    }
}

/// `out += s * A x`.
pub(crate) fn csc_mul_acc(a: &CscMatrix<f64>, x: &DVector<f64>, out: &mut DVector<f64>, s: f64) {
    let (cp, ri, v) = (a.col_offsets(), a.row_indices(), a.values());
    for j in 0..a.ncols() {
        let xj = x[j] * s;
        if xj == 0.0 {
            continue;
        }
        for k in cp[j]..cp[j + 1] {
            out[ri[k]] += v[k] * xj;
        }
    }
}

/// `out += s * A' x`.
pub(crate) fn csc_tmul_acc(a: &CscMatrix<f64>, x: &DVector<f64>, out: &mut DVector<f64>, s: f64) {
    let (cp, ri, v) = (a.col_offsets(), a.row_indices(), a.values());
    for j in 0..a.ncols() {
        let mut acc = 0.0;
        for k in cp[j]..cp[j + 1] {
            acc += v[k] * x[ri[k]];
        }
        out[j] += s * acc;
    }
}

/// Sparse `L D L'` factorization without pivoting for quasi-definite
/// matrices, given the upper triangle in compressed columns.
#[derive(Debug, Clone)]
struct Ldl {
    n: usize,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    dinv: Vec<f64>,
    // Workspaces.
    y_vals: Vec<f64>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    marked: Vec<bool>,
    next_space: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Ldl {
    fn symbolic(n: usize, cp: &[usize], ri: &[usize]) -> Result<Self> {
        let mut work = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut etree = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &r in &ri[cp[j]..cp[j + 1]] {
                let mut i = r;
                if i > j {
                    return Err(Error::InvalidInput("KKT pattern is not upper triangular".into()));
                }
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz = lp[n];
        Ok(Ldl {
            n,
            etree,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            dinv: vec![0.0; n],
            y_vals: vec![0.0; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            marked: vec![false; n],
            next_space: vec![0; n],
        })
    }

    /// Numeric factorization; `signs[k]` is the expected sign of pivot `k`.
    fn numeric(&mut self, cp: &[usize], ri: &[usize], vals: &[f64], signs: &[f64]) -> Result<()> {
        let n = self.n;
        self.next_space.copy_from_slice(&self.lp[..n]);
        for k in 0..n {
            let mut nnz_y = 0;
            let mut dk = 0.0;
            for p in cp[k]..cp[k + 1] {
                let b = ri[p];
                if b == k {
                    dk = vals[p];
                    continue;
                }
                self.y_vals[b] = vals[p];
                if !self.marked[b] {
                    self.marked[b] = true;
                    self.elim[0] = b;
                    let mut ne = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if self.marked[next] {
                            break;
                        }
                        self.marked[next] = true;
                        self.elim[ne] = next;
                        ne += 1;
                        next = self.etree[next];
                    }
                    while ne > 0 {
                        ne -= 1;
                        self.y_idx[nnz_y] = self.elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let slot = self.next_space[c];
                let yc = self.y_vals[c];
                for j in self.lp[c]..slot {
                    self.y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[slot] = k;
                let l = yc * self.dinv[c];
                self.lx[slot] = l;
                dk -= yc * l;
                self.next_space[c] += 1;
                self.y_vals[c] = 0.0;
                self.marked[c] = false;
            }
            if !(dk * signs[k] > 0.0) || !dk.is_finite() {
                return Err(Error::SolverStall { iterations: 0, gap: dk });
            }
            self.dinv[k] = 1.0 / dk;
        }
        Ok(())
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        for i in 0..self.n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..self.n {
            x[i] *= self.dinv[i];
        }
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }
}

/// Upper triangle of `[P + σI, A'; A, -diag(1/ρ)]` restricted to selected rows
/// of `A`, with the position of each diagonal value.
struct KktPattern {
    cp: Vec<usize>,
    ri: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<usize>,
    signs: Vec<f64>,
}

impl KktPattern {
    /// `rows` lists the constraint rows included; `a_rows` are the rows of `A`
    /// as (column, value) lists.
    fn build(p: &CscMatrix<f64>, a_rows: &[Vec<(usize, f64)>], rows: &[usize], sigma: f64, neg_diag: &[f64]) -> Self {
        let n = p.ncols();
        let m = rows.len();
        let mut cp = Vec::with_capacity(n + m + 1);
        let mut ri = Vec::new();
        let mut vals = Vec::new();
        let mut diag = Vec::with_capacity(n + m);
        cp.push(0);
        let (pcp, pri, pv) = (p.col_offsets(), p.row_indices(), p.values());
        for j in 0..n {
            let mut has_diag = false;
            for k in pcp[j]..pcp[j + 1] {
                let i = pri[k];
                if i < j {
                    ri.push(i);
                    vals.push(pv[k]);
                } else if i == j {
                    diag.push(ri.len());
                    ri.push(j);
                    vals.push(pv[k] + sigma);
                    has_diag = true;
                }
            }
            if !has_diag {
                diag.push(ri.len());
                ri.push(j);
                vals.push(sigma);
            }
            cp.push(ri.len());
        }
        for (c, &r) in rows.iter().enumerate() {
            for &(j, v) in &a_rows[r] {
                ri.push(j);
                vals.push(v);
            }
            diag.push(ri.len());
            ri.push(n + c);
            vals.push(-neg_diag[c]);
            cp.push(ri.len());
        }
        let mut signs = vec![1.0; n];
        signs.extend(std::iter::repeat_n(-1.0, m));
        KktPattern {
            cp,
            ri,
            vals,
            diag,
            signs,
        }
    }
}

fn rows_of(a: &CscMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    let mut rows = vec![Vec::new(); a.nrows()];
    let (cp, ri, v) = (a.col_offsets(), a.row_indices(), a.values());
    for j in 0..a.ncols() {
        for k in cp[j]..cp[j + 1] {
            if v[k] != 0.0 {
                rows[ri[k]].push((j, v[k]));
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Looser tolerance at which polishing is first attempted.
    pub eps_polish_trigger: f64,
    /// KKT residual at which the polish stops trying smaller shifts.
    pub polish_target: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-6,
            eps_rel: 0.0,
            eps_polish_trigger: 1e-3,
            polish_target: 1e-9,
            eps_infeasible: 1e-5,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers: positive for active upper bounds, negative for lower.
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    pub kkt_residual: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Normalized infeasibility certificate `δy` when infeasible.
    pub certificate: Option<DVector<f64>>,
}

/// Initial guess for the primal and dual variables.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

struct Scaled {
    p: CscMatrix<f64>,
    a: CscMatrix<f64>,
    q: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn col_inf_norms(m: &CscMatrix<f64>) -> Vec<f64> {
    let (cp, v) = (m.col_offsets(), m.values());
    (0..m.ncols())
        .map(|j| v[cp[j]..cp[j + 1]].iter().fold(0.0f64, |a, x| a.max(x.abs())))
        .collect()
}

fn row_inf_norms(m: &CscMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0f64; m.nrows()];
    for (i, _, v) in m.triplet_iter() {
        out[i] = out[i].max(v.abs());
    }
    out
}

fn scale_matrix(m: &mut CscMatrix<f64>, row: &DVector<f64>, col: &DVector<f64>) {
    let ncols = m.ncols();
    let cp = m.col_offsets().to_vec();
    let ri = m.row_indices().to_vec();
    let v = m.values_mut();
    for j in 0..ncols {
        for k in cp[j]..cp[j + 1] {
            v[k] *= row[ri[k]] * col[j];
        }
    }
}

/// Ruiz equilibration of the KKT matrix followed by cost scaling.
fn equilibrate(qp: &QpProblem, iters: usize) -> Scaled {
    let (n, m) = (qp.num_vars(), qp.num_constraints());
    let mut p = qp.p.clone();
    let mut a = qp.a.clone();
    let mut q = qp.q.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let pc = col_inf_norms(&p);
        let ac = col_inf_norms(&a);
        let ar = row_inf_norms(&a);
        let dd = DVector::from_fn(n, |j, _| 1.0 / clamp(pc[j].max(ac[j])).sqrt());
        let de = DVector::from_fn(m, |i, _| 1.0 / clamp(ar[i]).sqrt());
        scale_matrix(&mut p, &dd, &dd);
        scale_matrix(&mut a, &de, &dd);
        q.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let pc = col_inf_norms(&p);
    let mean = if n > 0 { pc.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let c = 1.0 / clamp(mean.max(q.amax()));
    for v in p.values_mut() {
        *v *= c;
    }
    q *= c;
    let l = qp.l.component_mul(&e);
    let u = qp.u.component_mul(&e);
    Scaled { p, a, q, l, u, d, e, c }
}

const EQ_RHO_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

/// Unscaled residual norms for the current scaled iterate.
struct Residuals {
    prim: f64,
    dual: f64,
    prim_ref: f64,
    dual_ref: f64,
}

fn residuals(s: &Scaled, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
    let n = x.len();
    let m = z.len();
    let mut ax = DVector::zeros(m);
    csc_mul_acc(&s.a, x, &mut ax, 1.0);
    let mut px = DVector::zeros(n);
    csc_mul_acc(&s.p, x, &mut px, 1.0);
    let mut aty = DVector::zeros(n);
    csc_tmul_acc(&s.a, y, &mut aty, 1.0);
    let einv = s.e.map(|v| 1.0 / v);
    let dinv = s.d.map(|v| 1.0 / v);
    let prim = (&ax - z).component_mul(&einv).amax_or0();
    let prim_ref = ax
        .component_mul(&einv)
        .amax_or0()
        .max(z.component_mul(&einv).amax_or0());
    let dual = (&px + &s.q + &aty).component_mul(&dinv).amax_or0() / s.c;
    let dual_ref = px
        .component_mul(&dinv)
        .amax_or0()
        .max(aty.component_mul(&dinv).amax_or0())
        .max(s.q.component_mul(&dinv).amax_or0())
        / s.c;
    Residuals {
        prim,
        dual,
        prim_ref,
        dual_ref,
    }
}

trait AmaxOr0 {
    fn amax_or0(&self) -> f64;
}

impl AmaxOr0 for DVector<f64> {
    fn amax_or0(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

fn project(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Primal infeasibility test on the dual increment (scaled quantities).
fn infeasibility_certificate(s: &Scaled, dy: &DVector<f64>, eps: f64) -> Option<DVector<f64>> {
    let dy_un = dy.component_mul(&s.e);
    let norm = dy_un.amax_or0();
    if !(norm > 1e-30) {
        return None;
    }
    let mut aty = DVector::zeros(s.d.len());
    csc_tmul_acc(&s.a, dy, &mut aty, 1.0);
    let aty_un = aty.component_mul(&s.d.map(|v| 1.0 / v));
    if aty_un.amax_or0() > eps * norm {
        return None;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let v = dy[i];
        if v > 0.0 {
            if s.u[i].is_infinite() {
                if dy_un[i] > eps * norm {
                    return None;
                }
                continue;
            }
            support += s.u[i] * v;
        } else if v < 0.0 {
            if s.l[i].is_infinite() {
                if -dy_un[i] > eps * norm {
                    return None;
                }
                continue;
            }
            support += s.l[i] * v;
        }
    }
    // Scaled and unscaled support values agree: l, u carry E and dy carries E^-1.
    (support < -eps * norm).then(|| dy_un / norm)
}

struct Admm<'a> {
    s: &'a Scaled,
    a_rows: Vec<Vec<(usize, f64)>>,
    is_eq: Vec<bool>,
    rho: f64,
    rho_vec: DVector<f64>,
    kkt: KktPattern,
    ldl: Ldl,
}

impl<'a> Admm<'a> {
    fn new(s: &'a Scaled, rho: f64, sigma: f64) -> Result<Self> {
        let m = s.l.len();
        let a_rows = rows_of(&s.a);
        let is_eq: Vec<bool> = (0..m).map(|i| s.l[i] == s.u[i]).collect();
        let rho_vec = DVector::from_fn(m, |i, _| if is_eq[i] { rho * EQ_RHO_FACTOR } else { rho });
        let all_rows: Vec<usize> = (0..m).collect();
        let inv: Vec<f64> = rho_vec.iter().map(|r| 1.0 / r).collect();
        let kkt = KktPattern::build(&s.p, &a_rows, &all_rows, sigma, &inv);
        let mut ldl = Ldl::symbolic(kkt.signs.len(), &kkt.cp, &kkt.ri)?;
        ldl.numeric(&kkt.cp, &kkt.ri, &kkt.vals, &kkt.signs)?;
        Ok(Admm {
            s,
            a_rows,
            is_eq,
            rho,
            rho_vec,
            kkt,
            ldl,
        })
    }

    fn set_rho(&mut self, rho: f64) -> Result<()> {
        let n = self.s.d.len();
        self.rho = rho;
        for i in 0..self.rho_vec.len() {
            self.rho_vec[i] = if self.is_eq[i] { rho * EQ_RHO_FACTOR } else { rho };
            self.kkt.vals[self.kkt.diag[n + i]] = -1.0 / self.rho_vec[i];
        }
        self.ldl
            .numeric(&self.kkt.cp, &self.kkt.ri, &self.kkt.vals, &self.kkt.signs)
    }
}

/// Solves the QP. `warm` supplies initial primal and dual guesses in the
/// original units.
pub fn solve_qp(qp: &QpProblem, settings: &QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    let (n, m) = (qp.num_vars(), qp.num_constraints());
    let s = equilibrate(qp, settings.scaling_iters);
    let mut admm = Admm::new(&s, settings.rho.clamp(RHO_MIN, RHO_MAX), settings.sigma)?;
    let (mut x, mut y) = match warm {
        Some(w) => {
            if w.x.len() != n || w.y.len() != m {
                return Err(Error::dim("warm start", n + m, w.x.len() + w.y.len()));
            }
            (w.x.component_div(&s.d), w.y.component_div(&s.e) * s.c)
        }
        None => (DVector::zeros(n), DVector::zeros(m)),
    };
    let mut z = DVector::zeros(m);
    csc_mul_acc(&s.a, &x, &mut z, 1.0);
    for i in 0..m {
        z[i] = project(z[i], s.l[i], s.u[i]);
    }
    let mut rhs = vec![0.0; n + m];
    let mut polish_tried_at = f64::INFINITY;
    let alpha = settings.alpha;
    let sigma = settings.sigma;
    for iter in 1..=settings.max_iter {
        let y_prev = y.clone();
        for j in 0..n {
            rhs[j] = sigma * x[j] - s.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / admm.rho_vec[i];
        }
        admm.ldl.solve_in_place(&mut rhs);
        for i in 0..m {
            let nu = rhs[n + i];
            let zt = z[i] + (nu - y[i]) / admm.rho_vec[i];
            let zr = alpha * zt + (1.0 - alpha) * z[i];
            let zn = project(zr + y[i] / admm.rho_vec[i], s.l[i], s.u[i]);
            y[i] += admm.rho_vec[i] * (zr - zn);
            z[i] = zn;
        }
        for j in 0..n {
            x[j] = alpha * rhs[j] + (1.0 - alpha) * x[j];
        }

        let r = residuals(&s, &x, &z, &y);
        let tol_p = settings.eps_abs + settings.eps_rel * r.prim_ref;
        let tol_d = settings.eps_abs + settings.eps_rel * r.dual_ref;
        let converged = r.prim <= tol_p && r.dual <= tol_d;
        let loose = r.prim <= settings.eps_polish_trigger * (1.0 + r.prim_ref)
            && r.dual <= settings.eps_polish_trigger * (1.0 + r.dual_ref);
        if settings.polish && (converged || (loose && r.prim + r.dual < 0.1 * polish_tried_at)) {
            polish_tried_at = r.prim + r.dual;
            if let Some(sol) = polish(qp, &s, &admm, &z, &y, settings, iter)? {
                return Ok(sol);
            }
        }
        if converged {
            return Ok(finish(qp, &s, &x, &y, r, QpStatus::Optimal, iter, false));
        }
        if iter % settings.adapt_interval == 0 || iter == 1 {
            let dy = &y - &y_prev;
            if let Some(cert) = infeasibility_certificate(&s, &dy, settings.eps_infeasible) {
                let mut sol = finish(qp, &s, &x, &y, r, QpStatus::Infeasible, iter, false);
                sol.certificate = Some(cert);
                return Ok(sol);
            }
        }
        if iter % settings.adapt_interval == 0 {
            let ratio = ((r.prim / (r.prim_ref + 1e-30)) / (r.dual / (r.dual_ref + 1e-30)).max(1e-30)).sqrt();
            let new_rho = (admm.rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * admm.rho || new_rho < 0.2 * admm.rho {
                admm.set_rho(new_rho)?;
            }
        }
    }
    let r = residuals(&s, &x, &z, &y);
    Ok(finish(qp, &s, &x, &y, r, QpStatus::MaxIter, settings.max_iter, false))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    qp: &QpProblem,
    s: &Scaled,
    x: &DVector<f64>,
    y: &DVector<f64>,
    r: Residuals,
    status: QpStatus,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let xu = x.component_mul(&s.d);
    let yu = y.component_mul(&s.e) / s.c;
    QpSolution {
        objective: qp.objective(&xu),
        kkt_residual: qp.kkt_residual(&xu, &yu),
        x: xu,
        y: yu,
        status,
        iterations,
        polished,
        primal_residual: r.prim,
        dual_residual: r.dual,
        certificate: None,
    }
}

const DENSE_POLISH_LIMIT: usize = 1500;

/// Pivoted dense solve of the unregularized reduced KKT system, used when
/// the sparse factorization is too inaccurate to refine. Returns `None` if it
/// does not improve on `current`.
fn dense_kkt_solve(s: &Scaled, admm: &Admm, active: &[usize], target: &[f64], current: &[f64]) -> Option<Vec<f64>> {
    let n = s.q.len();
    let dim = n + active.len();
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..n {
        for idx in s.p.col_offsets()[j]..s.p.col_offsets()[j + 1] {
            k[(s.p.row_indices()[idx], j)] += s.p.values()[idx];
        }
    }
    for (c, &r) in active.iter().enumerate() {
        for &(j, v) in &admm.a_rows[r] {
            k[(n + c, j)] += v;
            k[(j, n + c)] += v;
        }
    }
    let b = DVector::from_column_slice(target);
    let residual = |x: &DVector<f64>| (&b - &k * x).amax();
    let lu = k.clone().lu();
    let mut x = lu.solve(&b)?;
    for _ in 0..3 {
        let r = &b - &k * &x;
        x += lu.solve(&r)?;
    }
    let cur = DVector::from_column_slice(current);
    (x.iter().all(|v| v.is_finite()) && residual(&x) < residual(&cur)).then(|| x.as_slice().to_vec())
}

/// Solves the equality-constrained KKT system on `active` with iterative
/// refinement against the unregularized matrix.
fn polish_solve(
    s: &Scaled,
    admm: &Admm,
    active: &[usize],
    bound: &[f64],
    delta: f64,
    dense_fallback: bool,
) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
    let n = s.q.len();
    let m = s.l.len();
    let reg = vec![delta; active.len()];
    let kkt = KktPattern::build(&s.p, &admm.a_rows, active, delta, &reg);
    let mut ldl = Ldl::symbolic(kkt.signs.len(), &kkt.cp, &kkt.ri)?;
    let factored = ldl.numeric(&kkt.cp, &kkt.ri, &kkt.vals, &kkt.signs).is_ok();
    if !factored && !dense_fallback {
        return Ok(None);
    }
    let na = active.len();
    let mut target = vec![0.0; n + na];
    for j in 0..n {
        target[j] = -s.q[j];
    }
    for (c, b) in bound.iter().enumerate() {
        target[n + c] = *b;
    }
    let mut sol = vec![0.0; n + na];
    let mut last = f64::INFINITY;
    let mut solved = factored;
    if factored {
        sol.copy_from_slice(&target);
        ldl.solve_in_place(&mut sol);
        for _ in 0..60 {
            let mut res = target.clone();
            let xs = DVector::from_column_slice(&sol[..n]);
            let mut px = DVector::zeros(n);
            csc_mul_acc(&s.p, &xs, &mut px, 1.0);
            for j in 0..n {
                res[j] -= px[j];
            }
            for (c, &r) in active.iter().enumerate() {
                let yc = sol[n + c];
                let mut ax = 0.0;
                for &(j, v) in &admm.a_rows[r] {
                    res[j] -= v * yc;
                    ax += v * sol[j];
                }
                res[n + c] -= ax;
            }
            let err = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !err.is_finite() || err < 1e-14 || err > 0.99 * last {
                break;
            }
            last = err;
            ldl.solve_in_place(&mut res);
            for (s_, d) in sol.iter_mut().zip(&res) {
                *s_ += d;
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            sol.iter_mut().for_each(|v| *v = 0.0);
            last = f64::INFINITY;
            solved = false;
        }
    }
    if dense_fallback && last > 1e-14 && n + na <= DENSE_POLISH_LIMIT {
        if let Some(d) = dense_kkt_solve(s, admm, active, &target, &sol) {
            sol = d;
            solved = true;
        }
    }
    if !solved {
        return Ok(None);
    }
    let xp = DVector::from_column_slice(&sol[..n]);
    let mut yp = DVector::zeros(m);
    for (c, &r) in active.iter().enumerate() {
        yp[r] = sol[n + c];
    }
    Ok(Some((xp, yp)))
}

/// Solves the equality-constrained problem on the guessed active set and
/// keeps the result if it satisfies the KKT conditions to `eps_abs`.
#[allow(clippy::too_many_arguments)]
fn polish(
    qp: &QpProblem,
    s: &Scaled,
    admm: &Admm,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
    iter: usize,
) -> Result<Option<QpSolution>> {
    let m = z.len();
    let mut active = Vec::new();
    let mut bound = Vec::new();
    for i in 0..m {
        if admm.is_eq[i] || z[i] - s.l[i] < -y[i] {
            active.push(i);
            bound.push(s.l[i]);
        } else if s.u[i] - z[i] < y[i] {
            active.push(i);
            bound.push(s.u[i]);
        }
    }
    // Nearly singular reduced systems make refinement against a large
    // regularization converge slowly, so retry with smaller shifts and
    // finally with a pivoted dense factorization.
    // (KKT residual, scaled x, scaled y, unscaled x, unscaled y)
    type Candidate = (f64, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);
    let mut best: Option<Candidate> = None;
    let mut tol = settings.eps_abs;
    for (delta, dense) in [(1e-7, false), (1e-9, false), (1e-11, false), (1e-11, true)] {
        let Some((xp, yp)) = polish_solve(s, admm, &active, &bound, delta, dense)? else {
            continue;
        };
        let xu = xp.component_mul(&s.d);
        let yu = yp.component_mul(&s.e) / s.c;
        let res = qp.kkt_residual(&xu, &yu);
        let candidate_tol = settings.eps_abs + settings.eps_rel * qp.kkt_scale(&xu, &yu);
        if best.as_ref().is_none_or(|b| res < b.0) {
            best = Some((res, xp, yp, xu, yu));
            tol = candidate_tol;
        }
        if res <= settings.polish_target.min(candidate_tol) {
            break;
        }
    }
    let Some((kkt_res, xp, yp, xu, yu)) = best else {
        return Ok(None);
    };
    if !(kkt_res <= tol) {
        return Ok(None);
    }
    let mut zp = DVector::zeros(m);
    csc_mul_acc(&s.a, &xp, &mut zp, 1.0);
    for i in 0..m {
        zp[i] = project(zp[i], s.l[i], s.u[i]);
    }
    let r = residuals(s, &xp, &zp, &yp);
    Ok(Some(QpSolution {
        objective: qp.objective(&xu),
        kkt_residual: kkt_res,
        x: xu,
        y: yu,
        status: QpStatus::Optimal,
        iterations: iter,
        polished: true,
        primal_residual: r.prim,
        dual_residual: r.dual,
        certificate: None,
    }))
}
