//! Tube feedback gain synthesis: a common quadratic Lyapunov function for all
//! vertex models, found through the congruence-transformed LMI in
//! `S = P^-1`, `Y = K S`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::edmd::LocalKoopman;
use crate::error::{Error, Result};
use crate::sdp::{self, BarrierOptions, Feasibility, Lmi, LmiProgram};
use crate::sets::{RpiApprox, Zonotope};

/// Ridge added to lifted stage weights.
pub const WEIGHT_RIDGE: f64 = 1e-8;

/// Gain reported for the Van der Pol benchmark with the nine-monomial lift,
/// kept as a fixture for the certificate checker and the tube law.
pub const REFERENCE_VDP_GAIN: [f64; 9] = [
    -0.2036, -0.3152, 0.0117, 5.3363e-5, -0.0062, 0.0489, -0.0147, -4.3624e-5, 0.0035,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisObjective {
    /// Maximize `tr(S)`.
    #[default]
    MaxTraceS,
    /// Minimize `tr(P)` through the epigraph `[X I; I S] ⪰ 0`.
    MinTraceP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub objective: f64,
    pub newton_iterations: usize,
    pub gap: f64,
    /// True when the gain was supplied externally and only verified.
    pub external: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeGain {
    #[serde(with = "crate::matrix_serde::mat")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub p: DMatrix<f64>,
    #[serde(default)]
    pub rpi: Option<RpiApprox>,
    pub certificate_margins: Vec<f64>,
    pub solver: SolverInfo,
}

impl TubeGain {
    pub fn rpi_set(&self) -> Option<&Zonotope> {
        self.rpi.as_ref().map(|r| &r.set)
    }

    /// `A_i + B_i K` for every vertex.
    pub fn closed_loop_maps(&self, locals: &[LocalKoopman]) -> Result<Vec<DMatrix<f64>>> {
        locals
            .iter()
            .map(|l| {
                if l.b.ncols() != self.k.nrows() || l.a.nrows() != self.k.ncols() {
                    return Err(Error::dim("gain for vertex", l.a.nrows(), self.k.ncols()));
                }
                Ok(&l.a + &l.b * &self.k)
            })
            .collect()
    }

    /// Wraps an externally supplied `(K, P)` after checking its certificate.
    pub fn from_external(
        locals: &[LocalKoopman],
        k: DMatrix<f64>,
        p: DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<Self> {
        let margins = verify_certificate(locals, &k, &p, q, r)?;
        Ok(TubeGain {
            k,
            p,
            rpi: None,
            certificate_margins: margins,
            solver: SolverInfo {
                objective: f64::NAN,
                newton_iterations: 0,
                gap: 0.0,
                external: true,
            },
        })
    }
}

/// `C' Qx C + 1e-8 I`.
pub fn lift_weights(qx: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if qx.nrows() != qx.ncols() || qx.nrows() != c.nrows() {
        return Err(Error::dim("state weight", c.nrows(), qx.nrows()));
    }
    let q = c.ncols();
    Ok(c.transpose() * qx * c + DMatrix::identity(q, q) * WEIGHT_RIDGE)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt())) * v.transpose()
}

fn check_weights(q_dim: usize, m: usize, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    if q.shape() != (q_dim, q_dim) {
        return Err(Error::dim("Q weight", q_dim, q.nrows()));
    }
    if r.shape() != (m, m) {
        return Err(Error::dim("R weight", m, r.nrows()));
    }
    if q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidInput("Q must be positive semidefinite".into()));
    }
    if m > 0 && !(r.clone().symmetric_eigen().eigenvalues.min() > 0.0) {
        return Err(Error::InvalidInput("R must be positive definite".into()));
    }
    Ok(())
}

/// `λ_max(Ac' P Ac - P + Q + K' R K)` for each vertex, `Ac = A_i + B_i K`.
pub fn verify_certificate(
    locals: &[LocalKoopman],
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidInput("no vertex models".into()))?;
    let (qd, m) = (first.lifted_dim(), first.input_dim());
    if k.shape() != (m, qd) {
        return Err(Error::dim("gain K columns", qd, k.ncols()));
    }
    if p.shape() != (qd, qd) {
        return Err(Error::dim("Lyapunov matrix", qd, p.nrows()));
    }
    check_weights(qd, m, q, r)?;
    let asym = (p - p.transpose()).amax();
    if asym > 1e-10 * (1.0 + p.amax()) {
        return Err(Error::InvalidInput(format!(
            "P is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    if p.clone().cholesky().is_none() {
        return Err(Error::InvalidInput("P is not positive definite".into()));
    }
    let krk = k.transpose() * r * k;
    locals
        .iter()
        .map(|l| {
            if l.a.nrows() != qd || l.input_dim() != m {
                return Err(Error::dim("vertex model", qd, l.a.nrows()));
            }
            let ac = &l.a + &l.b * k;
            let mut res = ac.transpose() * p * &ac - p + q + &krk;
            res = (&res + res.transpose()) * 0.5;
            Ok(res.symmetric_eigen().eigenvalues.max())
        })
        .collect()
}

/// Index helpers for the packed decision vector `[vech(S), vec(Y), vech(X)]`.
struct Layout {
    q: usize,
    m: usize,
    with_x: bool,
}

impl Layout {
    fn nsym(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    fn len(&self) -> usize {
        self.nsym() + self.m * self.q + if self.with_x { self.nsym() } else { 0 }
    }

    fn sym_pairs(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.nsym());
        for a in 0..self.q {
            for b in a..self.q {
                v.push((a, b));
            }
        }
        v
    }

    fn unpack_sym(&self, x: &DVector<f64>, offset: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.q, self.q);
        for (k, (a, b)) in self.sym_pairs().into_iter().enumerate() {
            s[(a, b)] = x[offset + k];
            s[(b, a)] = x[offset + k];
        }
        s
    }

    fn pack_sym(&self, s: &DMatrix<f64>, x: &mut DVector<f64>, offset: usize) {
        for (k, (a, b)) in self.sym_pairs().into_iter().enumerate() {
            x[offset + k] = 0.5 * (s[(a, b)] + s[(b, a)]);
        }
    }

    fn s(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.unpack_sym(x, 0)
    }

    fn y(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let off = self.nsym();
        DMatrix::from_fn(self.m, self.q, |i, j| x[off + i * self.q + j])
    }
}

/// Vertex block `[S, (AS+BY)', S Qh, Y' Rh; AS+BY, S, 0, 0; Qh S, 0, I, 0; Rh Y, 0, 0, I]`.
fn vertex_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qh: &DMatrix<f64>,
    rh: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DMatrix<f64>,
    constant: bool,
) -> DMatrix<f64> {
    let (q, m) = (a.nrows(), b.ncols());
    let n = 3 * q + m;
    let mut f = DMatrix::zeros(n, n);
    let ab = a * s + b * y;
    let qs = qh * s;
    let ry = rh * y;
    f.view_mut((0, 0), (q, q)).copy_from(s);
    f.view_mut((q, 0), (q, q)).copy_from(&ab);
    f.view_mut((0, q), (q, q)).copy_from(&ab.transpose());
    f.view_mut((q, q), (q, q)).copy_from(s);
    f.view_mut((2 * q, 0), (q, q)).copy_from(&qs);
    f.view_mut((0, 2 * q), (q, q)).copy_from(&qs.transpose());
    if m > 0 {
        f.view_mut((3 * q, 0), (m, q)).copy_from(&ry);
        f.view_mut((0, 3 * q), (q, m)).copy_from(&ry.transpose());
    }
    if constant {
        for i in 2 * q..n {
            f[(i, i)] = 1.0;
        }
    }
    f
}

fn unit(len: usize, j: usize) -> DVector<f64> {
    let mut e = DVector::zeros(len);
    e[j] = 1.0;
    e
}

/// Solves for `(K, P)` with a common Lyapunov certificate over all vertices.
/// The RPI set is left empty.
pub fn solve_gain(
    locals: &[LocalKoopman],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    objective: SynthesisObjective,
    opts: &BarrierOptions,
) -> Result<TubeGain> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidInput("no vertex models".into()))?;
    let (qd, m) = (first.lifted_dim(), first.input_dim());
    if locals.iter().any(|l| l.lifted_dim() != qd || l.input_dim() != m) {
        return Err(Error::InvalidInput("vertex models differ in shape".into()));
    }
    check_weights(qd, m, q, r)?;
    let qh = symmetric_sqrt(q);
    let rh = symmetric_sqrt(r);
    let base = Layout {
        q: qd,
        m,
        with_x: false,
    };
    let nb = base.len();

    let vertex_lmis: Vec<Lmi> = locals
        .iter()
        .map(|l| {
            let zero_s = DMatrix::zeros(qd, qd);
            let zero_y = DMatrix::zeros(m, qd);
            let f0 = vertex_matrix(&l.a, &l.b, &qh, &rh, &zero_s, &zero_y, true);
            let fj = (0..nb)
                .map(|j| {
                    let e = unit(nb, j);
                    vertex_matrix(&l.a, &l.b, &qh, &rh, &base.s(&e), &base.y(&e), false)
                })
                .collect();
            Lmi { f0, fj }
        })
        .collect();

    let mut x0 = DVector::zeros(nb);
    base.pack_sym(&DMatrix::identity(qd, qd), &mut x0, 0);
    let (feas, phase_one_iters) = sdp::find_interior(&vertex_lmis, &x0, opts)?;
    let x_feas = match feas {
        Feasibility::Interior(x) => x,
        Feasibility::Infeasible { margin, worst } => {
            return Err(Error::QuadraticStabilityFailure { vertex: worst, margin })
        }
    };

    let (program, start, layout) = match objective {
        SynthesisObjective::MaxTraceS => {
            let mut c = DVector::zeros(nb);
            for (k, (a, b)) in base.sym_pairs().into_iter().enumerate() {
                if a == b {
                    c[k] = -1.0;
                }
            }
            (LmiProgram { c, lmis: vertex_lmis }, x_feas, base)
        }
        SynthesisObjective::MinTraceP => {
            let layout = Layout { q: qd, m, with_x: true };
            let n = layout.len();
            let xoff = nb;
            let mut lmis: Vec<Lmi> = vertex_lmis
                .into_iter()
                .map(|mut l| {
                    let sz = l.size();
                    l.fj.extend((0..layout.nsym()).map(|_| DMatrix::zeros(sz, sz)));
                    l
                })
                .collect();
            // [X I; I S] ⪰ 0.
            let mut f0 = DMatrix::zeros(2 * qd, 2 * qd);
            for i in 0..qd {
                f0[(i, qd + i)] = 1.0;
                f0[(qd + i, i)] = 1.0;
            }
            let fj = (0..n)
                .map(|j| {
                    let e = unit(n, j);
                    let mut f = DMatrix::zeros(2 * qd, 2 * qd);
                    f.view_mut((0, 0), (qd, qd)).copy_from(&layout.unpack_sym(&e, xoff));
                    f.view_mut((qd, qd), (qd, qd)).copy_from(&layout.s(&e));
                    f
                })
                .collect();
            lmis.push(Lmi { f0, fj });
            let mut c = DVector::zeros(n);
            for (k, (a, b)) in layout.sym_pairs().into_iter().enumerate() {
                if a == b {
                    c[xoff + k] = 1.0;
                }
            }
            let mut start = DVector::zeros(n);
            start.rows_mut(0, nb).copy_from(&x_feas);
            let s = base.s(&x_feas);
            let s_inv = s
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidInput("phase one returned S not positive definite".into()))?
                .inverse();
            layout.pack_sym(&(s_inv + DMatrix::identity(qd, qd)), &mut start, xoff);
            (LmiProgram { c, lmis }, start, layout)
        }
    };

    let result = sdp::solve(&program, start, opts)?;
    let s = layout.s(&result.x);
    let y = layout.y(&result.x);
    let p = s
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("solver returned S not positive definite".into()))?
        .inverse();
    let p = (&p + p.transpose()) * 0.5;
    let k = &y * &p;
    let margins = verify_certificate(locals, &k, &p, q, r)?;
    if let Some((vertex, margin)) = margins
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|(_, mg)| *mg > 1e-6)
    {
        return Err(Error::QuadraticStabilityFailure { vertex, margin });
    }
    Ok(TubeGain {
        k,
        p,
        rpi: None,
        certificate_margins: margins,
        solver: SolverInfo {
            objective: result.objective,
            newton_iterations: phase_one_iters + result.iterations,
            gap: result.gap,
            external: false,
        },
    })
}
