//! Primal log-barrier interior-point method for small linear matrix
//! inequality programs:
//!
//! minimize `c' x` subject to `F_i(x) = F_i0 + Σ_j x_j F_ij ⪰ 0`.
//!
//! Iterates stay strictly feasible, so any returned point satisfies every
//! LMI strictly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine symmetric matrix function `F0 + Σ_j x_j Fj`.
#[derive(Debug, Clone)]
pub struct Lmi {
    pub f0: DMatrix<f64>,
    /// One coefficient matrix per decision variable (zero when absent).
    pub fj: Vec<DMatrix<f64>>,
}

impl Lmi {
    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (j, fj) in self.fj.iter().enumerate() {
            if x[j] != 0.0 {
                f += fj * x[j];
            }
        }
        f
    }

    pub fn min_eigenvalue(&self, x: &DVector<f64>) -> f64 {
        self.eval(x).symmetric_eigen().eigenvalues.min()
    }
}

#[derive(Debug, Clone)]
pub struct LmiProgram {
    pub c: DVector<f64>,
    pub lmis: Vec<Lmi>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierOptions {
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// Stop once the duality-gap bound is below `gap_abs + gap_rel * |c'x|`.
    pub gap_rel: f64,
    pub gap_abs: f64,
    pub max_outer: usize,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            mu: 10.0,
            gap_rel: 1e-9,
            gap_abs: 1e-10,
            max_outer: 80,
            max_newton: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierResult {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Total Newton steps.
    pub iterations: usize,
    /// Duality-gap bound at exit.
    pub gap: f64,
}

/// Returns `-log det F(x)` and the Cholesky factor, or `None` outside the cone.
fn log_barrier(lmi: &Lmi, x: &DVector<f64>) -> Option<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let f = lmi.eval(x);
    let chol = f.cholesky()?;
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    logdet.is_finite().then_some((-logdet, chol))
}

fn merit(p: &LmiProgram, t: f64, x: &DVector<f64>) -> Option<f64> {
    let mut f = t * p.c.dot(x);
    for lmi in &p.lmis {
        f += log_barrier(lmi, x)?.0;
    }
    Some(f)
}

/// Stop rule evaluated after each centering: returns true to end early.
type EarlyStop<'a> = &'a dyn Fn(&DVector<f64>) -> bool;

fn solve_from(
    p: &LmiProgram,
    x0: DVector<f64>,
    opts: &BarrierOptions,
    early: Option<EarlyStop>,
) -> Result<BarrierResult> {
    let n = p.c.len();
    let barrier_dim: f64 = p.lmis.iter().map(|l| l.size() as f64).sum();
    if merit(p, 1.0, &x0).is_none() {
        return Err(Error::InvalidInput(
            "barrier start point is not strictly feasible".into(),
        ));
    }
    let mut x = x0;
    let mut t = 1.0;
    let mut iterations = 0;
    for _outer in 0..opts.max_outer {
        // Centering by damped Newton steps.
        let mut converged = false;
        for _ in 0..opts.max_newton {
            let mut grad = &p.c * t;
            let mut hess = DMatrix::zeros(n, n);
            for lmi in &p.lmis {
                let (_, chol) = log_barrier(lmi, &x).expect("iterate stays interior");
                let finv = chol.inverse();
                let g: Vec<DMatrix<f64>> = lmi.fj.iter().map(|fj| &finv * fj).collect();
                let gt: Vec<DMatrix<f64>> = g.iter().map(|m| m.transpose()).collect();
                for j in 0..n {
                    grad[j] -= g[j].trace();
                    for k in 0..=j {
                        let v = g[j].dot(&gt[k]);
                        hess[(j, k)] += v;
                        if k != j {
                            hess[(k, j)] += v;
                        }
                    }
                }
            }
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    let reg = 1e-12 * (1.0 + hess.diagonal().amax());
                    let h = hess + DMatrix::identity(n, n) * reg;
                    match h.cholesky() {
                        Some(ch) => ch.solve(&(-&grad)),
                        None => {
                            return Err(Error::SolverStall {
                                iterations,
                                gap: barrier_dim / t,
                            })
                        }
                    }
                }
            };
            iterations += 1;
            let decrement = -grad.dot(&step);
            if !(decrement > 1e-8) {
                converged = true;
                break;
            }
            let f0 = merit(p, t, &x).expect("interior");
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-14 {
                let trial = &x + &step * alpha;
                if trial == x {
                    break;
                }
                if let Some(f) = merit(p, t, &trial) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No further progress available at this resolution.
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SolverStall {
                iterations,
                gap: barrier_dim / t,
            });
        }
        let gap = barrier_dim / t;
        if let Some(stop) = early {
            if stop(&x) {
                return Ok(BarrierResult {
                    objective: p.c.dot(&x),
                    x,
                    iterations,
                    gap,
                });
            }
        }
        let obj = p.c.dot(&x);
        if gap <= opts.gap_abs + opts.gap_rel * obj.abs() {
            return Ok(BarrierResult {
                x,
                objective: obj,
                iterations,
                gap,
            });
        }
        t *= opts.mu;
    }
    Err(Error::SolverStall {
        iterations,
        gap: barrier_dim / t,
    })
}

/// Outcome of the feasibility phase.
pub enum Feasibility {
    /// Strictly feasible point.
    Interior(DVector<f64>),
    /// Largest achievable `min_i λ_min(F_i)` (non-positive) and the LMI attaining it.
    Infeasible { margin: f64, worst: usize },
}

/// Phase one: maximize `s` subject to `F_i(x) ⪰ s I` and `s <= 1`, stopping as
/// soon as a centered iterate has `s > 0`.
pub fn find_interior(lmis: &[Lmi], x0: &DVector<f64>, opts: &BarrierOptions) -> Result<(Feasibility, usize)> {
    let n = x0.len();
    let s0 = lmis.iter().map(|l| l.min_eigenvalue(x0)).fold(f64::INFINITY, f64::min);
    if s0 > 0.0 {
        return Ok((Feasibility::Interior(x0.clone()), 0));
    }
    let mut aug = Vec::with_capacity(lmis.len() + 1);
    for l in lmis {
        let mut fj = l.fj.clone();
        fj.push(-DMatrix::identity(l.size(), l.size()));
        aug.push(Lmi { f0: l.f0.clone(), fj });
    }
    let mut cap_fj = vec![DMatrix::zeros(1, 1); n];
    cap_fj.push(DMatrix::from_element(1, 1, -1.0));
    aug.push(Lmi {
        f0: DMatrix::from_element(1, 1, 1.0),
        fj: cap_fj,
    });
    let mut c = DVector::zeros(n + 1);
    c[n] = -1.0;
    let prog = LmiProgram { c, lmis: aug };
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(x0);
    start[n] = s0 - 1.0;
    let stop = |z: &DVector<f64>| z[n] > 0.0;
    let opts = BarrierOptions {
        gap_rel: 0.0,
        gap_abs: 1e-10,
        ..*opts
    };
    let r = solve_from(&prog, start, &opts, Some(&stop))?;
    let x = r.x.rows(0, n).into_owned();
    if r.x[n] > 0.0 {
        return Ok((Feasibility::Interior(x), r.iterations));
    }
    let (worst, margin) = lmis
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.min_eigenvalue(&x)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one LMI");
    Ok((Feasibility::Infeasible { margin, worst }, r.iterations))
}

/// Solves the program from a strictly feasible point.
pub fn solve(p: &LmiProgram, x0: DVector<f64>, opts: &BarrierOptions) -> Result<BarrierResult> {
    if p.lmis.iter().any(|l| l.fj.len() != p.c.len()) {
        return Err(Error::InvalidInput(
            "LMI coefficient count differs from variable count".into(),
        ));
    }
    solve_from(p, x0, opts, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(f0: f64, f1: f64) -> Lmi {
        Lmi {
            f0: DMatrix::from_element(1, 1, f0),
            fj: vec![DMatrix::from_element(1, 1, f1)],
        }
    }

    #[test]
    fn interval_lp() {
        // minimize x subject to 2 <= x <= 5.
        let p = LmiProgram {
            c: DVector::from_element(1, 1.0),
            lmis: vec![scalar(-2.0, 1.0), scalar(5.0, -1.0)],
        };
        let r = solve(&p, DVector::from_element(1, 3.0), &BarrierOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-8, "{}", r.x[0]);
        assert!(r.x[0] > 2.0);
    }

    #[test]
    fn max_eigenvalue_bound() {
        // minimize t subject to t I - M ⪰ 0: optimum is λ_max(M).
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = LmiProgram {
            c: DVector::from_element(1, 1.0),
            lmis: vec![Lmi {
                f0: -m.clone(),
                fj: vec![DMatrix::identity(2, 2)],
            }],
        };
        let r = solve(&p, DVector::from_element(1, 10.0), &BarrierOptions::default()).unwrap();
        let lmax = m.symmetric_eigen().eigenvalues.max();
        assert!((r.x[0] - lmax).abs() < 1e-8);
    }

    #[test]
    fn phase_one_finds_interior_or_reports() {
        let feasible = [scalar(-2.0, 1.0), scalar(5.0, -1.0)];
        match find_interior(&feasible, &DVector::from_element(1, -10.0), &BarrierOptions::default())
            .unwrap()
            .0
        {
            Feasibility::Interior(x) => assert!(x[0] > 2.0 && x[0] < 5.0),
            Feasibility::Infeasible { .. } => panic!("feasible problem reported infeasible"),
        }
        let infeasible = [scalar(-5.0, 1.0), scalar(2.0, -1.0)];
        match find_interior(&infeasible, &DVector::from_element(1, 0.0), &BarrierOptions::default())
            .unwrap()
            .0
        {
            Feasibility::Interior(_) => panic!("infeasible problem reported feasible"),
            Feasibility::Infeasible { margin, .. } => assert!((margin + 1.5).abs() < 1e-6),
        }
    }
}
