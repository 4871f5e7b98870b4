//! Parameter-varying Koopman model: a bank of local lifted models blended by
//! piecewise-linear weights in the scheduling parameter.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{identify_local, identify_output_map, lift_snapshots, LocalKoopman, SnapshotSet};
use crate::error::{Error, Result};
use crate::lifting::LiftingBasis;
use crate::sets::Zonotope;

/// Box bound on the one-step lifted model residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSet {
    pub set: Zonotope,
    pub inflation: f64,
    /// Number of residual samples the hull was built from.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvkoModel {
    pub basis: LiftingBasis,
    /// Sorted by strictly increasing working point.
    pub locals: Vec<LocalKoopman>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub c: DMatrix<f64>,
    pub dt: f64,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSet>,
    /// Relative one-step residual `|Y+ - A Y - B U|_F / |Y+|_F` per working point.
    #[serde(default)]
    pub training_residuals: Vec<f64>,
}

impl PvkoModel {
    pub fn new(basis: LiftingBasis, mut locals: Vec<LocalKoopman>, c: DMatrix<f64>, dt: f64) -> Result<Self> {
        locals.sort_by(|a, b| a.working_point.total_cmp(&b.working_point));
        let model = PvkoModel {
            basis,
            locals,
            c,
            dt,
            disturbance: None,
            training_residuals: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.locals.is_empty() {
            return Err(Error::InvalidInput("model has no local models".into()));
        }
        let q = self.basis.lifted_dim();
        let m = self.locals[0].input_dim();
        for (i, l) in self.locals.iter().enumerate() {
            if l.lifted_dim() != q {
                return Err(Error::dim(format!("local model {i} A"), q, l.lifted_dim()));
            }
            if l.input_dim() != m {
                return Err(Error::dim(format!("local model {i} B columns"), m, l.input_dim()));
            }
        }
        if self
            .locals
            .windows(2)
            .any(|w| !(w[0].working_point < w[1].working_point))
        {
            return Err(Error::InvalidInput("working points must be strictly increasing".into()));
        }
        if self.c.nrows() != self.basis.state_dim() || self.c.ncols() != q {
            return Err(Error::dim("output map C columns", q, self.c.ncols()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput("sampling time must be positive".into()));
        }
        if let Some(w) = &self.disturbance {
            if w.set.dim() != q {
                return Err(Error::dim("disturbance set", q, w.set.dim()));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.basis.state_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.basis.lifted_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.locals[0].input_dim()
    }

    pub fn num_vertices(&self) -> usize {
        self.locals.len()
    }

    pub fn working_points(&self) -> Vec<f64> {
        self.locals.iter().map(|l| l.working_point).collect()
    }

    pub fn param_range(&self) -> (f64, f64) {
        (
            self.locals[0].working_point,
            self.locals[self.locals.len() - 1].working_point,
        )
    }

    /// Interpolation weights, one per local model; `p` is clamped to the
    /// working-point range.
    pub fn weights(&self, p: f64) -> Result<Vec<f64>> {
        let (i, alpha) = self.bracket(p)?;
        let mut w = vec![0.0; self.locals.len()];
        w[i] = alpha;
        if alpha < 1.0 {
            w[i + 1] = 1.0 - alpha;
        }
        Ok(w)
    }

    /// Lower node index and its weight.
    fn bracket(&self, p: f64) -> Result<(usize, f64)> {
        if !p.is_finite() {
            return Err(Error::NonFinite("scheduling parameter".into()));
        }
        let (lo, hi) = self.param_range();
        let p = p.clamp(lo, hi);
        let n = self.locals.len();
        if n == 1 || p <= lo {
            return Ok((0, 1.0));
        }
        if p >= hi {
            return Ok((n - 1, 1.0));
        }
        let i = self.locals.partition_point(|l| l.working_point <= p) - 1;
        let (p0, p1) = (self.locals[i].working_point, self.locals[i + 1].working_point);
        if p == p0 {
            return Ok((i, 1.0));
        }
        Ok((i, (p1 - p) / (p1 - p0)))
    }

    /// `(A(p), B(p))`.
    pub fn evaluate(&self, p: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (i, alpha) = self.bracket(p)?;
        let l0 = &self.locals[i];
        if alpha == 1.0 {
            return Ok((l0.a.clone(), l0.b.clone()));
        }
        let l1 = &self.locals[i + 1];
        let beta = 1.0 - alpha;
        Ok((&l0.a * alpha + &l1.a * beta, &l0.b * alpha + &l1.b * beta))
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.basis.lift(x)
    }

    pub fn output(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.lifted_dim() {
            return Err(Error::dim("lifted vector", self.lifted_dim(), y.len()));
        }
        Ok(&self.c * y)
    }

    /// Open-loop prediction `x_hat_k = C y_k`, `k = 0..=H`, with `H = params.len()`.
    /// For models without inputs `inputs` may be empty.
    pub fn predict(&self, x0: &DVector<f64>, inputs: &[DVector<f64>], params: &[f64]) -> Result<Vec<DVector<f64>>> {
        Ok(self
            .predict_lifted(x0, inputs, params)?
            .iter()
            .map(|y| &self.c * y)
            .collect())
    }

    pub fn predict_lifted(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        params: &[f64],
    ) -> Result<Vec<DVector<f64>>> {
        let m = self.input_dim();
        let autonomous = m == 0 && inputs.is_empty();
        if !autonomous && inputs.len() != params.len() {
            return Err(Error::dim("prediction inputs", params.len(), inputs.len()));
        }
        if let Some(u) = inputs.iter().find(|u| u.len() != m) {
            return Err(Error::dim("prediction input", m, u.len()));
        }
        let mut y = self.lift(x0)?;
        let mut out = Vec::with_capacity(params.len() + 1);
        out.push(y.clone());
        for (k, &p) in params.iter().enumerate() {
            let (a, b) = self.evaluate(p)?;
            let mut next = &a * &y;
            if !autonomous {
                next += &b * &inputs[k];
            }
            y = next;
            out.push(y.clone());
        }
        Ok(out)
    }

    /// One-step lifted residuals `Psi(x+) - A(p) Psi(x) - B(p) u` with `p`
    /// the snapshot working point.
    pub fn residuals(&self, snaps: &SnapshotSet) -> Result<DMatrix<f64>> {
        let (y, y_plus) = lift_snapshots(&self.basis, snaps)?;
        if snaps.u.nrows() != self.input_dim() {
            return Err(Error::dim("snapshot inputs", self.input_dim(), snaps.u.nrows()));
        }
        let (a, b) = self.evaluate(snaps.working_point)?;
        Ok(y_plus - a * y - b * &snaps.u)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PvkoModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Interval hull of all one-step residuals on `validation`, scaled about its
/// center by `inflation`. The validation data should be disjoint from the
/// identification data.
pub fn estimate_disturbance_set(
    model: &PvkoModel,
    validation: &[SnapshotSet],
    inflation: f64,
) -> Result<DisturbanceSet> {
    if validation.is_empty() || validation.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("no validation data".into()));
    }
    if !(inflation >= 1.0) || !inflation.is_finite() {
        return Err(Error::InvalidInput("inflation must be a finite value >= 1".into()));
    }
    let q = model.lifted_dim();
    let mut lo = DVector::from_element(q, f64::INFINITY);
    let mut hi = DVector::from_element(q, f64::NEG_INFINITY);
    let mut samples = 0;
    for snaps in validation {
        let r = model.residuals(snaps)?;
        for col in r.column_iter() {
            lo = lo.inf(&col.into_owned());
            hi = hi.sup(&col.into_owned());
        }
        samples += r.ncols();
    }
    let center = (&lo + &hi) * 0.5;
    let half = (&hi - &lo) * (0.5 * inflation);
    Ok(DisturbanceSet {
        set: Zonotope::from_box(center, &half)?,
        inflation,
        samples,
    })
}

/// Identifies one local model per snapshot set and a shared output map from
/// the pooled lifted data.
pub fn identify_pvko(basis: &LiftingBasis, training: &[SnapshotSet], truncation_tol: f64) -> Result<PvkoModel> {
    if training.is_empty() {
        return Err(Error::InvalidInput("no training data".into()));
    }
    let dt = training[0].dt;
    if training.iter().any(|s| (s.dt - dt).abs() > 1e-12 * dt) {
        return Err(Error::InvalidInput("snapshot sets use different sampling times".into()));
    }
    let fits: Vec<(LocalKoopman, DMatrix<f64>, f64)> = training
        .par_iter()
        .map(|snaps| {
            let (y, y_plus) = lift_snapshots(basis, snaps)?;
            let local = identify_local(snaps.working_point, &y, &y_plus, &snaps.u, truncation_tol)?;
            let resid = (&y_plus - &local.a * &y - &local.b * &snaps.u).norm() / y_plus.norm().max(f64::MIN_POSITIVE);
            Ok((local, y, resid))
        })
        .collect::<Result<_>>()?;
    let total: usize = training.iter().map(|s| s.len()).sum();
    let q = basis.lifted_dim();
    let n = basis.state_dim();
    let mut y_all = DMatrix::zeros(q, total);
    let mut x_all = DMatrix::zeros(n, total);
    let mut col = 0;
    for ((_, y, _), snaps) in fits.iter().zip(training) {
        y_all.columns_mut(col, y.ncols()).copy_from(y);
        x_all.columns_mut(col, y.ncols()).copy_from(&snaps.x);
        col += y.ncols();
    }
    let c = identify_output_map(&y_all, &x_all)?;
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| fits[a].0.working_point.total_cmp(&fits[b].0.working_point));
    let locals = order.iter().map(|&i| fits[i].0.clone()).collect();
    let mut model = PvkoModel::new(basis.clone(), locals, c, dt)?;
    model.training_residuals = order.iter().map(|&i| fits[i].2).collect();
    Ok(model)
}

/// Single time-invariant model fitted on the pooled data of all working
/// points, placed at their mean.
pub fn identify_time_invariant(
    basis: &LiftingBasis,
    training: &[SnapshotSet],
    truncation_tol: f64,
) -> Result<PvkoModel> {
    if training.is_empty() {
        return Err(Error::InvalidInput("no training data".into()));
    }
    let mean_p = training.iter().map(|s| s.working_point).sum::<f64>() / training.len() as f64;
    let pooled = SnapshotSet::concat(training, mean_p)?;
    identify_pvko(basis, std::slice::from_ref(&pooled), truncation_tol)
}
