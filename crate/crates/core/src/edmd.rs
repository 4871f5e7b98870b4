//! Least-squares identification of lifted linear models from snapshot data.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::lifting::LiftingBasis;

/// Default relative cutoff for singular values in the pseudo-inverse.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-10;

/// One recorded run: the visited states and the inputs applied between them.
pub type Episode = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Aligned state/successor/input samples recorded at one working point.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub working_point: f64,
    /// Sampling interval of the underlying trajectories.
    pub dt: f64,
    pub x: DMatrix<f64>,
    pub x_plus: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl SnapshotSet {
    pub fn new(working_point: f64, dt: f64, x: DMatrix<f64>, x_plus: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("snapshot set is empty".into()));
        }
        if x_plus.ncols() != x.ncols() {
            return Err(Error::dim("snapshot successor columns", x.ncols(), x_plus.ncols()));
        }
        if x_plus.nrows() != x.nrows() {
            return Err(Error::dim("snapshot successor rows", x.nrows(), x_plus.nrows()));
        }
        if u.ncols() != x.ncols() {
            return Err(Error::dim("snapshot input columns", x.ncols(), u.ncols()));
        }
        if !working_point.is_finite() || !(dt > 0.0) {
            return Err(Error::InvalidInput("snapshot working point / dt invalid".into()));
        }
        ensure_finite(x.iter().chain(x_plus.iter()).chain(u.iter()), "snapshot data")?;
        Ok(SnapshotSet {
            working_point,
            dt,
            x,
            x_plus,
            u,
        })
    }

    /// Builds pairs from consecutive samples of each episode. `inputs[e][k]`
    /// is the input applied between `states[e][k]` and `states[e][k+1]`.
    pub fn from_episodes(working_point: f64, dt: f64, episodes: &[Episode]) -> Result<Self> {
        let n = episodes
            .iter()
            .find_map(|(s, _)| s.first().map(|v| v.len()))
            .ok_or_else(|| Error::InvalidInput("snapshot set is empty".into()))?;
        let m = episodes
            .iter()
            .find_map(|(_, u)| u.first().map(|v| v.len()))
            .unwrap_or(0);
        let pairs: usize = episodes.iter().map(|(s, _)| s.len().saturating_sub(1)).sum();
        let mut x = DMatrix::zeros(n, pairs);
        let mut xp = DMatrix::zeros(n, pairs);
        let mut u = DMatrix::zeros(m, pairs);
        let mut j = 0;
        for (states, inputs) in episodes {
            if states.len() < 2 {
                continue;
            }
            if inputs.len() + 1 < states.len() {
                return Err(Error::dim("episode inputs", states.len() - 1, inputs.len()));
            }
            for k in 0..states.len() - 1 {
                x.set_column(j, &states[k]);
                xp.set_column(j, &states[k + 1]);
                if m > 0 {
                    u.set_column(j, &inputs[k]);
                }
                j += 1;
            }
        }
        SnapshotSet::new(working_point, dt, x, xp, u)
    }

    pub fn state_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Concatenates several sets column-wise (used for pooled models).
    pub fn concat(sets: &[SnapshotSet], working_point: f64) -> Result<SnapshotSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("no snapshot sets to pool".into()))?;
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let (n, m) = (first.state_dim(), first.input_dim());
        let mut x = DMatrix::zeros(n, total);
        let mut xp = DMatrix::zeros(n, total);
        let mut u = DMatrix::zeros(m, total);
        let mut off = 0;
        for s in sets {
            if s.state_dim() != n || s.input_dim() != m {
                return Err(Error::dim("pooled snapshot dimension", n, s.state_dim()));
            }
            let k = s.len();
            x.columns_mut(off, k).copy_from(&s.x);
            xp.columns_mut(off, k).copy_from(&s.x_plus);
            u.columns_mut(off, k).copy_from(&s.u);
            off += k;
        }
        SnapshotSet::new(working_point, first.dt, x, xp, u)
    }

    /// Writes one row per time step: `t,x1..xn,u1..um,p`. Episodes are
    /// recovered from column continuity and restart at `t = 0`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("p".into());
        wtr.write_record(&header)?;
        let mut step = 0usize;
        let row = |t: f64, x: &[f64], u: &[f64]| -> Vec<String> {
            let mut r = vec![fmt_f64(t)];
            r.extend(x.iter().map(|v| fmt_f64(*v)));
            r.extend(u.iter().map(|v| fmt_f64(*v)));
            r.push(fmt_f64(self.working_point));
            r
        };
        let zeros = vec![0.0; m];
        for j in 0..self.len() {
            let xj: Vec<f64> = self.x.column(j).iter().copied().collect();
            let uj: Vec<f64> = self.u.column(j).iter().copied().collect();
            wtr.write_record(row(step as f64 * self.dt, &xj, &uj))?;
            step += 1;
            let continues = j + 1 < self.len() && self.x.column(j + 1) == self.x_plus.column(j);
            if !continues {
                let xp: Vec<f64> = self.x_plus.column(j).iter().copied().collect();
                wtr.write_record(row(step as f64 * self.dt, &xp, &zeros))?;
                step = 0;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<SnapshotSet> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h.trim() == name);
        let t_col = col("t").ok_or_else(|| Error::Parse("snapshot CSV: missing column `t`".into()))?;
        let p_col = col("p").ok_or_else(|| Error::Parse("snapshot CSV: missing column `p`".into()))?;
        let x_cols: Vec<usize> = (1..).map_while(|i| col(&format!("x{i}"))).collect();
        let u_cols: Vec<usize> = (1..).map_while(|i| col(&format!("u{i}"))).collect();
        if x_cols.is_empty() {
            return Err(Error::Parse("snapshot CSV: missing column `x1`".into()));
        }
        let expected = 2 + x_cols.len() + u_cols.len();
        if header.len() != expected {
            return Err(Error::Parse(format!(
                "snapshot CSV: expected {expected} columns (t, x1..x{}, u1..u{}, p), found {}",
                x_cols.len(),
                u_cols.len(),
                header.len()
            )));
        }
        let mut episodes: Vec<Episode> = Vec::new();
        let mut last_t = f64::INFINITY;
        let mut dt = None;
        let mut wp = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| -> Result<f64> {
                let s = rec.get(c).unwrap_or("").trim();
                s.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "snapshot CSV line {}: field `{}` is not a number: {s:?}",
                        line + 2,
                        &header[c]
                    ))
                })
            };
            let t = field(t_col)?;
            let p = field(p_col)?;
            match wp {
                None => wp = Some(p),
                Some(w) if (w - p).abs() > 1e-12 * w.abs().max(1.0) => {
                    return Err(Error::Parse(format!(
                        "snapshot CSV line {}: parameter {p} differs from working point {w}",
                        line + 2
                    )))
                }
                _ => {}
            }
            let x = DVector::from_iterator(
                x_cols.len(),
                x_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?,
            );
            let u = DVector::from_iterator(
                u_cols.len(),
                u_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?,
            );
            if t <= last_t {
                episodes.push((Vec::new(), Vec::new()));
            } else if dt.is_none() {
                dt = Some(t - last_t);
            }
            last_t = t;
            let ep = episodes.last_mut().expect("episode started");
            ep.0.push(x);
            ep.1.push(u);
        }
        let wp = wp.ok_or_else(|| Error::Parse("snapshot CSV has no data rows".into()))?;
        let dt = dt.ok_or_else(|| Error::Parse("snapshot CSV has no consecutive samples".into()))?;
        SnapshotSet::from_episodes(wp, dt, &episodes)
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Lifted local model `y+ = A y + B u` at one working point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalKoopman {
    pub working_point: f64,
    #[serde(with = "crate::matrix_serde::mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub b: DMatrix<f64>,
}

impl LocalKoopman {
    pub fn new(working_point: f64, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dim("local A columns", a.nrows(), a.ncols()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dim("local B rows", a.nrows(), b.nrows()));
        }
        ensure_finite(a.iter().chain(b.iter()), "local Koopman matrices")?;
        if !working_point.is_finite() {
            return Err(Error::NonFinite("working point".into()));
        }
        Ok(LocalKoopman { working_point, a, b })
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

pub fn lift_snapshots(basis: &LiftingBasis, snaps: &SnapshotSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if snaps.is_empty() {
        return Err(Error::InvalidInput("snapshot set is empty".into()));
    }
    Ok((basis.lift_columns(&snaps.x)?, basis.lift_columns(&snaps.x_plus)?))
}

/// Thin SVD factors of `Z = U diag(s) V^T` keeping singular values above
/// `tol * s_max`. `Z` is typically wide (few rows, many columns).
struct TruncatedSvd {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

fn truncated_svd(z: &DMatrix<f64>, tol: f64) -> Result<TruncatedSvd> {
    ensure_finite(z.iter(), "regression data")?;
    // Decompose the tall transpose Z^T = V S U^T, which nalgebra handles thinly.
    let svd = z.transpose().svd(true, true);
    let (ut, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(smax > 0.0) {
        return Err(Error::RankZero);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol * smax)
        .collect();
    if keep.is_empty() {
        return Err(Error::RankZero);
    }
    let u = DMatrix::from_fn(z.nrows(), keep.len(), |i, k| vt[(keep[k], i)]);
    let v = DMatrix::from_fn(z.ncols(), keep.len(), |j, k| ut[(j, keep[k])]);
    let s = DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i]));
    Ok(TruncatedSvd { u, s, v })
}

/// `lhs * pinv(z)` through a truncated SVD of `z`.
pub fn solve_pinv(lhs: &DMatrix<f64>, z: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if lhs.ncols() != z.ncols() {
        return Err(Error::dim("pseudo-inverse columns", z.ncols(), lhs.ncols()));
    }
    let f = truncated_svd(z, tol)?;
    let mut w = lhs * &f.v;
    for (k, s) in f.s.iter().enumerate() {
        w.column_mut(k).scale_mut(1.0 / s);
    }
    Ok(w * f.u.transpose())
}

/// Fits `[A B] = Y+ pinv([Y; U])` at one working point.
pub fn identify_local(
    working_point: f64,
    y: &DMatrix<f64>,
    y_plus: &DMatrix<f64>,
    u: &DMatrix<f64>,
    truncation_tol: f64,
) -> Result<LocalKoopman> {
    let (q, m, cols) = (y.nrows(), u.nrows(), y.ncols());
    if y_plus.shape() != y.shape() {
        return Err(Error::dim("Y+ columns", cols, y_plus.ncols()));
    }
    if u.ncols() != cols {
        return Err(Error::dim("U columns", cols, u.ncols()));
    }
    if cols == 0 {
        return Err(Error::InvalidInput("no snapshot columns".into()));
    }
    ensure_finite(y.iter().chain(y_plus.iter()).chain(u.iter()), "snapshot data")?;
    let mut z = DMatrix::zeros(q + m, cols);
    z.rows_mut(0, q).copy_from(y);
    if m > 0 {
        z.rows_mut(q, m).copy_from(u);
    }
    let f = truncated_svd(&z, truncation_tol)?;
    // Y+ V S^-1, then split U^T into the state and input row blocks.
    let mut w = y_plus * &f.v;
    for (k, s) in f.s.iter().enumerate() {
        w.column_mut(k).scale_mut(1.0 / s);
    }
    let u_a = f.u.rows(0, q);
    let u_b = f.u.rows(q, m);
    let a = &w * u_a.transpose();
    let b = &w * u_b.transpose();
    LocalKoopman::new(working_point, a, b)
}

/// Output map `C = X pinv(Y)` minimizing `||X - C Y||_F`.
pub fn identify_output_map(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.ncols() == 0 {
        return Err(Error::InvalidInput("no data for output map".into()));
    }
    solve_pinv(x, y, DEFAULT_TRUNCATION_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{make_monomial_basis, van_der_pol_exponents};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    /// Normal-equations least squares: `lhs * Z^T (Z Z^T)^-1`.
    fn normal_equations(lhs: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        let g = z * z.transpose();
        let inv = g.try_inverse().unwrap();
        lhs * z.transpose() * inv
    }

    #[allow(clippy::type_complexity)]
    fn lti_data(seed: u64, cols: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(2, cols, |_, _| rng.gen_range(-1.0..1.0));
        let u = DMatrix::from_fn(1, cols, |_, _| rng.gen_range(-1.0..1.0));
        let yp = &a0 * &y + &b0 * &u;
        (a0, b0, y, yp, u)
    }

    #[test]
    fn recovers_known_lti() {
        let (a0, b0, y, yp, u) = lti_data(1, 50);
        let k = identify_local(0.0, &y, &yp, &u, DEFAULT_TRUNCATION_TOL).unwrap();
        assert!(rel_err(&k.a, &a0) < 1e-8);
        assert!(rel_err(&k.b, &b0) < 1e-8);
    }

    #[test]
    fn fixed_points_give_projector() {
        // Rank-2 data in R^3 with no input: A must be the projector onto span(Y).
        let y = DMatrix::from_row_slice(3, 4, &[1.0, 0.0, 1.0, 2.0, 0.0, 1.0, 1.0, -1.0, 1.0, 1.0, 2.0, 1.0]);
        let u = DMatrix::zeros(1, 4);
        let k = identify_local(0.0, &y, &y, &u, DEFAULT_TRUNCATION_TOL).unwrap();
        // Oracle: orthogonal projector from an explicit basis of the column space.
        let basis = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let proj = &basis * (basis.transpose() * &basis).try_inverse().unwrap() * basis.transpose();
        assert!((&k.a - &proj).norm() < 1e-10);
        assert!(k.b.norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_matches_min_norm_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut y = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let col = y.column(0).into_owned();
        y.set_column(1, &col);
        let u = DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0));
        let yp = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let k = identify_local(0.0, &y, &yp, &u, DEFAULT_TRUNCATION_TOL).unwrap();
        let fitted = (&yp - (&k.a * &y + &k.b * &u)).norm();
        // Oracle: drop the duplicated column (it carries no new information
        // but its target is averaged), then a 4x5 full-rank dense solve.
        let mut z = DMatrix::zeros(4, 6);
        z.rows_mut(0, 3).copy_from(&y);
        z.rows_mut(3, 1).copy_from(&u);
        let g = (&z * z.transpose()).pseudo_inverse(1e-12).unwrap();
        let ab = &yp * z.transpose() * g;
        let oracle = (&yp - &ab * &z).norm();
        assert!((fitted - oracle).abs() < 1e-10, "{fitted} vs {oracle}");
    }

    #[test]
    fn rank_zero_is_rejected() {
        let y = DMatrix::zeros(2, 5);
        let u = DMatrix::zeros(1, 5);
        assert!(matches!(
            identify_local(0.0, &y, &y, &u, DEFAULT_TRUNCATION_TOL),
            Err(Error::RankZero)
        ));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut y = DMatrix::from_element(2, 5, 1.0);
        y[(0, 0)] = f64::NAN;
        let u = DMatrix::zeros(1, 5);
        assert!(matches!(
            identify_local(0.0, &y, &y, &u, DEFAULT_TRUNCATION_TOL),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn output_map_identity_and_single_column() {
        let (_, _, y, _, _) = lti_data(5, 20);
        let c = identify_output_map(&y, &y).unwrap();
        assert!((c - DMatrix::identity(2, 2)).norm() < 1e-10);

        let yv = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let xv = DMatrix::from_column_slice(2, 1, &[3.0, -1.0]);
        let c = identify_output_map(&yv, &xv).unwrap();
        // pinv of a column vector y is y^T / |y|^2.
        let expected = &xv * yv.transpose() / 9.0;
        assert!((&c - expected).norm() < 1e-12);
        assert_eq!(c.rank(1e-10), 1);
    }

    #[test]
    fn output_map_recovers_embedded_state() {
        let basis = make_monomial_basis(2, van_der_pol_exponents()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(2, 200, |_, _| rng.gen_range(-2.0..2.0));
        let y = basis.lift_columns(&x).unwrap();
        let c = identify_output_map(&y, &x).unwrap();
        assert!((&x - &c * &y).norm() / x.norm() <= 1e-8);
    }

    #[test]
    fn lift_snapshots_identity_and_empty() {
        let basis = make_monomial_basis(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let xp = DMatrix::from_row_slice(2, 2, &[2.0, 5.0, 4.0, 6.0]);
        let s = SnapshotSet::new(1.0, 0.1, x.clone(), xp.clone(), DMatrix::zeros(0, 2)).unwrap();
        let (y, yp) = lift_snapshots(&basis, &s).unwrap();
        assert_eq!(y, x);
        assert_eq!(yp, xp);
        assert!(SnapshotSet::new(
            1.0,
            0.1,
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(0, 0)
        )
        .is_err());
    }

    #[test]
    fn lift_snapshots_single_pair_matches_lift_state() {
        let basis = make_monomial_basis(2, van_der_pol_exponents()).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[0.7, -1.2]);
        let xp = DMatrix::from_column_slice(2, 1, &[0.68, -1.1]);
        let s = SnapshotSet::new(2.0, 0.01, x.clone(), xp.clone(), DMatrix::from_element(1, 1, 0.3)).unwrap();
        let (y, yp) = lift_snapshots(&basis, &s).unwrap();
        assert_eq!(y.column(0), basis.lift(&x.column(0).into_owned()).unwrap().column(0));
        assert_eq!(yp.column(0), basis.lift(&xp.column(0).into_owned()).unwrap().column(0));
    }

    #[test]
    fn csv_round_trip_preserves_episodes() {
        let ep1 = (
            vec![
                DVector::from_vec(vec![0.0, 1.0]),
                DVector::from_vec(vec![0.5, 0.25]),
                DVector::from_vec(vec![0.1, -0.3]),
            ],
            vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])],
        );
        let ep2 = (
            vec![DVector::from_vec(vec![2.0, 2.0]), DVector::from_vec(vec![1.5, 1.0])],
            vec![DVector::from_vec(vec![0.5])],
        );
        let s = SnapshotSet::from_episodes(3.0, 0.01, &[ep1, ep2]).unwrap();
        assert_eq!(s.len(), 3);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,u1,p\n"));
        assert!(!text.contains('\r'));
        let back = SnapshotSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.x, s.x);
        assert_eq!(back.x_plus, s.x_plus);
        assert_eq!(back.u, s.u);
        assert_eq!(back.working_point, 3.0);
        assert!((back.dt - 0.01).abs() < 1e-15);
    }

    #[test]
    fn csv_missing_column_is_descriptive() {
        let text = "t,x1,x2,u1\n0,1,2,3\n0.01,1,2,3\n";
        let err = SnapshotSet::read_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn residual_matches_normal_equations(seed in 0u64..10_000, q in 1usize..=5, cols in 8usize..=20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = DMatrix::from_fn(q, cols, |_, _| rng.gen_range(-1.0..1.0));
                let u = DMatrix::from_fn(1, cols, |_, _| rng.gen_range(-1.0..1.0));
                let yp = DMatrix::from_fn(q, cols, |_, _| rng.gen_range(-1.0..1.0));
                let k = identify_local(0.0, &y, &yp, &u, DEFAULT_TRUNCATION_TOL).unwrap();
                let mut z = DMatrix::zeros(q + 1, cols);
                z.rows_mut(0, q).copy_from(&y);
                z.rows_mut(q, 1).copy_from(&u);
                let ab = normal_equations(&yp, &z);
                let oracle = (&yp - &ab * &z).norm();
                let got = (&yp - (&k.a * &y + &k.b * &u)).norm();
                prop_assert!((oracle - got).abs() <= 1e-9);

                // Local optimality: perturbing [A B] never lowers the residual.
                let da = DMatrix::from_fn(q, q, |_, _| rng.gen_range(-1e-3..1e-3));
                let perturbed = (&yp - ((&k.a + da) * &y + &k.b * &u)).norm();
                prop_assert!(got <= perturbed + 1e-12);
            }

            #[test]
            fn scaling_data_scales_b_only(seed in 0u64..10_000, s in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0]) {
                let (_, _, y, yp, u) = lti_data(seed, 30);
                let base = identify_local(0.0, &y, &yp, &u, DEFAULT_TRUNCATION_TOL).unwrap();
                let scaled = identify_local(0.0, &(&y * s), &(&yp * s), &u, DEFAULT_TRUNCATION_TOL).unwrap();
                prop_assert!((&scaled.a - &base.a).norm() <= 1e-9);
                prop_assert!((&scaled.b - &base.b * s).norm() <= 1e-9 * s.abs().max(1.0));
            }
        }
    }
}
