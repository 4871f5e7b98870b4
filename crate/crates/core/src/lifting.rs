//! Observation (lifting) functions mapping physical states into the lifted space.
//!
//! Two families are supported: monomials of the state coordinates, and
//! thin-plate radial basis functions `r^2 log r` centred at points drawn from
//! a seeded uniform distribution over a box.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Axis-aligned box `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = DomainBox { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() {
            return Err(Error::dim("domain box bounds", self.lo.len(), self.hi.len()));
        }
        ensure_finite(self.lo.iter().chain(self.hi.iter()), "domain box")?;
        if self.lo.iter().zip(&self.hi).any(|(l, h)| l >= h) {
            return Err(Error::InvalidInput("domain box is degenerate".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| rng.gen_range(*l..*h)),
        )
    }
}

/// A fixed, ordered set of scalar observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiftingBasis {
    Monomial {
        state_dim: usize,
        exponents: Vec<Vec<u32>>,
    },
    ThinPlateRbf {
        state_dim: usize,
        #[serde(with = "crate::matrix_serde::vec_list")]
        centers: Vec<DVector<f64>>,
        seed: u64,
        /// Prepend the raw state coordinates to the RBF observables.
        #[serde(default)]
        append_state: bool,
    },
}

/// Exponents of `[x, y, xy, x^2, y^2, x^2 y, x y^2, x^3, y^3]`.
pub fn van_der_pol_exponents() -> Vec<Vec<u32>> {
    vec![
        vec![1, 0],
        vec![0, 1],
        vec![1, 1],
        vec![2, 0],
        vec![0, 2],
        vec![2, 1],
        vec![1, 2],
        vec![3, 0],
        vec![0, 3],
    ]
}

pub fn make_monomial_basis(state_dim: usize, exponents: Vec<Vec<u32>>) -> Result<LiftingBasis> {
    if state_dim == 0 {
        return Err(Error::InvalidInput("state dimension must be positive".into()));
    }
    if exponents.is_empty() {
        return Err(Error::InvalidInput("exponent list is empty".into()));
    }
    for e in &exponents {
        if e.len() != state_dim {
            return Err(Error::dim("monomial exponent vector", state_dim, e.len()));
        }
    }
    for (i, e) in exponents.iter().enumerate() {
        if exponents[..i].contains(e) {
            return Err(Error::InvalidInput(format!("duplicate exponent vector {e:?}")));
        }
    }
    for j in 0..state_dim {
        let unit: Vec<u32> = (0..state_dim).map(|k| u32::from(k == j)).collect();
        if !exponents.contains(&unit) {
            return Err(Error::InvalidInput(format!(
                "monomial basis must contain the unit exponent {unit:?} so the state is embedded"
            )));
        }
    }
    Ok(LiftingBasis::Monomial { state_dim, exponents })
}

pub fn make_thin_plate_basis(
    state_dim: usize,
    num_centers: usize,
    domain: &DomainBox,
    seed: u64,
) -> Result<LiftingBasis> {
    make_thin_plate_basis_with(state_dim, num_centers, domain, seed, false)
}

pub fn make_thin_plate_basis_with(
    state_dim: usize,
    num_centers: usize,
    domain: &DomainBox,
    seed: u64,
    append_state: bool,
) -> Result<LiftingBasis> {
    if num_centers == 0 {
        return Err(Error::InvalidInput("thin-plate basis needs at least one center".into()));
    }
    if state_dim == 0 {
        return Err(Error::InvalidInput("state dimension must be positive".into()));
    }
    if num_centers < state_dim && !append_state {
        return Err(Error::InvalidInput(format!(
            "{num_centers} centers cannot span a {state_dim}-dimensional state"
        )));
    }
    if domain.dim() != state_dim {
        return Err(Error::dim("domain box", state_dim, domain.dim()));
    }
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = (0..num_centers).map(|_| domain.sample(&mut rng)).collect();
    Ok(LiftingBasis::ThinPlateRbf {
        state_dim,
        centers,
        seed,
        append_state,
    })
}

/// `r^2 log r`, extended continuously by 0 at the origin.
#[inline]
pub fn thin_plate(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

impl LiftingBasis {
    pub fn state_dim(&self) -> usize {
        match self {
            LiftingBasis::Monomial { state_dim, .. } | LiftingBasis::ThinPlateRbf { state_dim, .. } => *state_dim,
        }
    }

    pub fn lifted_dim(&self) -> usize {
        match self {
            LiftingBasis::Monomial { exponents, .. } => exponents.len(),
            LiftingBasis::ThinPlateRbf {
                centers,
                append_state,
                state_dim,
                ..
            } => centers.len() + if *append_state { *state_dim } else { 0 },
        }
    }

    /// Structural checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        match self {
            LiftingBasis::Monomial { state_dim, exponents } => {
                make_monomial_basis(*state_dim, exponents.clone()).map(|_| ())
            }
            LiftingBasis::ThinPlateRbf { state_dim, centers, .. } => {
                if centers.is_empty() {
                    return Err(Error::InvalidInput("thin-plate basis has no centers".into()));
                }
                for c in centers {
                    if c.len() != *state_dim {
                        return Err(Error::dim("thin-plate center", *state_dim, c.len()));
                    }
                    ensure_finite(c.iter(), "thin-plate center")?;
                }
                Ok(())
            }
        }
    }

    /// Positions in the lifted vector that hold the raw state coordinates, if any.
    pub fn state_positions(&self) -> Option<Vec<usize>> {
        match self {
            LiftingBasis::Monomial { state_dim, exponents } => (0..*state_dim)
                .map(|j| {
                    exponents
                        .iter()
                        .position(|e| e.iter().enumerate().all(|(k, &p)| p == u32::from(k == j)))
                })
                .collect(),
            LiftingBasis::ThinPlateRbf {
                append_state: true,
                state_dim,
                ..
            } => Some((0..*state_dim).collect()),
            _ => None,
        }
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dim("lift_state", self.state_dim(), x.len()));
        }
        let mut out = DVector::zeros(self.lifted_dim());
        self.lift_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked evaluation into a preallocated buffer of length `lifted_dim`.
    pub(crate) fn lift_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            LiftingBasis::Monomial { exponents, .. } => {
                for (o, e) in out.iter_mut().zip(exponents) {
                    *o = x.iter().zip(e).map(|(xi, &p)| xi.powi(p as i32)).product();
                }
            }
            LiftingBasis::ThinPlateRbf {
                centers, append_state, ..
            } => {
                let offset = if *append_state {
                    out[..x.len()].copy_from_slice(x);
                    x.len()
                } else {
                    0
                };
                for (o, c) in out[offset..].iter_mut().zip(centers) {
                    let r2: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    *o = thin_plate(r2.sqrt());
                }
            }
        }
    }

    /// Lifts every column of an `n x M` state matrix.
    pub fn lift_columns(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.nrows() != self.state_dim() {
            return Err(Error::dim("lift_columns", self.state_dim(), xs.nrows()));
        }
        let q = self.lifted_dim();
        let mut out = DMatrix::zeros(q, xs.ncols());
        for j in 0..xs.ncols() {
            let col = xs.column(j);
            let x: Vec<f64> = col.iter().copied().collect();
            let mut buf = vec![0.0; q];
            self.lift_into(&x, &mut buf);
            out.column_mut(j).copy_from_slice(&buf);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vdp() -> LiftingBasis {
        make_monomial_basis(2, van_der_pol_exponents()).unwrap()
    }

    #[test]
    fn vdp_basis_has_nine_observables() {
        assert_eq!(vdp().lifted_dim(), 9);
    }

    #[test]
    fn identity_basis() {
        let b = make_monomial_basis(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let x = DVector::from_vec(vec![3.0, 0.5]);
        assert_eq!(b.lift(&x).unwrap(), x);
    }

    #[test]
    fn vdp_basis_at_ones() {
        let y = vdp().lift(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn vdp_basis_hand_values() {
        let y = vdp().lift(&DVector::from_vec(vec![3.0, 0.5])).unwrap();
        let expected = [3.0, 0.5, 1.5, 9.0, 0.25, 4.5, 0.75, 27.0, 0.125];
        assert_eq!(y.as_slice(), &expected);
    }

    #[test]
    fn monomial_rejections() {
        assert!(make_monomial_basis(2, vec![]).is_err());
        assert!(make_monomial_basis(2, vec![vec![1, 0], vec![0, 1], vec![1, 0]]).is_err());
        assert!(make_monomial_basis(2, vec![vec![1, 0], vec![2, 0]]).is_err());
        assert!(make_monomial_basis(2, vec![vec![1, 0, 0], vec![0, 1]]).is_err());
    }

    #[test]
    fn lift_rejects_wrong_dimension() {
        assert!(vdp().lift(&DVector::from_vec(vec![1.0])).is_err());
    }

    fn lorenz_box() -> DomainBox {
        DomainBox::new(vec![-20.0, -25.0, 5.0], vec![20.0, 25.0, 45.0]).unwrap()
    }

    #[test]
    fn thin_plate_dimension_and_zero_at_center() {
        let b = make_thin_plate_basis(3, 50, &lorenz_box(), 4).unwrap();
        assert_eq!(b.lifted_dim(), 50);
        let LiftingBasis::ThinPlateRbf { centers, .. } = &b else {
            unreachable!()
        };
        for (i, c) in centers.iter().enumerate().take(5) {
            assert_eq!(b.lift(c).unwrap()[i], 0.0);
            let mut unit = c.clone();
            unit[0] += 1.0;
            assert_eq!(b.lift(&unit).unwrap()[i], 0.0);
        }
    }

    #[test]
    fn thin_plate_rejects_zero_centers() {
        assert!(make_thin_plate_basis(3, 0, &lorenz_box(), 1).is_err());
    }

    #[test]
    fn thin_plate_seed_determinism() {
        let a = make_thin_plate_basis(3, 10, &lorenz_box(), 9).unwrap();
        let b = make_thin_plate_basis(3, 10, &lorenz_box(), 9).unwrap();
        let c = make_thin_plate_basis(3, 10, &lorenz_box(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn append_state_embeds_coordinates() {
        let b = make_thin_plate_basis_with(3, 5, &lorenz_box(), 2, true).unwrap();
        assert_eq!(b.lifted_dim(), 8);
        let x = DVector::from_vec(vec![1.0, -2.0, 7.0]);
        let y = b.lift(&x).unwrap();
        assert_eq!(&y.as_slice()[..3], x.as_slice());
        assert_eq!(b.state_positions(), Some(vec![0, 1, 2]));
    }

    #[test]
    fn lift_columns_matches_pointwise() {
        let b = vdp();
        let xs = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 2.0, 0.25, 3.0, -1.0]);
        let ys = b.lift_columns(&xs).unwrap();
        for j in 0..3 {
            let y = b.lift(&xs.column(j).into_owned()).unwrap();
            assert_eq!(ys.column(j), y.column(0));
        }
    }

    #[test]
    fn basis_json_round_trip() {
        let b = make_thin_plate_basis(3, 4, &lorenz_box(), 3).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        let back: LiftingBasis = serde_json::from_str(&s).unwrap();
        assert_eq!(b, back);
        let m = vdp();
        let back: LiftingBasis = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monomials_embed_state(x in -5.0f64..5.0, y in -5.0f64..5.0) {
                let b = vdp();
                let v = DVector::from_vec(vec![x, y]);
                let l = b.lift(&v).unwrap();
                let pos = b.state_positions().unwrap();
                prop_assert_eq!(l[pos[0]], x);
                prop_assert_eq!(l[pos[1]], y);
                prop_assert_eq!(b.lift(&v).unwrap(), l);
            }

            #[test]
            fn thin_plate_is_continuous(
                x in prop::array::uniform3(-15.0f64..15.0),
                d in prop::array::uniform3(-1.0f64..1.0),
            ) {
                let b = make_thin_plate_basis(3, 20, &lorenz_box(), 5).unwrap();
                let p = DVector::from_row_slice(&x);
                let dir = DVector::from_row_slice(&d);
                let scale = if dir.norm() > 0.0 { 1e-8 / dir.norm() } else { 0.0 };
                let q = &p + dir * scale;
                let a = b.lift(&p).unwrap();
                let c = b.lift(&q).unwrap();
                for i in 0..a.len() {
                    prop_assert!((a[i] - c[i]).abs() <= 1e-5);
                }
            }
        }
    }
}
