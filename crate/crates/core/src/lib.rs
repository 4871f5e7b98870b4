//! Parameter-varying Koopman models and tube MPC.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`lifting`]: observables (monomials, thin-plate RBFs) mapping states to
//!   a lifted space.
//! - [`edmd`]: least-squares Koopman fits per working point.
//! - [`pvko`]: the interpolated family `A(p), B(p)` and the disturbance box
//!   estimated from held-out residuals.
//! - [`sets`]: zonotopes, polytopes and the robust invariant error set.
//! - [`synthesis`]: the common-Lyapunov feedback gain, solved by the barrier
//!   method in [`sdp`].
//! - [`mpc`]: the tube MPC program, solved by the ADMM solver in [`qp`], and
//!   the closed-loop driver.
//! - [`simlab`]: plants, parameter signals, data campaigns and metrics.
//! - [`cli`]: the `pvko` command line.
//!
//! ```
//! use nalgebra::{DMatrix, DVector};
//! use pvko::edmd::LocalKoopman;
//! use pvko::lifting::make_monomial_basis;
//! use pvko::pvko::PvkoModel;
//!
//! let basis = make_monomial_basis(1, vec![vec![1]]).unwrap();
//! let lo = LocalKoopman::new(1.0, DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 1.0)).unwrap();
//! let hi = LocalKoopman::new(3.0, DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0)).unwrap();
//! let model = PvkoModel::new(basis, vec![lo, hi], DMatrix::identity(1, 1), 0.01).unwrap();
//! let (a, _) = model.evaluate(2.0).unwrap();
//! assert!((a[(0, 0)] - 0.7).abs() < 1e-12);
//! let path = model.predict(&DVector::from_element(1, 1.0), &[DVector::zeros(1)], &[2.0]).unwrap();
//! assert!((path[1][0] - 0.7).abs() < 1e-12);
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation, and index
// loops mirror the matrix algebra they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod edmd;
pub mod error;
pub mod lifting;
pub mod matrix_serde;
pub mod mpc;
pub mod pvko;
pub mod qp;
pub mod sdp;
pub mod sets;
pub mod simlab;
pub mod synthesis;

pub use error::{Error, Result};
