//! Zonotopes and H-polytopes: support functions, Minkowski sums, Pontryagin
//! differences and the robust positively invariant outer approximation used
//! for tube constraint tightening.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// `{ c + G xi : xi in [-1, 1]^g }`; generators are the columns of `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    #[serde(with = "crate::matrix_serde::vec")]
    pub center: DVector<f64>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub generators: DMatrix<f64>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self> {
        if generators.nrows() != center.len() {
            return Err(Error::dim("zonotope generators", center.len(), generators.nrows()));
        }
        ensure_finite(center.iter().chain(generators.iter()), "zonotope")?;
        Ok(Zonotope { center, generators })
    }

    pub fn point(center: DVector<f64>) -> Self {
        let d = center.len();
        Zonotope {
            center,
            generators: DMatrix::zeros(d, 0),
        }
    }

    pub fn origin(dim: usize) -> Self {
        Self::point(DVector::zeros(dim))
    }

    /// Axis-aligned box with the given center and half-widths. Zero widths
    /// produce no generator.
    pub fn from_box(center: DVector<f64>, half_widths: &DVector<f64>) -> Result<Self> {
        if half_widths.len() != center.len() {
            return Err(Error::dim("box half-widths", center.len(), half_widths.len()));
        }
        if half_widths.iter().any(|h| *h < 0.0) {
            return Err(Error::InvalidInput("negative box half-width".into()));
        }
        let d = center.len();
        let axes: Vec<usize> = (0..d).filter(|&i| half_widths[i] > 0.0).collect();
        let mut g = DMatrix::zeros(d, axes.len());
        for (k, &i) in axes.iter().enumerate() {
            g[(i, k)] = half_widths[i];
        }
        Zonotope::new(center, g)
    }

    pub fn from_bounds(lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("box bounds", lo.len(), hi.len()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::InvalidInput("box lower bound exceeds upper bound".into()));
        }
        Self::from_box((lo + hi) * 0.5, &((hi - lo) * 0.5))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.ncols()
    }

    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        if direction.len() != self.dim() {
            return Err(Error::dim("support direction", self.dim(), direction.len()));
        }
        Ok(self.support_unchecked(direction.as_slice()))
    }

    pub(crate) fn support_unchecked(&self, v: &[f64]) -> f64 {
        let dv = DVector::from_column_slice(v);
        let mut s = self.center.dot(&dv);
        for g in self.generators.column_iter() {
            s += g.dot(&dv).abs();
        }
        s
    }

    /// Half-widths of the smallest enclosing axis-aligned box.
    pub fn half_widths(&self) -> DVector<f64> {
        let mut h = DVector::zeros(self.dim());
        for g in self.generators.column_iter() {
            for (hi, gi) in h.iter_mut().zip(g.iter()) {
                *hi += gi.abs();
            }
        }
        h
    }

    /// Largest half-width of the interval hull.
    pub fn radius(&self) -> f64 {
        self.half_widths().iter().cloned().fold(0.0, f64::max)
    }

    pub fn interval_hull(&self) -> Zonotope {
        Zonotope::from_box(self.center.clone(), &self.half_widths()).expect("finite box")
    }

    pub fn scale_about_center(&self, factor: f64) -> Zonotope {
        Zonotope {
            center: self.center.clone(),
            generators: &self.generators * factor,
        }
    }

    pub fn translate(&self, offset: &DVector<f64>) -> Zonotope {
        Zonotope {
            center: &self.center + offset,
            generators: self.generators.clone(),
        }
    }

    /// Girard's reduction: keeps the `max_generators - dim` most significant
    /// generators and boxes the rest. The result contains the input.
    pub fn reduce_order(&self, max_generators: usize) -> Zonotope {
        let (d, g) = (self.dim(), self.num_generators());
        if g <= max_generators || max_generators < d {
            return self.clone();
        }
        let mut scored: Vec<(f64, usize)> = self
            .generators
            .column_iter()
            .enumerate()
            .map(|(j, c)| {
                let l1: f64 = c.iter().map(|v| v.abs()).sum();
                let linf = c.iter().cloned().fold(0.0, |a: f64, v| a.max(v.abs()));
                (l1 - linf, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = max_generators - d;
        let mut boxed = DVector::zeros(d);
        for &(_, j) in &scored[keep..] {
            for i in 0..d {
                boxed[i] += self.generators[(i, j)].abs();
            }
        }
        let mut kept: Vec<usize> = scored[..keep].iter().map(|&(_, j)| j).collect();
        kept.sort_unstable();
        let nbox = (0..d).filter(|&i| boxed[i] > 0.0).count();
        let mut out = DMatrix::zeros(d, keep + nbox);
        for (k, &j) in kept.iter().enumerate() {
            out.set_column(k, &self.generators.column(j));
        }
        let mut k = keep;
        for i in 0..d {
            if boxed[i] > 0.0 {
                out[(i, k)] = boxed[i];
                k += 1;
            }
        }
        Zonotope {
            center: self.center.clone(),
            generators: out,
        }
    }

    /// Uniform draw of the generator coefficients.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.num_generators(), |_, _| rng.gen_range(-1.0..=1.0));
        &self.center + &self.generators * xi
    }

    /// Exact membership test in the zonotope scaled about its center by
    /// `1 + tol`, decided by a phase-one linear program over the generator
    /// coefficients.
    pub fn contains(&self, point: &DVector<f64>, tol: f64) -> Result<bool> {
        if point.len() != self.dim() {
            return Err(Error::dim("membership point", self.dim(), point.len()));
        }
        let r = point - &self.center;
        let scale = 1.0 + tol;
        if self.num_generators() == 0 {
            return Ok(r.amax() <= tol * (1.0 + self.center.amax()));
        }
        Ok(coefficients_exist(&self.generators, &r, scale))
    }
}

/// Decides whether `G xi = r` has a solution with `|xi_j| <= s`, using a
/// bounded-variable primal simplex on the phase-one problem with Bland's rule.
fn coefficients_exist(g: &DMatrix<f64>, r: &DVector<f64>, s: f64) -> bool {
    let (d, ng) = (g.nrows(), g.ncols());
    let ncols = ng + d;
    let ub = 2.0 * s;
    // z = xi + s in [0, 2s]:  G z = r + s G 1.
    let mut b = r.clone();
    for j in 0..ng {
        for i in 0..d {
            b[i] += s * g[(i, j)];
        }
    }
    let mut tab = DMatrix::zeros(d, ncols);
    for i in 0..d {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..ng {
            tab[(i, j)] = sign * g[(i, j)];
        }
        tab[(i, ng + i)] = 1.0;
        b[i] *= sign;
    }
    let scale = 1.0 + b.amax() + g.amax() * s * ng as f64;
    let mut beta = b;
    let mut basic: Vec<usize> = (ng..ncols).collect();
    let mut at_upper = vec![false; ncols];
    let is_basic = |basic: &[usize], j: usize| basic.contains(&j);
    let cost = |j: usize| if j >= ng { 1.0 } else { 0.0 };
    let upper = |j: usize| if j >= ng { f64::INFINITY } else { ub };
    let eps_rc = 1e-12;
    let eps_piv = 1e-12;

    for _ in 0..(200 * ncols + 1000) {
        // Reduced costs d_j = c_j - c_B^T T_j; Bland picks the first improving column.
        let mut entering = None;
        for j in 0..ncols {
            if is_basic(&basic, j) {
                continue;
            }
            let mut dj = cost(j);
            for i in 0..d {
                dj -= cost(basic[i]) * tab[(i, j)];
            }
            if (!at_upper[j] && dj < -eps_rc) || (at_upper[j] && dj > eps_rc) {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else { break };
        let dir = if at_upper[j] { -1.0 } else { 1.0 };
        let mut theta = upper(j);
        let mut leave: Option<(usize, bool)> = None;
        for i in 0..d {
            let delta = -dir * tab[(i, j)];
            if delta.abs() <= eps_piv {
                continue;
            }
            let (t, to_upper) = if delta < 0.0 {
                (beta[i] / -delta, false)
            } else {
                let u = upper(basic[i]);
                if u.is_infinite() {
                    continue;
                }
                ((u - beta[i]) / delta, true)
            };
            let t = t.max(0.0);
            let better = t < theta || (t == theta && leave.is_some_and(|(r, _)| basic[i] < basic[r]));
            if better {
                theta = t;
                leave = Some((i, to_upper));
            }
        }
        if theta.is_infinite() {
            // Unbounded phase-one direction cannot occur (objective >= 0).
            break;
        }
        for i in 0..d {
            beta[i] -= dir * theta * tab[(i, j)];
        }
        match leave {
            None => at_upper[j] = !at_upper[j],
            Some((row, to_upper)) => {
                let entering_value = if at_upper[j] { ub - theta } else { theta };
                let old = basic[row];
                at_upper[old] = to_upper;
                at_upper[j] = false;
                basic[row] = j;
                beta[row] = entering_value;
                let piv = tab[(row, j)];
                for c in 0..ncols {
                    tab[(row, c)] /= piv;
                }
                for i in 0..d {
                    if i != row {
                        let f = tab[(i, j)];
                        if f != 0.0 {
                            for c in 0..ncols {
                                let v = tab[(row, c)];
                                tab[(i, c)] -= f * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let infeasibility: f64 = (0..d).filter(|&i| basic[i] >= ng).map(|i| beta[i]).sum();
    infeasibility <= 1e-9 * scale
}

/// `{ x : A x <= b }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HPolytope {
    #[serde(with = "crate::matrix_serde::mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::vec")]
    pub b: DVector<f64>,
}

impl HPolytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::dim("polytope offsets", a.nrows(), b.len()));
        }
        if a.nrows() == 0 {
            return Err(Error::InvalidInput("polytope has no rows".into()));
        }
        ensure_finite(a.iter().chain(b.iter()), "polytope")?;
        if a.row_iter().any(|r| r.iter().all(|v| *v == 0.0)) {
            return Err(Error::InvalidInput("polytope has a zero normal".into()));
        }
        Ok(HPolytope { a, b })
    }

    /// Box `lo <= x <= hi` as rows `e_i . x <= hi_i`, `-e_i . x <= -lo_i`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("box bounds", lo.len(), hi.len()));
        }
        let d = lo.len();
        let mut a = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for i in 0..d {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        HPolytope::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let ax = &self.a * x;
        ax.iter().zip(self.b.iter()).all(|(l, r)| *l <= r + tol)
    }

    /// Per-coordinate bounds implied by axis-aligned rows, if every
    /// coordinate is bounded on both sides by such rows.
    pub fn axis_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; d];
        let mut hi = vec![f64::INFINITY; d];
        for (row, bi) in self.a.row_iter().zip(self.b.iter()) {
            let nz: Vec<usize> = (0..d).filter(|&j| row[j] != 0.0).collect();
            if nz.len() == 1 {
                let j = nz[0];
                let v = bi / row[j];
                if row[j] > 0.0 {
                    hi[j] = hi[j].min(v);
                } else {
                    lo[j] = lo[j].max(v);
                }
            }
        }
        if lo.iter().chain(hi.iter()).all(|v| v.is_finite()) {
            Some((lo, hi))
        } else {
            None
        }
    }
}

pub fn support(z: &Zonotope, direction: &DVector<f64>) -> Result<f64> {
    z.support(direction)
}

pub fn linear_map(m: &DMatrix<f64>, z: &Zonotope) -> Result<Zonotope> {
    if m.ncols() != z.dim() {
        return Err(Error::dim("linear map columns", z.dim(), m.ncols()));
    }
    Ok(Zonotope {
        center: m * &z.center,
        generators: m * &z.generators,
    })
}

pub fn minkowski_sum(a: &Zonotope, b: &Zonotope) -> Result<Zonotope> {
    if a.dim() != b.dim() {
        return Err(Error::dim("Minkowski sum", a.dim(), b.dim()));
    }
    let d = a.dim();
    let mut g = DMatrix::zeros(d, a.num_generators() + b.num_generators());
    g.columns_mut(0, a.num_generators()).copy_from(&a.generators);
    g.columns_mut(a.num_generators(), b.num_generators())
        .copy_from(&b.generators);
    Ok(Zonotope {
        center: &a.center + &b.center,
        generators: g,
    })
}

/// Exact `P ⊖ Z` for an H-polytope and a zonotope: every offset shrinks by
/// the support of `Z` along its normal.
pub fn pontryagin_diff(poly: &HPolytope, z: &Zonotope) -> Result<HPolytope> {
    if poly.dim() != z.dim() {
        return Err(Error::dim("Pontryagin difference", poly.dim(), z.dim()));
    }
    let mut b = poly.b.clone();
    let mut supports = Vec::with_capacity(poly.num_rows());
    for (i, row) in poly.a.row_iter().enumerate() {
        let dir: Vec<f64> = row.iter().copied().collect();
        let s = z.support_unchecked(&dir);
        supports.push(s);
        b[i] -= s;
    }
    // Opposite faces that cross each other leave nothing behind.
    for i in 0..poly.num_rows() {
        let ai = poly.a.row(i);
        let norm = ai.norm();
        for j in (i + 1)..poly.num_rows() {
            let aj = poly.a.row(j);
            if (ai + aj).norm() <= 1e-12 * norm && b[i] + b[j] < 0.0 {
                let row = if b[i] < b[j] { i } else { j };
                return Err(Error::EmptyTightenedSet {
                    row,
                    offset: poly.b[row],
                    support: supports[row],
                });
            }
        }
    }
    HPolytope::new(poly.a.clone(), b)
}

/// Outcome of [`rpi_outer_approx`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpiApprox {
    pub set: Zonotope,
    pub depth: usize,
    pub converged: bool,
    /// Geometric contraction rate used for the tail bound.
    pub ratio: f64,
    pub warning: Option<String>,
}

/// Settings for [`rpi_outer_approx`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpiOptions {
    pub epsilon: f64,
    pub max_depth: usize,
    /// Generator budget per dimension for the running terms and the sum.
    pub order: usize,
}

impl Default for RpiOptions {
    fn default() -> Self {
        RpiOptions {
            epsilon: 1e-4,
            max_depth: 50,
            order: 20,
        }
    }
}

/// Zonotope enclosing `Conv{ A_i T }`.
///
/// Three sound enclosures are formed and the one with the smallest interval
/// hull perimeter is kept:
/// - the interval hull of all images;
/// - `mean(A) T ⊕ IH(∪ (A_i - mean(A)) T)`;
/// - `mean(A) T ⊕ Z(0, [E_j G, E_j c])` where the deviations are written as
///   `A_i - mean(A) = Σ_j λ_ij E_j` with `Σ_j |λ_ij| <= 1` (from an SVD).
fn hull_of_images(maps: &[DMatrix<f64>], t: &Zonotope) -> Vec<Zonotope> {
    let d = t.dim();
    let l = maps.len();
    let mean = maps.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) / l as f64;
    let deviations: Vec<DMatrix<f64>> = maps.iter().map(|a| a - &mean).collect();
    let core = Zonotope {
        center: &mean * &t.center,
        generators: &mean * &t.generators,
    };
    if deviations.iter().all(|m| m.iter().all(|v| *v == 0.0)) {
        return vec![core];
    }

    let image_hull = |ms: &[DMatrix<f64>]| {
        let mut lo = DVector::from_element(d, f64::INFINITY);
        let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
        for m in ms {
            let center = m * &t.center;
            let h = (m * &t.generators).abs().column_sum();
            lo = lo.inf(&(&center - &h));
            hi = hi.sup(&(&center + &h));
        }
        Zonotope::from_box((&lo + &hi) * 0.5, &((&hi - &lo) * 0.5)).expect("finite box")
    };

    let mut candidates = vec![
        image_hull(maps),
        minkowski_sum(&core, &image_hull(&deviations)).expect("same dimension"),
    ];

    let stacked = DMatrix::from_fn(d * d, l, |r, i| deviations[i].as_slice()[r]);
    let svd = stacked.svd(true, true);
    if let (Some(u), Some(vt)) = (svd.u, svd.v_t) {
        let smax = svd.singular_values.max();
        let ranks: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&j| svd.singular_values[j] > 1e-12 * smax)
            .collect();
        let r = ranks.len() as f64;
        let g = t.num_generators();
        let mut gens = DMatrix::zeros(d, ranks.len() * (g + 1));
        for (k, &j) in ranks.iter().enumerate() {
            let vmax = (0..l).map(|i| vt[(j, i)].abs()).fold(0.0, f64::max);
            let scale = r * svd.singular_values[j] * vmax;
            let e = DMatrix::from_column_slice(d, d, u.column(j).as_slice()) * scale;
            gens.columns_mut(k * (g + 1), g).copy_from(&(&e * &t.generators));
            gens.set_column(k * (g + 1) + g, &(&e * &t.center));
        }
        let spread = Zonotope {
            center: DVector::zeros(d),
            generators: gens,
        };
        candidates.push(minkowski_sum(&core, &spread).expect("same dimension"));
    }

    candidates
}

fn tightest(candidates: Vec<Zonotope>) -> Zonotope {
    candidates
        .into_iter()
        .map(|z| (z.half_widths().sum(), z))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, z)| z)
        .expect("non-empty candidate list")
}

/// Ellipsoidal bound `{ e : e' P e <= r^2 }` shared by every reachable term,
/// with the worst-case P-norm contraction `lambda` of the vertex maps.
struct Ellipsoid {
    lambda: f64,
    radius: f64,
    /// Columns of `P^{-1/2}`.
    inv_sqrt: DMatrix<f64>,
    /// `sqrt(diag(P^{-1}))`.
    box_scale: DVector<f64>,
}

impl Ellipsoid {
    fn new(maps: &[DMatrix<f64>], w: &Zonotope, p: &DMatrix<f64>) -> Option<Self> {
        let d = w.dim();
        let eig = p.clone().symmetric_eigen();
        if eig.eigenvalues.min() <= 0.0 {
            return None;
        }
        let v = &eig.eigenvectors;
        let sqrt = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
        let inv_sqrt = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt())) * v.transpose();
        let mut lambda: f64 = 0.0;
        for a in maps {
            let m = &sqrt * a * &inv_sqrt;
            lambda = lambda.max(m.svd(false, false).singular_values.max());
        }
        if !(lambda < 1.0) {
            return None;
        }
        let c = &sqrt * &w.center;
        let g = &sqrt * &w.generators;
        let radius = if g.ncols() <= 12 {
            // Exact maximum of the P-norm over the vertices of W.
            (0u32..(1u32 << g.ncols()))
                .map(|mask| {
                    let mut x = c.clone();
                    for j in 0..g.ncols() {
                        let s = if mask & (1 << j) != 0 { 1.0 } else { -1.0 };
                        x += g.column(j) * s;
                    }
                    x.norm()
                })
                .fold(0.0, f64::max)
        } else {
            c.norm() + g.column_iter().map(|col| col.norm()).sum::<f64>()
        };
        let p_inv = &inv_sqrt * &inv_sqrt;
        let box_scale = DVector::from_fn(d, |i, _| p_inv[(i, i)].max(0.0).sqrt());
        Some(Ellipsoid {
            lambda,
            radius,
            inv_sqrt,
            box_scale,
        })
    }

    fn enclosures(&self, depth: usize) -> Vec<Zonotope> {
        self.balls(self.radius * self.lambda.powi(depth as i32))
    }

    /// Encloses the sum of all terms after `depth`.
    fn tail(&self, depth: usize) -> Vec<Zonotope> {
        self.balls(self.radius * self.lambda.powi(depth as i32 + 1) / (1.0 - self.lambda))
    }

    fn balls(&self, r: f64) -> Vec<Zonotope> {
        let d = self.box_scale.len();
        vec![
            Zonotope::from_box(DVector::zeros(d), &(&self.box_scale * r)).expect("finite box"),
            Zonotope {
                center: DVector::zeros(d),
                generators: &self.inv_sqrt * r,
            },
        ]
    }
}

/// Outer approximation of the minimal robust positively invariant set of
/// `e+ = A_i e + w` over the vertex maps `A_i` with `w` in `W`.
///
/// Terms `T_{k+1} ⊇ Conv{A_i T_k}` are accumulated until their radius drops
/// below `epsilon * radius(W)`; the remaining tail is bounded by the last term
/// scaled by `rho / (1 - rho)`, with `rho` the observed contraction rate.
/// Each term is the tightest of several enclosures, including the box of the
/// Lyapunov ellipsoid `lambda^k * max_W |w|_P` when the maps contract in the
/// Euclidean norm.
pub fn rpi_outer_approx(vertex_maps: &[DMatrix<f64>], w: &Zonotope, opts: RpiOptions) -> Result<RpiApprox> {
    rpi_outer_approx_with(vertex_maps, w, None, opts)
}

/// As [`rpi_outer_approx`], with a common Lyapunov matrix `P` for the vertex
/// maps used for the ellipsoidal enclosures.
pub fn rpi_outer_approx_with(
    vertex_maps: &[DMatrix<f64>],
    w: &Zonotope,
    lyapunov: Option<&DMatrix<f64>>,
    opts: RpiOptions,
) -> Result<RpiApprox> {
    let d = w.dim();
    if vertex_maps.is_empty() {
        return Err(Error::InvalidInput("no vertex maps".into()));
    }
    for a in vertex_maps {
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::dim("vertex map", d, a.nrows()));
        }
        ensure_finite(a.iter(), "vertex map")?;
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let max_gens = opts.order.max(2) * d;
    if let Some(p) = lyapunov {
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::dim("Lyapunov matrix", d, p.nrows()));
        }
    }
    let identity = DMatrix::identity(d, d);
    let ellipsoid = Ellipsoid::new(vertex_maps, w, lyapunov.unwrap_or(&identity));
    let next_term = |t: &Zonotope, depth: usize| {
        let mut c = hull_of_images(vertex_maps, t);
        if let Some(e) = &ellipsoid {
            c.extend(e.enclosures(depth));
        }
        tightest(c)
    };
    let r_w = w.radius();
    if r_w == 0.0 {
        // Only a point disturbance: the series of images of a point.
        let mut s = w.clone();
        let mut t = w.clone();
        for k in 1..=opts.max_depth {
            t = next_term(&t, k);
            s = minkowski_sum(&s, &t)?;
        }
        return Ok(RpiApprox {
            set: s.reduce_order(max_gens),
            depth: opts.max_depth,
            converged: true,
            ratio: 0.0,
            warning: None,
        });
    }
    let mut s = w.clone();
    let mut t = w.clone();
    let mut radii = vec![r_w];
    let mut converged = false;
    let mut depth = 0;
    while depth < opts.max_depth {
        depth += 1;
        t = next_term(&t, depth).reduce_order(max_gens);
        let r = t.radius();
        radii.push(r);
        s = minkowski_sum(&s, &t)?.reduce_order(max_gens * 2);
        if r <= opts.epsilon * r_w {
            converged = true;
            break;
        }
    }
    let last = radii.len() - 1;
    let window = last.min(5);
    let ratio = if radii[last] == 0.0 {
        0.0
    } else if radii[last - window] == 0.0 {
        f64::INFINITY
    } else {
        (radii[last] / radii[last - window]).powf(1.0 / window as f64)
    };
    if !converged && ratio >= 1.0 {
        return Err(Error::NotContractive { ratio });
    }
    let rho = ratio.clamp(0.0, 0.99);
    let mut tail_kind = "geometrically";
    match (&ellipsoid, converged) {
        // An unconverged rate estimate is not a bound; the ellipsoid is.
        (Some(e), false) => {
            s = minkowski_sum(&s, &tightest(e.tail(depth)))?.reduce_order(max_gens * 2);
            tail_kind = "by the Lyapunov ellipsoid";
        }
        _ if rho > 0.0 => {
            let tail = t.interval_hull().scale_about_center(rho / (1.0 - rho));
            // The tail terms are centred on the images of the last term's center.
            let tail = Zonotope {
                center: DVector::zeros(d),
                generators: tail.generators,
            };
            s = minkowski_sum(&s, &tail)?.reduce_order(max_gens * 2);
        }
        _ => {}
    }
    let warning = (!converged).then(|| {
        format!(
            "RPI series not converged after {depth} terms (last radius {:.3e}, rate {:.4}); tail bounded {tail_kind}",
            radii[last], ratio
        )
    });
    if let Some(msg) = &warning {
        log::warn!("{msg}");
    }
    Ok(RpiApprox {
        set: s,
        depth,
        converged,
        ratio: rho,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn unit_box(d: usize) -> Zonotope {
        Zonotope::from_box(DVector::zeros(d), &DVector::from_element(d, 1.0)).unwrap()
    }

    #[test]
    fn support_examples() {
        assert_eq!(unit_box(2).support(&v(&[1.0, 0.0])).unwrap(), 1.0);
        let p = Zonotope::point(v(&[2.0, -1.0]));
        assert_eq!(p.support(&v(&[3.0, 4.0])).unwrap(), 2.0);
        let b = Zonotope::from_box(DVector::zeros(2), &v(&[0.2, 0.2])).unwrap();
        assert!((b.support(&v(&[1.0, 1.0])).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(unit_box(2).support(&v(&[0.0, 0.0])).unwrap(), 0.0);
        assert!(unit_box(2).support(&v(&[1.0])).is_err());
    }

    #[test]
    fn linear_map_examples() {
        let z = unit_box(2);
        assert_eq!(linear_map(&DMatrix::identity(2, 2), &z).unwrap(), z);
        let zero = linear_map(&DMatrix::zeros(2, 2), &z).unwrap();
        assert_eq!(zero.half_widths(), DVector::zeros(2));
        assert_eq!(zero.center, DVector::zeros(2));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let s = linear_map(&m, &z).unwrap();
        assert_eq!(s.half_widths(), v(&[2.0, 3.0]));
        assert!(linear_map(&DMatrix::identity(3, 3), &z).is_err());
    }

    #[test]
    fn minkowski_examples() {
        let a = unit_box(2);
        assert_eq!(
            minkowski_sum(&a, &Zonotope::origin(2)).unwrap().half_widths(),
            a.half_widths()
        );
        let b = Zonotope::from_box(DVector::zeros(2), &v(&[0.5, 0.5])).unwrap();
        let s = minkowski_sum(&a, &b).unwrap();
        assert_eq!(s.half_widths(), v(&[1.5, 1.5]));
        assert!(minkowski_sum(&a, &unit_box(3)).is_err());
    }

    #[test]
    fn pontryagin_examples() {
        let p = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(pontryagin_diff(&p, &Zonotope::origin(2)).unwrap(), p);
        let z = Zonotope::from_box(DVector::zeros(2), &v(&[0.2, 0.2])).unwrap();
        let t = pontryagin_diff(&p, &z).unwrap();
        let (lo, hi) = t.axis_bounds().unwrap();
        for i in 0..2 {
            assert!((lo[i] + 0.8).abs() < 1e-15 && (hi[i] - 0.8).abs() < 1e-15);
        }
        // Grid oracle: x is in P ⊖ Z iff x + every box vertex lies in P.
        let corners = [[-0.2, -0.2], [-0.2, 0.2], [0.2, -0.2], [0.2, 0.2]];
        for i in 0..=40 {
            for j in 0..=40 {
                let x = v(&[-1.0 + 0.05 * i as f64, -1.0 + 0.05 * j as f64]);
                let oracle = corners.iter().all(|c| p.contains(&(&x + v(c)), 1e-12));
                assert_eq!(t.contains(&x, 1e-12), oracle, "{x}");
            }
        }
        let big = Zonotope::from_box(DVector::zeros(2), &v(&[2.0, 2.0])).unwrap();
        assert!(matches!(
            pontryagin_diff(&p, &big),
            Err(Error::EmptyTightenedSet { .. })
        ));
    }

    #[test]
    fn membership_agrees_with_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::from_fn(3, 7, |_, _| rng.gen_range(-1.0..1.0));
        let z = Zonotope::new(v(&[0.5, -1.0, 2.0]), g).unwrap();
        for _ in 0..300 {
            let p = z.sample(&mut rng);
            assert!(z.contains(&p, 1e-9).unwrap());
        }
        // Points just beyond the support along a random direction are outside.
        for _ in 0..300 {
            let dir = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let h = z.support(&dir).unwrap();
            let p = &z.center + &dir * ((h - z.center.dot(&dir)) / dir.norm_squared() * 1.01);
            assert!(!z.contains(&p, 1e-6).unwrap());
        }
    }

    #[test]
    fn reduction_is_outer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DMatrix::from_fn(2, 30, |_, _| rng.gen_range(-1.0..1.0));
        let z = Zonotope::new(DVector::zeros(2), g).unwrap();
        let r = z.reduce_order(6);
        assert_eq!(r.num_generators(), 6);
        for _ in 0..500 {
            let p = z.sample(&mut rng);
            assert!(r.contains(&p, 1e-9).unwrap());
        }
    }

    #[test]
    fn rpi_zero_map_is_w() {
        let w = unit_box(2);
        let s = rpi_outer_approx(&[DMatrix::zeros(2, 2)], &w, RpiOptions::default()).unwrap();
        assert!(s.converged);
        assert_eq!(s.set.half_widths(), w.half_widths());
        assert_eq!(s.set.center, w.center);
    }

    #[test]
    fn rpi_geometric_series() {
        let w = unit_box(1);
        let s = rpi_outer_approx(&[DMatrix::from_element(1, 1, 0.5)], &w, RpiOptions::default()).unwrap();
        let h = s.set.half_widths()[0];
        assert!((2.0..=2.05).contains(&h), "{h}");
    }

    fn rot_scale(theta: f64, rho: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]) * rho
    }

    #[test]
    fn rpi_rotations_sampled_invariance() {
        let maps = [rot_scale(0.3, 0.8), rot_scale(-0.7, 0.8)];
        let w = unit_box(2);
        let s = rpi_outer_approx(&maps, &w, RpiOptions::default()).unwrap().set;
        let target = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..10_000 {
            let e = s.sample(&mut rng);
            let wk = w.sample(&mut rng);
            let next = &maps[k % 2] * e + wk;
            assert!(target.contains(&next, 1e-6).unwrap());
        }
    }

    #[test]
    fn rpi_not_contractive() {
        let w = unit_box(1);
        let r = rpi_outer_approx(&[DMatrix::from_element(1, 1, 1.05)], &w, RpiOptions::default());
        assert!(matches!(r, Err(Error::NotContractive { .. })));
    }

    #[test]
    fn rpi_contains_exact_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps = [
            DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.6, 0.1, 0.0, 0.2, 0.4]),
            DMatrix::from_row_slice(3, 3, &[0.6, -0.1, 0.1, 0.2, 0.5, 0.0, 0.1, 0.0, 0.5]),
        ];
        let w = Zonotope::from_box(DVector::zeros(3), &v(&[1.0, 0.5, 0.2])).unwrap();
        let s = rpi_outer_approx(&maps, &w, RpiOptions::default()).unwrap().set;
        // Points of W ⊕ Conv{A_i W} ⊕ Conv{A_i A_j W} ⊕ Conv{A_i A_j A_k W}
        // built from convex combinations over enumerated map sequences.
        let mut seqs: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::identity(3, 3)]];
        for _ in 0..3 {
            let prev = seqs.last().unwrap();
            let next: Vec<DMatrix<f64>> = prev.iter().flat_map(|p| maps.iter().map(move |a| a * p)).collect();
            seqs.push(next);
        }
        for _ in 0..2000 {
            let mut p = DVector::zeros(3);
            for level in &seqs {
                let weights: Vec<f64> = (0..level.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (m, wt) in level.iter().zip(&weights) {
                    p += m * w.sample(&mut rng) * (wt / total);
                }
            }
            assert!(s.contains(&p, 1e-9).unwrap());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn support_additive_and_homogeneous(seed in 0u64..1000, lam in 0.0f64..10.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Zonotope::new(DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)), DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
                let b = Zonotope::new(DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)), DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
                let s = minkowski_sum(&a, &b).unwrap();
                let dir = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let lhs = s.support(&dir).unwrap();
                let rhs = a.support(&dir).unwrap() + b.support(&dir).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
                let scaled = a.support(&(&dir * lam)).unwrap();
                prop_assert!((scaled - lam * a.support(&dir).unwrap()).abs() <= 1e-12 * (1.0 + scaled.abs()));
            }

            #[test]
            fn pontryagin_then_minkowski_stays_inside(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = HPolytope::from_box(&[-2.0, -1.0], &[2.0, 3.0]).unwrap();
                let z = Zonotope::new(DVector::zeros(2), DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-0.3..0.3))).unwrap();
                let t = pontryagin_diff(&p, &z).unwrap();
                let (lo, hi) = t.axis_bounds().unwrap();
                for _ in 0..50 {
                    let x = DVector::from_fn(2, |i, _| rng.gen_range(lo[i]..=hi[i]));
                    let y = x + z.sample(&mut rng);
                    prop_assert!(p.contains(&y, 1e-12));
                }
            }
        }
    }
}
