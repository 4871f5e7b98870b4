//! Ground-truth plants, scheduling-parameter signals, identification data
//! campaigns and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{SnapshotSet, DEFAULT_TRUNCATION_TOL};
use crate::error::{ensure_finite, Error, Result};
use crate::lifting::{make_thin_plate_basis_with, DomainBox, LiftingBasis};
use crate::pvko::{identify_pvko, identify_time_invariant, PvkoModel};

/// Independent deterministic stream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// `dx/dt = 10 (y - x)`, `dy/dt = p x - y - x z`, `dz/dt = x y - z`.
pub fn lorenz_rhs(x: &DVector<f64>, p: f64) -> DVector<f64> {
    DVector::from_vec(vec![
        10.0 * (x[1] - x[0]),
        p * x[0] - x[1] - x[0] * x[2],
        x[0] * x[1] - x[2],
    ])
}

/// `dx/dt = 2 y`, `dy/dt = -0.8 x + p (y - 2 x^2 y) + u`.
pub fn vdp_rhs(x: &DVector<f64>, u: f64, p: f64) -> DVector<f64> {
    DVector::from_vec(vec![
        2.0 * x[1],
        -0.8 * x[0] + p * (x[1] - 2.0 * x[0] * x[0] * x[1]) + u,
    ])
}

fn rk4<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn check_step(x: &DVector<f64>, n: usize, dt: f64) -> Result<()> {
    if x.len() != n {
        return Err(Error::dim("plant state", n, x.len()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput("integration step must be positive".into()));
    }
    ensure_finite(x.iter(), "plant state")
}

/// One RK4 step of the Lorenz system with `p` held over the step.
pub fn lorenz_step(x: &DVector<f64>, p: f64, dt: f64) -> Result<DVector<f64>> {
    check_step(x, 3, dt)?;
    Ok(rk4(|s| lorenz_rhs(s, p), x, dt))
}

pub fn vdp_step(x: &DVector<f64>, u: f64, p: f64, dt: f64, integrator: Integrator) -> Result<DVector<f64>> {
    check_step(x, 2, dt)?;
    Ok(match integrator {
        Integrator::Euler => x + vdp_rhs(x, u, p) * dt,
        Integrator::Rk4 => rk4(|s| vdp_rhs(s, u, p), x, dt),
    })
}

/// Simulated plants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum PlantKind {
    Lorenz,
    VanDerPol {
        #[serde(default)]
        integrator: Integrator,
    },
    /// Discrete-time `x+ = A x + B u`, independent of the parameter.
    Linear {
        #[serde(with = "crate::matrix_serde::mat")]
        a: DMatrix<f64>,
        #[serde(with = "crate::matrix_serde::mat")]
        b: DMatrix<f64>,
    },
}

impl PlantKind {
    pub fn state_dim(&self) -> usize {
        match self {
            PlantKind::Lorenz => 3,
            PlantKind::VanDerPol { .. } => 2,
            PlantKind::Linear { a, .. } => a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            PlantKind::Lorenz => 0,
            PlantKind::VanDerPol { .. } => 1,
            PlantKind::Linear { b, .. } => b.ncols(),
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, dt: f64) -> Result<DVector<f64>> {
        if u.len() != self.input_dim() {
            return Err(Error::dim("plant input", self.input_dim(), u.len()));
        }
        let next = match self {
            PlantKind::Lorenz => lorenz_step(x, p, dt)?,
            PlantKind::VanDerPol { integrator } => vdp_step(x, u[0], p, dt, *integrator)?,
            PlantKind::Linear { a, b } => {
                check_step(x, a.nrows(), dt)?;
                a * x + b * u
            }
        };
        ensure_finite(next.iter(), "plant state after step")?;
        Ok(next)
    }
}

/// A plant that can be stepped in closed loop.
pub trait Simulator {
    /// Physical state.
    fn state(&self) -> DVector<f64>;
    /// Lifted measurement used by the controller.
    fn lifted(&self, model: &PvkoModel) -> Result<DVector<f64>>;
    fn advance(&mut self, u: &DVector<f64>, p: f64) -> Result<()>;
    /// True when the plant equals the nominal model, so no disturbance acts.
    fn disturbance_free(&self) -> bool {
        false
    }
}

/// Ground-truth plant integrated at the model's sampling time.
#[derive(Debug, Clone)]
pub struct PhysicalSimulator {
    pub plant: PlantKind,
    pub x: DVector<f64>,
    pub dt: f64,
}

impl PhysicalSimulator {
    pub fn new(plant: PlantKind, x0: DVector<f64>, dt: f64) -> Result<Self> {
        check_step(&x0, plant.state_dim(), dt)?;
        Ok(PhysicalSimulator { plant, x: x0, dt })
    }
}

impl Simulator for PhysicalSimulator {
    fn state(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn lifted(&self, model: &PvkoModel) -> Result<DVector<f64>> {
        model.lift(&self.x)
    }

    fn advance(&mut self, u: &DVector<f64>, p: f64) -> Result<()> {
        self.x = self.plant.step(&self.x, u, p, self.dt)?;
        Ok(())
    }
}

/// The nominal lifted model used as the plant: `y+ = A(p) y + B(p) u`.
#[derive(Debug, Clone)]
pub struct NominalLiftedSimulator {
    pub model: PvkoModel,
    pub y: DVector<f64>,
}

impl NominalLiftedSimulator {
    pub fn from_state(model: PvkoModel, x0: &DVector<f64>) -> Result<Self> {
        let y = model.lift(x0)?;
        Ok(NominalLiftedSimulator { model, y })
    }
}

impl Simulator for NominalLiftedSimulator {
    fn state(&self) -> DVector<f64> {
        &self.model.c * &self.y
    }

    fn lifted(&self, _model: &PvkoModel) -> Result<DVector<f64>> {
        Ok(self.y.clone())
    }

    fn advance(&mut self, u: &DVector<f64>, p: f64) -> Result<()> {
        if u.len() != self.model.input_dim() {
            return Err(Error::dim("nominal plant input", self.model.input_dim(), u.len()));
        }
        let (a, b) = self.model.evaluate(p)?;
        self.y = &a * &self.y + &b * u;
        ensure_finite(self.y.iter(), "nominal lifted state")
    }

    fn disturbance_free(&self) -> bool {
        true
    }
}

/// Exogenous scheduling parameter as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParameterSignal {
    Constant {
        value: f64,
    },
    /// `offset + Σ a_i sin(f_i t)`.
    SumOfSines {
        offset: f64,
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
    },
    /// Clamped random walk with uniform increments in `[-step_bound, step_bound]`.
    RandomWalk {
        step_bound: f64,
        lo: f64,
        hi: f64,
        seed: u64,
        #[serde(default)]
        start: Option<f64>,
    },
    /// Linear interpolation through `(t, p)` points; undefined past the last time.
    Schedule {
        points: Vec<(f64, f64)>,
    },
}

impl ParameterSignal {
    /// Random sum of sines: amplitudes from a symmetric Dirichlet scaled to
    /// `total_amplitude`, frequencies uniform in `[0, max_frequency]`.
    pub fn random_sum_of_sines(
        seed: u64,
        terms: usize,
        total_amplitude: f64,
        max_frequency: f64,
        offset: f64,
    ) -> Result<Self> {
        if terms == 0 {
            return Err(Error::InvalidInput("sum of sines needs at least one term".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amplitudes: Vec<f64> = if terms == 1 {
            vec![total_amplitude]
        } else {
            let dir =
                Dirichlet::new_with_size(1.0, terms).map_err(|e| Error::InvalidInput(format!("Dirichlet: {e}")))?;
            dir.sample(&mut rng).into_iter().map(|a| a * total_amplitude).collect()
        };
        let frequencies = (0..terms).map(|_| rng.gen_range(0.0..=max_frequency)).collect();
        let sig = ParameterSignal::SumOfSines {
            offset,
            amplitudes,
            frequencies,
        };
        sig.validate()?;
        Ok(sig)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ParameterSignal::Constant { value } => ensure_finite([value], "constant parameter"),
            ParameterSignal::SumOfSines {
                offset,
                amplitudes,
                frequencies,
            } => {
                if amplitudes.len() != frequencies.len() {
                    return Err(Error::dim("sine frequencies", amplitudes.len(), frequencies.len()));
                }
                if amplitudes.iter().any(|a| !(*a > 0.0)) {
                    return Err(Error::InvalidInput("sine amplitudes must be positive".into()));
                }
                ensure_finite(
                    std::iter::once(offset).chain(amplitudes).chain(frequencies),
                    "sum of sines",
                )
            }
            ParameterSignal::RandomWalk {
                step_bound,
                lo,
                hi,
                start,
                ..
            } => {
                ensure_finite([step_bound, lo, hi], "random walk")?;
                if !(lo <= hi) || *step_bound < 0.0 {
                    return Err(Error::InvalidInput("random walk range or step bound invalid".into()));
                }
                if let Some(s) = start {
                    ensure_finite([s], "random walk start")?;
                }
                Ok(())
            }
            ParameterSignal::Schedule { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidInput("schedule has no points".into()));
                }
                ensure_finite(points.iter().flat_map(|(t, p)| [t, p]), "schedule")?;
                if points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
                    return Err(Error::InvalidInput("schedule times must be strictly increasing".into()));
                }
                Ok(())
            }
        }
    }

    /// Uniform increment in `[-1, 1)` for step `k`, addressed directly in the stream.
    fn walk_increment(seed: u64, k: u64) -> f64 {
        let mut rng = stream_rng(seed, 0);
        rng.set_word_pos(2 * k as u128);
        let bits = rng.next_u64() >> 11;
        2.0 * (bits as f64 / (1u64 << 53) as f64) - 1.0
    }

    fn walk_start(seed: u64, lo: f64, hi: f64, start: Option<f64>) -> f64 {
        match start {
            Some(s) => s.clamp(lo, hi),
            None => {
                let mut rng = stream_rng(seed, 1);
                if lo < hi {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
        }
    }

    /// Parameter values for steps `0..steps` at sampling time `dt`.
    pub fn path(&self, steps: usize, dt: f64) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            ParameterSignal::RandomWalk {
                step_bound,
                lo,
                hi,
                seed,
                start,
            } => {
                let mut out = Vec::with_capacity(steps);
                let mut p = Self::walk_start(*seed, *lo, *hi, *start);
                for k in 0..steps {
                    if k > 0 {
                        p = (p + step_bound * Self::walk_increment(*seed, k as u64)).clamp(*lo, *hi);
                    }
                    out.push(p);
                }
                Ok(out)
            }
            _ => (0..steps).map(|k| self.at_time(k as f64 * dt, k, dt)).collect(),
        }
    }

    /// Value at step `k` (time `k dt`).
    pub fn sample(&self, k: usize, dt: f64) -> Result<f64> {
        match self {
            ParameterSignal::RandomWalk { .. } => Ok(self.path(k + 1, dt)?[k]),
            _ => {
                self.validate()?;
                self.at_time(k as f64 * dt, k, dt)
            }
        }
    }

    fn at_time(&self, t: f64, k: usize, dt: f64) -> Result<f64> {
        match self {
            ParameterSignal::Constant { value } => Ok(*value),
            ParameterSignal::SumOfSines {
                offset,
                amplitudes,
                frequencies,
            } => Ok(offset
                + amplitudes
                    .iter()
                    .zip(frequencies)
                    .map(|(a, f)| a * (f * t).sin())
                    .sum::<f64>()),
            ParameterSignal::Schedule { points } => {
                let (t_last, _) = points[points.len() - 1];
                if t > t_last + 1e-9 * (1.0 + t_last.abs()) {
                    return Err(Error::ForecastUnavailable {
                        needed: k,
                        available: self.horizon_steps(dt).unwrap_or(0),
                    });
                }
                if t <= points[0].0 {
                    return Ok(points[0].1);
                }
                let i = points.partition_point(|(ti, _)| *ti <= t).min(points.len() - 1);
                let (t0, p0) = points[i - 1];
                let (t1, p1) = points[i];
                if t >= t1 {
                    return Ok(p1);
                }
                Ok(p0 + (p1 - p0) * (t - t0) / (t1 - t0))
            }
            ParameterSignal::RandomWalk { .. } => unreachable!("handled by path"),
        }
    }

    /// Number of steps of size `dt` for which the signal is defined, if finite.
    pub fn horizon_steps(&self, dt: f64) -> Option<usize> {
        match self {
            ParameterSignal::Schedule { points } => {
                let t_last = points.last().map(|p| p.0).unwrap_or(0.0);
                Some((t_last / dt + 1e-9).floor() as usize + 1)
            }
            _ => None,
        }
    }
}

/// Sampled trajectory: `states` has one more entry than `inputs` and `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub params: Vec<f64>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

/// `100 |x_hat - x| / |x|` over the stacked sequences.
pub fn rmse(actual: &[DVector<f64>], predicted: &[DVector<f64>]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::dim("predicted sequence", actual.len(), predicted.len()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, xh) in actual.iter().zip(predicted) {
        if x.len() != xh.len() {
            return Err(Error::dim("predicted state", x.len(), xh.len()));
        }
        num += (xh - x).norm_squared();
        den += x.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::InvalidInput("actual trajectory is identically zero".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// `J_c(k) = Σ_{i <= k} x_i' Q x_i + u_i' R u_i` over the input steps.
pub fn cumulative_cost(traj: &Trajectory, qx: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut total = 0.0;
    let mut out = Vec::with_capacity(traj.inputs.len());
    for (x, u) in traj.states.iter().zip(&traj.inputs) {
        total += stage_cost(x, u, qx, r)?;
        out.push(total);
    }
    Ok(out)
}

pub fn stage_cost(x: &DVector<f64>, u: &DVector<f64>, qx: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    if qx.shape() != (x.len(), x.len()) {
        return Err(Error::dim("state weight", x.len(), qx.nrows()));
    }
    if r.shape() != (u.len(), u.len()) {
        return Err(Error::dim("input weight", u.len(), r.nrows()));
    }
    Ok(x.dot(&(qx * x)) + u.dot(&(r * u)))
}

/// Settings for an identification data campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    pub plant: PlantKind,
    pub working_points: Vec<f64>,
    /// Total simulated time per working point (s).
    pub duration: f64,
    pub dt: f64,
    /// Restart interval (s); defaults to the full duration.
    #[serde(default)]
    pub episode_length: Option<f64>,
    /// Box for random initial states.
    pub initial_box: DomainBox,
    /// Bounds for uniformly random excitation inputs.
    #[serde(default)]
    pub input_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub seed: u64,
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.duration.is_finite() {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        if self.duration < self.dt {
            return Err(Error::InvalidInput(format!(
                "duration {} is shorter than the sampling time {}",
                self.duration, self.dt
            )));
        }
        if self.working_points.is_empty() {
            return Err(Error::InvalidInput("no working points".into()));
        }
        self.initial_box.validate()?;
        if self.initial_box.dim() != self.plant.state_dim() {
            return Err(Error::dim(
                "initial box",
                self.plant.state_dim(),
                self.initial_box.dim(),
            ));
        }
        let m = self.plant.input_dim();
        match &self.input_bounds {
            Some((lo, hi)) => {
                if lo.len() != m || hi.len() != m {
                    return Err(Error::dim("input bounds", m, lo.len()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(Error::InvalidInput("input bounds inverted".into()));
                }
            }
            None if m > 0 => {
                return Err(Error::InvalidInput(
                    "plant has inputs but no input bounds were given".into(),
                ))
            }
            None => {}
        }
        if let Some(e) = self.episode_length {
            if !(e >= self.dt) {
                return Err(Error::InvalidInput("episode length shorter than dt".into()));
            }
        }
        Ok(())
    }
}

/// Simulates one working point with episodic restarts and uniformly random
/// inputs; `stream` selects the random stream.
pub fn collect_identification_data(cfg: &CollectionConfig, working_point: f64, stream: u64) -> Result<SnapshotSet> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, stream);
    let total = (cfg.duration / cfg.dt + 1e-9).floor() as usize;
    let per_episode = cfg
        .episode_length
        .map(|e| (e / cfg.dt + 1e-9).floor() as usize)
        .unwrap_or(total)
        .min(total)
        .max(2);
    let m = cfg.plant.input_dim();
    let mut episodes = Vec::new();
    let mut remaining = total;
    while remaining >= 2 {
        let len = per_episode.min(remaining);
        let mut x = cfg.initial_box.sample(&mut rng);
        let mut states = Vec::with_capacity(len);
        let mut inputs = Vec::with_capacity(len);
        states.push(x.clone());
        for _ in 1..len {
            let u = match &cfg.input_bounds {
                Some((lo, hi)) => DVector::from_fn(m, |i, _| {
                    if lo[i] < hi[i] {
                        rng.gen_range(lo[i]..hi[i])
                    } else {
                        lo[i]
                    }
                }),
                None => DVector::zeros(0),
            };
            x = cfg.plant.step(&x, &u, working_point, cfg.dt)?;
            inputs.push(u);
            states.push(x.clone());
        }
        episodes.push((states, inputs));
        remaining -= len;
    }
    SnapshotSet::from_episodes(working_point, cfg.dt, &episodes)
}

/// Training and validation sets for every working point. Validation data
/// uses disjoint random streams.
pub fn collect_campaign(cfg: &CollectionConfig) -> Result<(Vec<SnapshotSet>, Vec<SnapshotSet>)> {
    cfg.validate()?;
    let n = cfg.working_points.len() as u64;
    let sets: Vec<(SnapshotSet, SnapshotSet)> = cfg
        .working_points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            Ok((
                collect_identification_data(cfg, p, 2 + i as u64)?,
                collect_identification_data(cfg, p, 2 + n + i as u64)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(sets.into_iter().unzip())
}

/// Open-loop prediction study: random sum-of-sines schedules, random initial
/// states, thin-plate lifts of several orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStudy {
    pub collection: CollectionConfig,
    /// Box for RBF centers.
    pub center_box: DomainBox,
    /// Box for the initial states of the prediction trials.
    pub trial_box: DomainBox,
    pub sine_terms: usize,
    pub sine_total_amplitude: f64,
    pub sine_max_frequency: f64,
    pub sine_offset: f64,
    #[serde(default)]
    pub append_state: bool,
    #[serde(default = "default_tol")]
    pub truncation_tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TRUNCATION_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub order: usize,
    pub pvko_mean: f64,
    pub pvko_std: f64,
    pub tiko_mean: f64,
    pub tiko_std: f64,
    pub trials: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// RMSE of one trial for each model: truth simulated with the plant, both
/// models predicted open loop under the same schedule.
pub fn prediction_trial(
    plant: &PlantKind,
    models: &[&PvkoModel],
    x0: &DVector<f64>,
    params: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let m = plant.input_dim();
    let u0 = DVector::zeros(m);
    let mut truth = Vec::with_capacity(params.len() + 1);
    truth.push(x0.clone());
    let mut x = x0.clone();
    for &p in params {
        x = plant.step(&x, &u0, p, dt)?;
        truth.push(x.clone());
    }
    let inputs = if m == 0 {
        Vec::new()
    } else {
        vec![u0.clone(); params.len()]
    };
    models
        .iter()
        .map(|model| rmse(&truth, &model.predict(x0, &inputs, params)?))
        .collect()
}

/// Monte Carlo comparison of the interpolated model against a single
/// time-invariant model fitted on the pooled data.
pub fn monte_carlo_prediction(
    study: &PredictionStudy,
    trials: usize,
    horizon: usize,
    orders: &[usize],
    seed: u64,
) -> Result<Vec<OrderStats>> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be positive".into()));
    }
    if orders.is_empty() {
        return Err(Error::InvalidInput("no lifting orders given".into()));
    }
    let cfg = &study.collection;
    let (train, _) = collect_campaign(cfg)?;
    let n = cfg.plant.state_dim();
    let mut out = Vec::with_capacity(orders.len());
    for &order in orders {
        let basis: LiftingBasis = make_thin_plate_basis_with(n, order, &study.center_box, seed, study.append_state)?;
        let pvko = identify_pvko(&basis, &train, study.truncation_tol)?;
        let tiko = identify_time_invariant(&basis, &train, study.truncation_tol)?;
        let results: Vec<Vec<f64>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = stream_rng(seed, 1000 + trial as u64);
                let sig_seed = rng.next_u64();
                let sig = ParameterSignal::random_sum_of_sines(
                    sig_seed,
                    study.sine_terms,
                    study.sine_total_amplitude,
                    study.sine_max_frequency,
                    study.sine_offset,
                )?;
                let x0 = study.trial_box.sample(&mut rng);
                let params = sig.path(horizon, cfg.dt)?;
                prediction_trial(&cfg.plant, &[&pvko, &tiko], &x0, &params, cfg.dt)
            })
            .collect::<Result<_>>()?;
        let pv: Vec<f64> = results.iter().map(|r| r[0]).collect();
        let ti: Vec<f64> = results.iter().map(|r| r[1]).collect();
        let (pvko_mean, pvko_std) = mean_std(&pv);
        let (tiko_mean, tiko_std) = mean_std(&ti);
        out.push(OrderStats {
            order,
            pvko_mean,
            pvko_std,
            tiko_mean,
            tiko_std,
            trials,
        });
    }
    Ok(out)
}
