//! Tube-based robust MPC on the lifted parameter-varying model: QP assembly
//! with tightened constraints, the tube feedback law and the receding-horizon
//! closed loop with feasibility and cost-decrease monitoring.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pvko::PvkoModel;
use crate::qp::{solve_qp, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};
use crate::sets::{linear_map, pontryagin_diff, HPolytope, Zonotope};
use crate::simlab::{stage_cost, ParameterSignal, Simulator, Trajectory};
use crate::synthesis::TubeGain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// `ȳ_N = 0`.
    #[default]
    EqualityToOrigin,
    /// `C ȳ_N` in the tightened state set (no invariance guarantee).
    TightenedStateSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    #[serde(with = "crate::matrix_serde::mat")]
    pub q_lift: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub r: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::mat")]
    pub p_term: DMatrix<f64>,
    pub state_set: HPolytope,
    pub input_set: HPolytope,
    pub terminal: TerminalMode,
    pub gain: TubeGain,
    pub model: PvkoModel,
    /// `X ⊖ C S`.
    pub tightened_state: HPolytope,
    /// `U ⊖ K S`.
    pub tightened_input: HPolytope,
    #[serde(default)]
    pub qp: QpSettings,
}

impl MpcConfig {
    /// Tightens the constraint sets by the error set `S` of the gain (taken
    /// as `{0}` when the gain carries none). The terminal weight is `P`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: PvkoModel,
        gain: TubeGain,
        q_lift: DMatrix<f64>,
        r: DMatrix<f64>,
        state_set: HPolytope,
        input_set: HPolytope,
        horizon: usize,
        terminal: TerminalMode,
    ) -> Result<Self> {
        model.validate()?;
        let (n, q, m) = (model.state_dim(), model.lifted_dim(), model.input_dim());
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if q_lift.shape() != (q, q) {
            return Err(Error::dim("lifted stage weight", q, q_lift.nrows()));
        }
        if r.shape() != (m, m) {
            return Err(Error::dim("input weight", m, r.nrows()));
        }
        if gain.k.shape() != (m, q) || gain.p.shape() != (q, q) {
            return Err(Error::dim("tube gain", q, gain.k.ncols()));
        }
        if state_set.dim() != n {
            return Err(Error::dim("state constraint set", n, state_set.dim()));
        }
        if input_set.dim() != m {
            return Err(Error::dim("input constraint set", m, input_set.dim()));
        }
        if input_set.axis_bounds().is_none() {
            return Err(Error::InvalidInput("input constraint set must be a box".into()));
        }
        let s = gain.rpi_set().cloned().unwrap_or_else(|| Zonotope::origin(q));
        if s.dim() != q {
            return Err(Error::dim("error set", q, s.dim()));
        }
        let tightened_state = pontryagin_diff(&state_set, &linear_map(&model.c, &s)?)?;
        let tightened_input = pontryagin_diff(&input_set, &linear_map(&gain.k, &s)?)?;
        Ok(MpcConfig {
            horizon,
            p_term: gain.p.clone(),
            q_lift,
            r,
            state_set,
            input_set,
            terminal,
            gain,
            model,
            tightened_state,
            tightened_input,
            qp: QpSettings {
                // With the terminal equality the optimal cost must decrease
                // from step to step; resolving that near the origin needs
                // solutions far below the default tolerance.
                polish_target: if terminal == TerminalMode::EqualityToOrigin {
                    1e-12
                } else {
                    QpSettings::default().polish_target
                },
                ..QpSettings::default()
            },
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.model.lifted_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// Variables are interleaved stage by stage: `ȳ_0, ū_0, ȳ_1, …, ū_{N-1}, ȳ_N`.
    pub fn num_vars(&self) -> usize {
        self.horizon * (self.lifted_dim() + self.input_dim()) + self.lifted_dim()
    }

    fn y_index(&self, k: usize) -> usize {
        k * (self.lifted_dim() + self.input_dim())
    }

    fn u_index(&self, k: usize) -> usize {
        self.y_index(k) + self.lifted_dim()
    }

    fn stage_rows(&self) -> usize {
        self.tightened_state.num_rows() + self.tightened_input.num_rows() + self.lifted_dim()
    }

    fn terminal_rows(&self) -> usize {
        match self.terminal {
            TerminalMode::EqualityToOrigin => self.lifted_dim(),
            TerminalMode::TightenedStateSet => self.tightened_state.num_rows(),
        }
    }
}

/// Row layout of the assembled program: `q` initial-state rows, then per
/// stage the state rows, input rows and dynamics rows, then terminal rows.
#[derive(Debug, Clone)]
pub struct MpcQp {
    pub qp: QpProblem,
    pub forecast: Vec<f64>,
}

/// Assembles the nominal MPC program from the lifted initial state `y0`.
pub fn build_qp(cfg: &MpcConfig, y0: &DVector<f64>, forecast: &[f64]) -> Result<MpcQp> {
    let (q, m, nh) = (cfg.lifted_dim(), cfg.input_dim(), cfg.horizon);
    if forecast.len() != nh {
        return Err(Error::ForecastUnavailable {
            needed: nh,
            available: forecast.len(),
        });
    }
    if y0.len() != q {
        return Err(Error::dim("lifted initial state", q, y0.len()));
    }
    let nv = cfg.num_vars();
    let mut pt = Vec::new();
    let push_block = |pt: &mut Vec<(usize, usize, f64)>, off: usize, w: &DMatrix<f64>| {
        for j in 0..w.ncols() {
            for i in 0..=j {
                let v = w[(i, j)] + w[(j, i)];
                if v != 0.0 {
                    pt.push((off + i, off + j, v));
                }
            }
        }
    };
    for k in 0..nh {
        push_block(&mut pt, cfg.y_index(k), &cfg.q_lift);
        push_block(&mut pt, cfg.u_index(k), &cfg.r);
    }
    push_block(&mut pt, cfg.y_index(nh), &cfg.p_term);

    let mut at = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0;
    for i in 0..q {
        at.push((row, i, 1.0));
        l.push(y0[i]);
        u.push(y0[i]);
        row += 1;
    }
    let sc = &cfg.tightened_state.a * &cfg.model.c;
    let state_rows =
        |at: &mut Vec<(usize, usize, f64)>, l: &mut Vec<f64>, u: &mut Vec<f64>, row: &mut usize, off: usize| {
            for r in 0..sc.nrows() {
                for j in 0..q {
                    if sc[(r, j)] != 0.0 {
                        at.push((*row, off + j, sc[(r, j)]));
                    }
                }
                l.push(f64::NEG_INFINITY);
                u.push(cfg.tightened_state.b[r]);
                *row += 1;
            }
        };
    for (k, &p) in forecast.iter().enumerate() {
        let (yk, uk, yn) = (cfg.y_index(k), cfg.u_index(k), cfg.y_index(k + 1));
        state_rows(&mut at, &mut l, &mut u, &mut row, yk);
        let ui = &cfg.tightened_input;
        for r in 0..ui.num_rows() {
            for j in 0..m {
                if ui.a[(r, j)] != 0.0 {
                    at.push((row, uk + j, ui.a[(r, j)]));
                }
            }
            l.push(f64::NEG_INFINITY);
            u.push(ui.b[r]);
            row += 1;
        }
        let (a, b) = cfg.model.evaluate(p)?;
        for i in 0..q {
            at.push((row, yn + i, 1.0));
            for j in 0..q {
                if a[(i, j)] != 0.0 {
                    at.push((row, yk + j, -a[(i, j)]));
                }
            }
            for j in 0..m {
                if b[(i, j)] != 0.0 {
                    at.push((row, uk + j, -b[(i, j)]));
                }
            }
            l.push(0.0);
            u.push(0.0);
            row += 1;
        }
    }
    match cfg.terminal {
        TerminalMode::EqualityToOrigin => {
            for i in 0..q {
                at.push((row, cfg.y_index(nh) + i, 1.0));
                l.push(0.0);
                u.push(0.0);
                row += 1;
            }
        }
        TerminalMode::TightenedStateSet => {
            state_rows(&mut at, &mut l, &mut u, &mut row, cfg.y_index(nh));
        }
    }
    let qp = QpProblem::from_triplets(
        nv,
        &pt,
        DVector::zeros(nv),
        row,
        &at,
        DVector::from_vec(l),
        DVector::from_vec(u),
    )?;
    Ok(MpcQp {
        qp,
        forecast: forecast.to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub nominal_states: Vec<DVector<f64>>,
    pub nominal_inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub raw: QpSolution,
}

impl MpcSolution {
    fn from_raw(cfg: &MpcConfig, raw: QpSolution) -> Self {
        let (q, m) = (cfg.lifted_dim(), cfg.input_dim());
        let nominal_states = (0..=cfg.horizon)
            .map(|k| raw.x.rows(cfg.y_index(k), q).into_owned())
            .collect();
        let nominal_inputs = (0..cfg.horizon)
            .map(|k| raw.x.rows(cfg.u_index(k), m).into_owned())
            .collect();
        MpcSolution {
            nominal_states,
            nominal_inputs,
            objective: raw.objective,
            status: raw.status,
            kkt_residual: raw.kkt_residual,
            iterations: raw.iterations,
            raw,
        }
    }

    /// Largest dynamics defect `|ȳ_{k+1} - A(p_k) ȳ_k - B(p_k) ū_k|`.
    pub fn dynamics_residual(&self, model: &PvkoModel, forecast: &[f64]) -> Result<f64> {
        let mut worst = 0.0f64;
        for (k, &p) in forecast.iter().enumerate() {
            let (a, b) = model.evaluate(p)?;
            let d = &self.nominal_states[k + 1] - a * &self.nominal_states[k] - b * &self.nominal_inputs[k];
            worst = worst.max(d.amax());
        }
        Ok(worst)
    }
}

/// Solves an assembled program; `warm` is a previous solution in the same
/// row layout.
pub fn solve_mpc(cfg: &MpcConfig, problem: &MpcQp, warm: Option<&WarmStart>) -> Result<MpcSolution> {
    let raw = solve_qp(&problem.qp, &cfg.qp, warm)?;
    Ok(MpcSolution::from_raw(cfg, raw))
}

/// Shifted candidate for the next step: drop the first stage and extend with
/// `ū_{N-1} = K ȳ_N`, `ȳ_{N+1} = A(p) ȳ_N + B(p) K ȳ_N` where `p` is the new
/// last forecast value. Multipliers are shifted stage-wise.
pub fn shifted_warm_start(cfg: &MpcConfig, prev: &MpcSolution, next_last_param: f64) -> Result<WarmStart> {
    let (q, m, nh) = (cfg.lifted_dim(), cfg.input_dim(), cfg.horizon);
    let mut x = DVector::zeros(cfg.num_vars());
    for k in 0..nh {
        x.rows_mut(cfg.y_index(k), q).copy_from(&prev.nominal_states[k + 1]);
        if k + 1 < nh {
            x.rows_mut(cfg.u_index(k), m).copy_from(&prev.nominal_inputs[k + 1]);
        }
    }
    let y_end = &prev.nominal_states[nh];
    let u_end = &cfg.gain.k * y_end;
    let (a, b) = cfg.model.evaluate(next_last_param)?;
    x.rows_mut(cfg.u_index(nh - 1), m).copy_from(&u_end);
    x.rows_mut(cfg.y_index(nh), q).copy_from(&(a * y_end + b * &u_end));

    let sr = cfg.stage_rows();
    let total = q + nh * sr + cfg.terminal_rows();
    let prev_y = &prev.raw.y;
    let mut y = DVector::zeros(total);
    if prev_y.len() == total {
        for k in 0..nh - 1 {
            let from = q + (k + 1) * sr;
            let to = q + k * sr;
            y.rows_mut(to, sr).copy_from(&prev_y.rows(from, sr));
        }
        let t = cfg.terminal_rows();
        y.rows_mut(total - t, t).copy_from(&prev_y.rows(total - t, t));
    }
    Ok(WarmStart { x, y })
}

/// `u = ū_0 + K (y - ȳ_0)` clipped into the input box; the flag reports clipping.
pub fn tube_control(
    u_bar: &DVector<f64>,
    y_bar: &DVector<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    input_set: &HPolytope,
) -> Result<(DVector<f64>, bool)> {
    if y.len() != y_bar.len() || k.ncols() != y.len() || k.nrows() != u_bar.len() {
        return Err(Error::dim("tube feedback", k.ncols(), y.len()));
    }
    let (lo, hi) = input_set
        .axis_bounds()
        .ok_or_else(|| Error::InvalidInput("input constraint set must be a box".into()))?;
    if lo.len() != u_bar.len() {
        return Err(Error::dim("input set", u_bar.len(), lo.len()));
    }
    let raw = u_bar + k * (y - y_bar);
    let mut clipped = false;
    let u = DVector::from_fn(raw.len(), |i, _| {
        let c = raw[i].clamp(lo[i], hi[i]);
        clipped |= c != raw[i];
        c
    });
    Ok((u, clipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClosedLoopEvent {
    /// A program after the first one was not solved to optimality.
    RecursiveFeasibilityViolation { step: usize, status: QpStatus },
    /// In a disturbance-free run, the optimal cost increased.
    LyapunovViolation { step: usize, increase: f64 },
    /// The tube input left the input set and was clipped.
    InputClipped { step: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub param: f64,
    pub stage_cost: f64,
    pub optimal_cost: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub clipped: bool,
    pub solve_seconds: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub trajectory: Trajectory,
    pub records: Vec<StepRecord>,
    pub events: Vec<ClosedLoopEvent>,
    /// `y - ȳ_0` at each step, in lifted coordinates.
    pub tube_errors: Vec<DVector<f64>>,
}

impl ClosedLoopResult {
    pub fn feasibility_violations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, ClosedLoopEvent::RecursiveFeasibilityViolation { .. }))
            .count()
    }

    pub fn lyapunov_violations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, ClosedLoopEvent::LyapunovViolation { .. }))
            .count()
    }

    pub fn clipped_steps(&self) -> usize {
        self.records.iter().filter(|r| r.clipped).count()
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().map(|r| r.solve_seconds).sum::<f64>() / n
    }

    /// Trajectory CSV: time, states, inputs, parameter, stage cost, optimal
    /// cost, solver status and iterations, clipping flag.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.trajectory.states.first().map(|x| x.len()).unwrap_or(0);
        let m = self.trajectory.inputs.first().map(|u| u.len()).unwrap_or(0);
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend(
            [
                "p",
                "stage_cost",
                "optimal_cost",
                "qp_status",
                "qp_iterations",
                "clipped",
            ]
            .map(String::from),
        );
        wr.write_record(&header)?;
        for (k, rec) in self.records.iter().enumerate() {
            let mut row = vec![format!("{}", rec.t)];
            row.extend(self.trajectory.states[k].iter().map(|v| format!("{v}")));
            row.extend(self.trajectory.inputs[k].iter().map(|v| format!("{v}")));
            row.push(format!("{}", rec.param));
            row.push(format!("{}", rec.stage_cost));
            row.push(format!("{}", rec.optimal_cost));
            row.push(format!("{:?}", rec.status));
            row.push(format!("{}", rec.iterations));
            row.push(format!("{}", u8::from(rec.clipped)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Physical weights used for the recorded stage cost.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub qx: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Receding-horizon loop: at each step lift the measurement, solve the
/// program with the known forecast, apply the tube law and advance the plant.
pub fn run_closed_loop(
    cfg: &MpcConfig,
    plant: &mut dyn Simulator,
    signal: &ParameterSignal,
    steps: usize,
    weights: &CostWeights,
) -> Result<ClosedLoopResult> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let n = cfg.model.state_dim();
    let x0 = plant.state();
    if x0.len() != n {
        return Err(Error::dim("plant state", n, x0.len()));
    }
    let dt = cfg.model.dt;
    let nh = cfg.horizon;
    if let Some(avail) = signal.horizon_steps(dt) {
        if avail < steps + nh {
            return Err(Error::ForecastUnavailable {
                needed: steps + nh,
                available: avail,
            });
        }
    }
    let params = signal.path(steps + nh, dt)?;
    let lyap_check = plant.disturbance_free();
    let mut traj = Trajectory {
        dt,
        states: vec![x0],
        inputs: Vec::with_capacity(steps),
        params: Vec::with_capacity(steps),
    };
    let mut records = Vec::with_capacity(steps);
    let mut events = Vec::new();
    let mut tube_errors = Vec::with_capacity(steps);
    // Plan shifted into the next warm start: the last optimal solution, or
    // its shifted successor when a step falls back on it.
    let mut plan: Option<MpcSolution> = None;
    let mut prev_cost: Option<f64> = None;
    for t in 0..steps {
        let y = plant.lifted(&cfg.model)?;
        let forecast = &params[t..t + nh];
        let problem = build_qp(cfg, &y, forecast)?;
        let warm = match &plan {
            Some(p) => Some(shifted_warm_start(cfg, p, forecast[nh - 1])?),
            None => None,
        };
        let clock = Instant::now();
        let sol = solve_mpc(cfg, &problem, warm.as_ref())?;
        let solve_seconds = clock.elapsed().as_secs_f64();
        let optimal = sol.status == QpStatus::Optimal;
        let (u_bar, y_bar) = if optimal {
            (sol.nominal_inputs[0].clone(), sol.nominal_states[0].clone())
        } else if let Some(w) = warm.as_ref().filter(|_| t > 0) {
            events.push(ClosedLoopEvent::RecursiveFeasibilityViolation {
                step: t,
                status: sol.status,
            });
            (
                w.x.rows(cfg.u_index(0), cfg.input_dim()).into_owned(),
                w.x.rows(cfg.y_index(0), cfg.lifted_dim()).into_owned(),
            )
        } else {
            return Err(Error::InitialInfeasibility {
                status: format!("{:?}", sol.status),
            });
        };
        if optimal && lyap_check {
            if let Some(jp) = prev_cost {
                if sol.objective > jp + 1e-8 {
                    events.push(ClosedLoopEvent::LyapunovViolation {
                        step: t,
                        increase: sol.objective - jp,
                    });
                }
            }
        }
        let (u, clipped) = tube_control(&u_bar, &y_bar, &y, &cfg.gain.k, &cfg.input_set)?;
        if clipped {
            events.push(ClosedLoopEvent::InputClipped { step: t });
        }
        let x = plant.state();
        let p = params[t];
        records.push(StepRecord {
            t: t as f64 * dt,
            param: p,
            stage_cost: stage_cost(&x, &u, &weights.qx, &weights.r)?,
            optimal_cost: if optimal { sol.objective } else { f64::NAN },
            status: sol.status,
            iterations: sol.iterations,
            clipped,
            solve_seconds,
            kkt_residual: sol.kkt_residual,
        });
        tube_errors.push(&y - &y_bar);
        plant.advance(&u, p)?;
        traj.states.push(plant.state());
        traj.inputs.push(u);
        traj.params.push(p);
        prev_cost = optimal.then_some(sol.objective);
        plan = Some(if optimal {
            sol
        } else {
            let w = warm.expect("fallback implies a warm start");
            let mut raw = sol.raw;
            raw.x = w.x;
            raw.y = w.y;
            MpcSolution::from_raw(cfg, raw)
        });
    }
    Ok(ClosedLoopResult {
        trajectory: traj,
        records,
        events,
        tube_errors,
    })
}
