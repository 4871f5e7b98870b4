//! Command-line pipeline: data collection, identification, gain synthesis,
//! closed-loop simulation and evaluation. Every command reads one JSON
//! config, computes everything in memory, and only then writes its outputs
//! together with a manifest of content hashes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edmd::SnapshotSet;
use crate::error::{Error, Result};
use crate::lifting::{make_monomial_basis, make_thin_plate_basis_with, van_der_pol_exponents, DomainBox, LiftingBasis};
use crate::matrix_serde::from_rows;
use crate::mpc::{run_closed_loop, CostWeights, MpcConfig, TerminalMode};
use crate::pvko::{estimate_disturbance_set, identify_pvko, identify_time_invariant, PvkoModel};
use crate::sdp::BarrierOptions;
use crate::sets::{rpi_outer_approx_with, HPolytope, RpiOptions};
use crate::simlab::{
    cumulative_cost, monte_carlo_prediction, CollectionConfig, ParameterSignal, PhysicalSimulator, PlantKind,
    PredictionStudy,
};
use crate::synthesis::{lift_weights, solve_gain, SynthesisObjective, TubeGain};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "pvko",
    version,
    about = "Parameter-varying Koopman identification and tube MPC"
)]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate identification data, one CSV per working point.
    Collect,
    /// Fit the interpolated model (or a single time-invariant one).
    Identify {
        /// Directory written by `collect`.
        #[arg(long)]
        snapshots: PathBuf,
        /// Fit one model on the pooled data of all working points.
        #[arg(long)]
        time_invariant: bool,
        #[arg(long, default_value = "model.json")]
        name: String,
    },
    /// Synthesize the tube gain, error set and tightened constraints.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "controller.json")]
        name: String,
    },
    /// Run the closed loop on the plant.
    Simulate {
        #[arg(long)]
        controller: PathBuf,
        /// Stem of the output files.
        #[arg(long, default_value = "trajectory")]
        name: String,
    },
    /// Prediction accuracy study or closed-loop cost comparison.
    Evaluate {
        #[command(subcommand)]
        mode: EvaluateMode,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvaluateMode {
    /// Monte Carlo prediction RMSE per lifting order.
    RmseMc {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
    },
    /// Final cumulative cost, mean solve time and cost ratio per trajectory.
    CostTable {
        /// `label=path/to/trajectory.csv`, repeatable.
        #[arg(long = "trajectory", required = true)]
        trajectories: Vec<String>,
        /// Reference cost for the ratio column.
        #[arg(long, conflicts_with = "reference")]
        reference_cost: Option<f64>,
        /// Label of the trajectory whose cost is the reference.
        #[arg(long)]
        reference: Option<String>,
    },
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantKind,
    /// Sampling time (s).
    pub dt: f64,
    #[serde(default)]
    pub collection: Option<CollectionSection>,
    #[serde(default)]
    pub identification: Option<IdentificationSection>,
    #[serde(default)]
    pub synthesis: Option<SynthesisSection>,
    #[serde(default)]
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub evaluation: Option<EvaluationSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionSection {
    pub working_points: Vec<f64>,
    pub duration: f64,
    #[serde(default)]
    pub episode_length: Option<f64>,
    pub initial_box: DomainBox,
    #[serde(default)]
    pub input_bounds: Option<DomainBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    /// The nine monomials used for the Van der Pol benchmark.
    VanDerPolMonomials,
    Monomial {
        exponents: Vec<Vec<u32>>,
    },
    ThinPlate {
        centers: usize,
        center_box: DomainBox,
        #[serde(default)]
        append_state: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationSection {
    pub basis: BasisSpec,
    #[serde(default = "default_truncation")]
    pub truncation_tol: f64,
    /// Scale of the disturbance box about its center.
    #[serde(default = "default_inflation")]
    pub inflation: f64,
}

fn default_truncation() -> f64 {
    crate::edmd::DEFAULT_TRUNCATION_TOL
}

fn default_inflation() -> f64 {
    1.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tightening {
    /// Tighten by the error set estimated from the disturbance bound.
    #[default]
    Rpi,
    /// Nominal constraints; the tube feedback is still applied.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalGain {
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    /// Physical state weight (row-major).
    pub qx: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub objective: SynthesisObjective,
    /// Verify this gain instead of solving for one.
    #[serde(default)]
    pub external_gain: Option<ExternalGain>,
    #[serde(default)]
    pub tightening: Tightening,
    #[serde(default)]
    pub rpi: Option<RpiOptions>,
    pub state_bounds: DomainBox,
    pub input_bounds: DomainBox,
    pub horizon: usize,
    #[serde(default)]
    pub terminal: TerminalMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub parameter: ParameterSignal,
    /// Plant used in the loop; defaults to the top-level plant.
    #[serde(default)]
    pub plant: Option<PlantKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default)]
    pub rmse_mc: Option<RmseSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmseSection {
    pub center_box: DomainBox,
    pub trial_box: DomainBox,
    pub sine_terms: usize,
    pub sine_total_amplitude: f64,
    pub sine_max_frequency: f64,
    pub sine_offset: f64,
    #[serde(default)]
    pub append_state: bool,
    pub trials: usize,
    pub horizon: usize,
    pub orders: Vec<usize>,
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::Config(format!("config has no `{name}` section")))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    from_rows(rows, 0).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Parses a config with the JSON path of the offending field in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<PipelineConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config(format!(
            "{origin}:{}:{}: field `{path}`: {inner}",
            inner.line(),
            inner.column()
        ))
    })?;
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(Error::Config(format!("{origin}: field `dt` must be positive")));
    }
    Ok(cfg)
}

impl PipelineConfig {
    /// Collection settings with the top-level plant, step and seed filled in.
    pub fn collection_config(&self) -> Result<CollectionConfig> {
        let c = section(&self.collection, "collection")?;
        let cfg = CollectionConfig {
            plant: self.plant.clone(),
            working_points: c.working_points.clone(),
            duration: c.duration,
            dt: self.dt,
            episode_length: c.episode_length,
            initial_box: c.initial_box.clone(),
            input_bounds: c.input_bounds.as_ref().map(|b| (b.lo.clone(), b.hi.clone())),
            seed: self.seed,
        };
        cfg.validate().map_err(|e| Error::Config(format!("collection: {e}")))?;
        Ok(cfg)
    }

    pub fn basis(&self) -> Result<(LiftingBasis, &IdentificationSection)> {
        let id = section(&self.identification, "identification")?;
        let n = self.plant.state_dim();
        let basis = match &id.basis {
            BasisSpec::VanDerPolMonomials => make_monomial_basis(n, van_der_pol_exponents()),
            BasisSpec::Monomial { exponents } => make_monomial_basis(n, exponents.clone()),
            BasisSpec::ThinPlate {
                centers,
                center_box,
                append_state,
            } => make_thin_plate_basis_with(n, *centers, center_box, self.seed, *append_state),
        }
        .map_err(|e| Error::Config(format!("identification.basis: {e}")))?;
        Ok((basis, id))
    }

    pub fn weights(&self) -> Result<CostWeights> {
        let s = section(&self.synthesis, "synthesis")?;
        Ok(CostWeights {
            qx: matrix(&s.qx, "synthesis.qx")?,
            r: matrix(&s.r, "synthesis.r")?,
        })
    }

    /// The open-loop prediction study described by `evaluation.rmse_mc`.
    pub fn prediction_study(&self) -> Result<(PredictionStudy, &RmseSection)> {
        let ev = section(&self.evaluation, "evaluation")?;
        let rs = section(&ev.rmse_mc, "evaluation.rmse_mc")?;
        let study = PredictionStudy {
            collection: self.collection_config()?,
            center_box: rs.center_box.clone(),
            trial_box: rs.trial_box.clone(),
            sine_terms: rs.sine_terms,
            sine_total_amplitude: rs.sine_total_amplitude,
            sine_max_frequency: rs.sine_max_frequency,
            sine_offset: rs.sine_offset,
            append_state: rs.append_state,
            truncation_tol: self
                .identification
                .as_ref()
                .map(|i| i.truncation_tol)
                .unwrap_or_else(default_truncation),
        };
        Ok((study, rs))
    }
}

// ---------------------------------------------------------------- outputs

/// Files produced by a command, written only once everything succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, rel: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct RunContext {
    command: String,
    config_hash: Option<String>,
    seed: u64,
    started: f64,
    out: PathBuf,
}

fn write_outputs(ctx: &RunContext, outputs: Outputs) -> Result<()> {
    std::fs::create_dir_all(&ctx.out)?;
    let mut entries = Vec::new();
    for (rel, bytes) in &outputs.files {
        let path = ctx.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }
    let manifest = RunManifest {
        command: ctx.command.clone(),
        config_sha256: ctx.config_hash.clone(),
        seed: ctx.seed,
        versions: BTreeMap::from([("pvko".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
        started_unix: ctx.started,
        finished_unix: unix_now(),
        outputs: entries,
    };
    let name = format!("manifest-{}.json", ctx.command);
    std::fs::write(ctx.out.join(name), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn wp_label(p: f64) -> String {
    format!("p_{p}")
}

fn csv_bytes(s: &SnapshotSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    s.write_csv(&mut buf)?;
    Ok(buf)
}

// ---------------------------------------------------------------- commands

fn cmd_collect(cfg: &PipelineConfig, outputs: &mut Outputs) -> Result<()> {
    let cc = cfg.collection_config()?;
    let (train, val) = crate::simlab::collect_campaign(&cc)?;
    for s in &train {
        outputs.add(format!("snapshots/{}.csv", wp_label(s.working_point)), csv_bytes(s)?);
    }
    for s in &val {
        outputs.add(format!("validation/{}.csv", wp_label(s.working_point)), csv_bytes(s)?);
    }
    println!(
        "collected {} working points, {} training columns each",
        train.len(),
        train.first().map(|s| s.len()).unwrap_or(0)
    );
    Ok(())
}

fn read_snapshot_dir(dir: &Path) -> Result<Vec<SnapshotSet>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p)?;
            SnapshotSet::read_csv(f).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("{}: {m}", p.display())),
                Error::Csv(c) => Error::Parse(format!("{}: {c}", p.display())),
                other => other,
            })
        })
        .collect()
}

fn cmd_identify(
    cfg: &PipelineConfig,
    snapshots: &Path,
    time_invariant: bool,
    name: &str,
    outputs: &mut Outputs,
) -> Result<()> {
    let (basis, id) = cfg.basis()?;
    if !(id.inflation >= 1.0) {
        return Err(Error::Config("identification.inflation must be at least 1".into()));
    }
    let train_dir = snapshots.join("snapshots");
    if !train_dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", train_dir.display()),
        )));
    }
    let train = read_snapshot_dir(&train_dir)?;
    if train.is_empty() {
        return Err(Error::Parse(format!("no snapshot CSVs in {}", train_dir.display())));
    }
    if train.iter().any(|s| s.state_dim() != basis.state_dim()) {
        return Err(Error::dim("snapshot state", basis.state_dim(), train[0].state_dim()));
    }
    let val_dir = snapshots.join("validation");
    let val = if val_dir.is_dir() {
        read_snapshot_dir(&val_dir)?
    } else {
        Vec::new()
    };
    let mut model = if time_invariant {
        identify_time_invariant(&basis, &train, id.truncation_tol)?
    } else {
        identify_pvko(&basis, &train, id.truncation_tol)?
    };
    if val.is_empty() {
        log::warn!("no validation data found; the model carries no disturbance set");
    } else {
        model.disturbance = Some(estimate_disturbance_set(&model, &val, id.inflation)?);
    }
    for (l, r) in model.locals.iter().zip(&model.training_residuals) {
        println!("working point {}: relative training residual {r:.3e}", l.working_point);
    }
    if let Some(d) = &model.disturbance {
        println!(
            "disturbance box: max half-width {:.3e} from {} samples",
            d.set.half_widths().amax(),
            d.samples
        );
    }
    outputs.add(name, model.to_json()?.into_bytes());
    Ok(())
}

fn box_polytope(b: &DomainBox, what: &str) -> Result<HPolytope> {
    HPolytope::from_box(&b.lo, &b.hi).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Builds the controller bundle for `model` from the synthesis section.
pub fn synthesize_controller(cfg: &PipelineConfig, model: &PvkoModel) -> Result<MpcConfig> {
    let s = section(&cfg.synthesis, "synthesis")?;
    let w = cfg.weights()?;
    let q_lift = lift_weights(&w.qx, &model.c)?;
    let mut gain = match &s.external_gain {
        Some(g) => TubeGain::from_external(
            &model.locals,
            matrix(&g.k, "synthesis.external_gain.k")?,
            matrix(&g.p, "synthesis.external_gain.p")?,
            &q_lift,
            &w.r,
        )?,
        None => solve_gain(&model.locals, &q_lift, &w.r, s.objective, &BarrierOptions::default())?,
    };
    if s.tightening == Tightening::Rpi {
        let dist = model.disturbance.as_ref().ok_or_else(|| {
            Error::Config(
                "tightening `rpi` needs a model with a disturbance set (identify with validation data)".into(),
            )
        })?;
        let maps = gain.closed_loop_maps(&model.locals)?;
        gain.rpi = Some(rpi_outer_approx_with(
            &maps,
            &dist.set,
            Some(&gain.p),
            s.rpi.unwrap_or_default(),
        )?);
    }
    MpcConfig::new(
        model.clone(),
        gain,
        q_lift,
        w.r,
        box_polytope(&s.state_bounds, "synthesis.state_bounds")?,
        box_polytope(&s.input_bounds, "synthesis.input_bounds")?,
        s.horizon,
        s.terminal,
    )
}

fn cmd_synthesize(cfg: &PipelineConfig, model_path: &Path, name: &str, outputs: &mut Outputs) -> Result<()> {
    let model = PvkoModel::load(model_path)?;
    let ctrl = synthesize_controller(cfg, &model)?;
    let margins: Vec<String> = ctrl
        .gain
        .certificate_margins
        .iter()
        .map(|m| format!("{m:.3e}"))
        .collect();
    println!("certificate margins: [{}]", margins.join(", "));
    match &ctrl.gain.rpi {
        Some(r) => println!(
            "error set radius {:.4e} (depth {}, converged {}, rate {:.4})",
            r.set.radius(),
            r.depth,
            r.converged,
            r.ratio
        ),
        None => println!("no error set: constraints are not tightened"),
    }
    outputs.add(name, serde_json::to_vec(&ctrl)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    steps: usize,
    final_cost: f64,
    feasibility_violations: usize,
    lyapunov_violations: usize,
    clipped_steps: usize,
    events: Vec<crate::mpc::ClosedLoopEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Timing {
    steps: usize,
    mean_solve_seconds: f64,
    total_seconds: f64,
}

/// Gnuplot script with four panels: states, parameter, inputs, cumulative cost.
fn gnuplot_script(csv_name: &str, n: usize, m: usize) -> String {
    let p_col = 2 + n + m;
    let cost_col = p_col + 1;
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 900,1200\n");
    s.push_str(&format!("set output '{}.png'\n", csv_name.trim_end_matches(".csv")));
    s.push_str("set multiplot layout 4,1\nset key outside right\nset xlabel 't [s]'\n");
    let states: Vec<String> = (0..n)
        .map(|i| format!("'{csv_name}' using 1:{} with lines title 'x{}'", 2 + i, i + 1))
        .collect();
    s.push_str(&format!("set ylabel 'state'\nplot {}\n", states.join(", ")));
    s.push_str(&format!(
        "set ylabel 'p'\nplot '{csv_name}' using 1:{p_col} with lines title 'p'\n"
    ));
    let inputs: Vec<String> = (0..m)
        .map(|i| format!("'{csv_name}' using 1:{} with steps title 'u{}'", 2 + n + i, i + 1))
        .collect();
    if !inputs.is_empty() {
        s.push_str(&format!("set ylabel 'input'\nplot {}\n", inputs.join(", ")));
    }
    s.push_str(&format!(
        "set ylabel 'J_c'\nacc = 0\nplot '{csv_name}' using 1:(acc = acc + ${cost_col}) with lines title 'cumulative cost'\n"
    ));
    s.push_str("unset multiplot\n");
    s
}

fn cmd_simulate(
    cfg: &PipelineConfig,
    seed_override: Option<u64>,
    controller: &Path,
    name: &str,
    outputs: &mut Outputs,
) -> Result<()> {
    let sc = section(&cfg.scenario, "scenario")?;
    let weights = cfg.weights()?;
    let ctrl: MpcConfig = serde_json::from_str(&std::fs::read_to_string(controller)?)?;
    let plant = sc.plant.clone().unwrap_or_else(|| cfg.plant.clone());
    if sc.x0.len() != plant.state_dim() {
        return Err(Error::Config(format!(
            "scenario.x0 has {} entries, the plant has {} states",
            sc.x0.len(),
            plant.state_dim()
        )));
    }
    let mut signal = sc.parameter.clone();
    if let (ParameterSignal::RandomWalk { seed, .. }, Some(s)) = (&mut signal, seed_override) {
        *seed = s;
    }
    signal
        .validate()
        .map_err(|e| Error::Config(format!("scenario.parameter: {e}")))?;
    let mut sim = PhysicalSimulator::new(plant, DVector::from_column_slice(&sc.x0), ctrl.model.dt)?;
    let clock = Instant::now();
    let res = run_closed_loop(&ctrl, &mut sim, &signal, sc.steps, &weights)?;
    let total_seconds = clock.elapsed().as_secs_f64();
    let cost = cumulative_cost(&res.trajectory, &weights.qx, &weights.r)?;
    let final_cost = cost.last().copied().unwrap_or(0.0);
    println!(
        "final cumulative cost {final_cost:.4}, feasibility violations {}, clipped steps {}, mean solve {:.3} ms",
        res.feasibility_violations(),
        res.clipped_steps(),
        res.mean_solve_seconds() * 1e3
    );
    let mut csv = Vec::new();
    res.write_csv(&mut csv)?;
    let csv_name = format!("{name}.csv");
    outputs.add(&csv_name, csv);
    outputs.add(
        format!("{name}.gp"),
        gnuplot_script(&csv_name, ctrl.model.state_dim(), ctrl.model.input_dim()).into_bytes(),
    );
    let summary = SimulationSummary {
        steps: sc.steps,
        final_cost,
        feasibility_violations: res.feasibility_violations(),
        lyapunov_violations: res.lyapunov_violations(),
        clipped_steps: res.clipped_steps(),
        events: res.events.clone(),
    };
    outputs.add(format!("{name}.summary.json"), serde_json::to_vec_pretty(&summary)?);
    // Wall-clock times are kept apart so the other files stay reproducible.
    let timing = Timing {
        steps: sc.steps,
        mean_solve_seconds: res.mean_solve_seconds(),
        total_seconds,
    };
    outputs.add(format!("{name}.timing.json"), serde_json::to_vec_pretty(&timing)?);
    Ok(())
}

fn cmd_rmse_mc(
    cfg: &PipelineConfig,
    trials: Option<usize>,
    horizon: Option<usize>,
    orders: Option<Vec<usize>>,
    outputs: &mut Outputs,
) -> Result<()> {
    let (study, rs) = cfg.prediction_study()?;
    let orders = orders.unwrap_or_else(|| rs.orders.clone());
    let stats = monte_carlo_prediction(
        &study,
        trials.unwrap_or(rs.trials),
        horizon.unwrap_or(rs.horizon),
        &orders,
        cfg.seed,
    )?;
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wr.write_record(["order", "model", "mean_rmse", "std_rmse", "trials"])?;
    for s in &stats {
        println!(
            "order {:>3}: interpolated {:.4e} ± {:.2e}, time-invariant {:.4e} ± {:.2e}",
            s.order, s.pvko_mean, s.pvko_std, s.tiko_mean, s.tiko_std
        );
        for (model, mean, std) in [("pvko", s.pvko_mean, s.pvko_std), ("ko", s.tiko_mean, s.tiko_std)] {
            wr.write_record([
                s.order.to_string(),
                model.to_string(),
                format!("{mean:?}"),
                format!("{std:?}"),
                s.trials.to_string(),
            ])?;
        }
    }
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    outputs.add("rmse_mc.csv", bytes);
    Ok(())
}

/// Final cumulative cost of a trajectory CSV (sum of the `stage_cost` column).
pub fn trajectory_cost(path: &Path) -> Result<f64> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))),
        _ => Error::Parse(format!("{}: {e}", path.display())),
    })?;
    let header = rdr.headers()?.clone();
    let col = header
        .iter()
        .position(|h| h == "stage_cost")
        .ok_or_else(|| Error::Parse(format!("{}: missing column `stage_cost`", path.display())))?;
    let mut total = 0.0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec.get(col).unwrap_or("").parse().map_err(|_| {
            Error::Parse(format!(
                "{} line {}: `stage_cost` is not a number",
                path.display(),
                line + 2
            ))
        })?;
        total += v;
    }
    Ok(total)
}

fn cmd_cost_table(
    trajectories: &[String],
    reference_cost: Option<f64>,
    reference: Option<&str>,
    outputs: &mut Outputs,
) -> Result<()> {
    let mut rows = Vec::new();
    for spec in trajectories {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("trajectory `{spec}` is not of the form label=path")))?;
        let path = PathBuf::from(path);
        let cost = trajectory_cost(&path)?;
        let timing_path = path.with_extension("timing.json");
        let solve = match std::fs::read_to_string(&timing_path) {
            Ok(s) => serde_json::from_str::<Timing>(&s)?.mean_solve_seconds,
            Err(_) => f64::NAN,
        };
        rows.push((label.to_string(), cost, solve));
    }
    let reference = match (reference_cost, reference) {
        (Some(c), _) => Some(c),
        (None, Some(label)) => Some(
            rows.iter()
                .find(|r| r.0 == label)
                .map(|r| r.1)
                .ok_or_else(|| Error::Config(format!("reference label `{label}` not among the trajectories")))?,
        ),
        (None, None) => None,
    };
    if reference == Some(0.0) {
        return Err(Error::Config("reference cost is zero".into()));
    }
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wr.write_record(["controller", "final_cost", "mean_solve_seconds", "cost_ratio_percent"])?;
    for (label, cost, solve) in &rows {
        let ratio = reference.map(|r| 100.0 * (cost - r) / r).unwrap_or(f64::NAN);
        println!(
            "{label}: J_c = {cost:.4}, mean solve {:.3} ms, ratio {ratio:.2}%",
            solve * 1e3
        );
        wr.write_record([
            label.clone(),
            format!("{cost:?}"),
            format!("{solve:?}"),
            format!("{ratio:?}"),
        ])?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    outputs.add("cost_table.csv", bytes);
    Ok(())
}

// ---------------------------------------------------------------- entry

/// Exit status for an error: 2 config or parse, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<(PipelineConfig, String)> {
    let path = path.ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, sha256_hex(text.as_bytes())))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let started = unix_now();
    let needs_config = !matches!(
        cli.command,
        Command::Evaluate {
            mode: EvaluateMode::CostTable { .. }
        }
    );
    let loaded = if needs_config || cli.config.is_some() {
        Some(load_config(cli.config.as_deref(), cli.seed)?)
    } else {
        None
    };
    let (cfg, hash) = match &loaded {
        Some((c, h)) => (Some(c), Some(h.clone())),
        None => (None, None),
    };
    let mut outputs = Outputs::default();
    let command = match &cli.command {
        Command::Collect => {
            cmd_collect(cfg.expect("config loaded"), &mut outputs)?;
            "collect"
        }
        Command::Identify {
            snapshots,
            time_invariant,
            name,
        } => {
            cmd_identify(
                cfg.expect("config loaded"),
                snapshots,
                *time_invariant,
                name,
                &mut outputs,
            )?;
            "identify"
        }
        Command::Synthesize { model, name } => {
            cmd_synthesize(cfg.expect("config loaded"), model, name, &mut outputs)?;
            "synthesize"
        }
        Command::Simulate { controller, name } => {
            cmd_simulate(cfg.expect("config loaded"), cli.seed, controller, name, &mut outputs)?;
            "simulate"
        }
        Command::Evaluate {
            mode:
                EvaluateMode::RmseMc {
                    trials,
                    horizon,
                    orders,
                },
        } => {
            cmd_rmse_mc(
                cfg.expect("config loaded"),
                *trials,
                *horizon,
                orders.clone(),
                &mut outputs,
            )?;
            "evaluate-rmse-mc"
        }
        Command::Evaluate {
            mode:
                EvaluateMode::CostTable {
                    trajectories,
                    reference_cost,
                    reference,
                },
        } => {
            cmd_cost_table(trajectories, *reference_cost, reference.as_deref(), &mut outputs)?;
            "evaluate-cost-table"
        }
    };
    let ctx = RunContext {
        command: command.to_string(),
        config_hash: hash,
        seed: cfg.map(|c| c.seed).or(cli.seed).unwrap_or(0),
        started,
        out: cli.out.clone(),
    };
    write_outputs(&ctx, outputs)
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"plant": {"name": "lorenz"}, "dt": 0.01}"#;

    #[test]
    fn parses_minimal_config() {
        let c = parse_config(MINIMAL, "inline").unwrap();
        assert_eq!(c.plant.state_dim(), 3);
        assert!(c.collection.is_none());
    }

    #[test]
    fn unknown_plant_names_the_field() {
        let err = parse_config(r#"{"plant": {"name": "pendulum"}, "dt": 0.01}"#, "cfg.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("plant"), "{msg}");
        assert!(msg.contains("cfg.json:1:"), "{msg}");
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = parse_config(r#"{"plant": {"name": "lorenz"}, "dt": 0.01, "horizon": 3}"#, "c").unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::NotContractive { ratio: 1.0 }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_CONFIG);
    }

    #[test]
    fn gnuplot_script_has_four_panels() {
        let s = gnuplot_script("run.csv", 2, 1);
        assert_eq!(s.matches("plot '").count(), 4);
        assert!(s.contains("using 1:5 with lines title 'p'"));
        assert!(s.contains("$6"));
    }
}
