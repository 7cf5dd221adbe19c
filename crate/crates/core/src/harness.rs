//! Experiment configuration, trial execution and aggregation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{GrcController, GrcParams, LqgController, LqgWeights};
use crate::controller::{Controller, ZeroController};
use crate::dsc::{default_truncation, ConstraintSet, DscController, DscParams};
use crate::error::{Error, Result};
use crate::lds::{random_system, CostFunction, DisturbanceKind, DisturbanceSource, SimState, SystemModel, Transition};
use crate::signals::ConvMode;

const STREAM_SYSTEM: u64 = 0;
const STREAM_INITIAL: u64 = 1;
const STREAM_DISTURBANCE: u64 = 2;

/// How the system of each trial is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    /// A fresh diagonalizable system per trial.
    Random {
        state_dim: usize,
        obs_dim: usize,
        control_dim: usize,
        spectral_radius: f64,
    },
    /// Fixed matrices, given row by row.
    Explicit {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        gamma: f64,
    },
}

/// Quadratic cost `yᵀQy + uᵀRu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `Q = q_scale · I_p`, `R = r_scale · I_n`.
    Quadratic {
        #[serde(default = "one")]
        q_scale: f64,
        #[serde(default = "one")]
        r_scale: f64,
    },
    QuadraticMatrices { q: Vec<Vec<f64>>, r: Vec<Vec<f64>> },
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec::Quadratic {
            q_scale: 1.0,
            r_scale: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Disturbance process plus its norm bound `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    #[serde(flatten)]
    pub kind: DisturbanceKind,
    pub bound: f64,
}

/// OGD step size: a constant, or a constant divided by the system factor
/// `G κ¹² κ_B κ_C³ W²` that sets the step size in the regret bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    SystemScaled { system_scaled: f64 },
}

impl StepSize {
    pub fn resolve(self, model: &SystemModel) -> f64 {
        match self {
            StepSize::Fixed(eta) => eta,
            StepSize::SystemScaled { system_scaled } => {
                system_scaled
                    / (model.g * model.kappa.powi(12) * model.kappa_b * model.kappa_c.powi(3) * model.w_bound.powi(2))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    Dsc {
        h: usize,
        h_tilde: usize,
        m: usize,
        m_tilde: usize,
        eta: StepSize,
        /// Counterfactual truncation; defaults to `⌈(1/γ) log(κ²T)⌉`.
        #[serde(default)]
        truncation: Option<usize>,
        /// Frobenius radius; defaults to `R_M`.
        #[serde(default)]
        radius: Option<f64>,
        /// Filter stability margin; defaults to the system's `γ`.
        #[serde(default)]
        gamma: Option<f64>,
    },
    Grc {
        memory: usize,
        eta: StepSize,
        #[serde(default)]
        truncation: Option<usize>,
        #[serde(default)]
        radius: Option<f64>,
    },
    Lqg {
        #[serde(default = "default_lqg_eps")]
        eps: f64,
    },
    Zero,
}

fn default_lqg_eps() -> f64 {
    1e-6
}

impl ControllerSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerSpec::Dsc { .. } => "DSC",
            ControllerSpec::Grc { .. } => "GRC",
            ControllerSpec::Lqg { .. } => "LQG",
            ControllerSpec::Zero => "zero",
        }
    }
}

fn default_trials() -> usize {
    100
}

fn default_window() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// One experiment: a system family, a transition rule, a disturbance
/// process and the controllers to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub horizon: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    /// Draw one random system from this seed and share it across trials;
    /// by default every trial draws its own.
    #[serde(default)]
    pub system_seed: Option<u64>,
    #[serde(default)]
    pub transition: Transition,
    /// Standard deviation of a Gaussian initial state; 0 starts at the origin.
    #[serde(default)]
    pub initial_state_std: f64,
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub cost: CostSpec,
    pub controllers: Vec<ControllerSpec>,
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    /// All controllers of a trial face the same disturbance realization.
    #[serde(default = "default_true")]
    pub shared_adversary: bool,
    #[serde(default)]
    pub naive_conv: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "window_fraction must lie in (0, 1], got {}",
                self.window_fraction
            )));
        }
        if self.controllers.is_empty() {
            return Err(Error::Config("at least one controller is required".into()));
        }
        if !(self.initial_state_std >= 0.0) {
            return Err(Error::Config("initial_state_std must be nonnegative".into()));
        }
        let mut labels: Vec<_> = self.controllers.iter().map(ControllerSpec::label).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each controller kind may appear once".into()));
        }
        Ok(())
    }

    pub fn controller_names(&self) -> Vec<String> {
        self.controllers.iter().map(|c| c.label().to_string()).collect()
    }
}

/// Seed of trial `index`: the base seed mixed with the index through SplitMix64.
pub fn trial_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("matrix {name} must be a nonempty rectangle")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn build_system(config: &ExperimentConfig, seed: u64) -> Result<SystemModel> {
    let model = match &config.system {
        SystemSpec::Random {
            state_dim,
            obs_dim,
            control_dim,
            spectral_radius,
        } => random_system(
            *state_dim,
            *control_dim,
            *obs_dim,
            *spectral_radius,
            &mut stream_rng(config.system_seed.unwrap_or(seed), STREAM_SYSTEM),
        )?,
        SystemSpec::Explicit { a, b, c, gamma } => SystemModel::new(
            matrix_from_rows(a, "a")?,
            matrix_from_rows(b, "b")?,
            matrix_from_rows(c, "c")?,
            *gamma,
        )?,
    };
    model.with_bounds(config.disturbance.bound.max(1.0), 1.0)
}

fn build_cost(spec: &CostSpec, model: &SystemModel) -> Result<CostFunction> {
    let (p, n) = (model.obs_dim(), model.control_dim());
    match spec {
        CostSpec::Quadratic { q_scale, r_scale } => {
            CostFunction::quadratic(DMatrix::identity(p, p) * *q_scale, DMatrix::identity(n, n) * *r_scale)
        }
        CostSpec::QuadraticMatrices { q, r } => {
            let q = matrix_from_rows(q, "q")?;
            let r = matrix_from_rows(r, "r")?;
            if q.shape() != (p, p) || r.shape() != (n, n) {
                return Err(Error::Config(format!("cost matrices must be {p}x{p} and {n}x{n}")));
            }
            CostFunction::quadratic(q, r)
        }
    }
}

fn build_controller(
    spec: &ControllerSpec,
    config: &ExperimentConfig,
    model: &SystemModel,
    cost: &CostFunction,
) -> Result<Box<dyn Controller>> {
    let (n, p) = (model.control_dim(), model.obs_dim());
    let truncation_default = default_truncation(model.gamma, model.kappa, config.horizon);
    Ok(match spec {
        ControllerSpec::Dsc {
            h,
            h_tilde,
            m,
            m_tilde,
            eta,
            truncation,
            radius,
            gamma,
        } => {
            let params = DscParams::new(*h, *h_tilde, *m, *m_tilde, gamma.unwrap_or(model.gamma), n, p, eta.resolve(model))?;
            let mut cs = ConstraintSet::for_model(model, (*h).max(1), *h_tilde)?;
            if let Some(r) = radius {
                cs = ConstraintSet::new(cs.r, *r)?;
            }
            let mode = if config.naive_conv { ConvMode::Naive } else { ConvMode::Fast };
            Box::new(DscController::new(
                model.clone(),
                cost.clone(),
                params,
                cs,
                truncation.unwrap_or(truncation_default),
                mode,
            )?)
        }
        ControllerSpec::Grc {
            memory,
            eta,
            truncation,
            radius,
        } => {
            let radius = match radius {
                Some(r) => *r,
                None => ConstraintSet::for_model(model, 1, 1)?.r_m,
            };
            let params = GrcParams::new(*memory, n, p, eta.resolve(model), radius)?;
            Box::new(GrcController::new(
                model.clone(),
                cost.clone(),
                params,
                truncation.unwrap_or(truncation_default),
            )?)
        }
        ControllerSpec::Lqg { eps } => {
            let variance = config
                .disturbance
                .kind
                .coordinate_variance(model.state_dim(), config.disturbance.bound);
            let weights = LqgWeights::standard(model, variance, *eps);
            Box::new(LqgController::new(model.clone(), &weights, 1e-9, 1_000_000)?)
        }
        ControllerSpec::Zero => Box::new(ZeroController::new(n)),
    })
}

/// Per-step costs of every controller in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub trial: usize,
    pub seed: u64,
    pub controllers: Vec<String>,
    /// `costs[c][t]`.
    pub costs: Vec<Vec<f64>>,
    /// FNV-1a digest of the disturbances each controller consumed.
    pub disturbance_digests: Vec<u64>,
}

impl TrialLog {
    pub fn horizon(&self) -> usize {
        self.costs.first().map_or(0, Vec::len)
    }

    /// `(t, cost per controller)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
        (0..self.horizon()).map(move |t| (t, self.costs.iter().map(|c| c[t]).collect()))
    }
}

fn fnv1a(digest: &mut u64, w: &DVector<f64>) {
    for v in w.iter() {
        for byte in v.to_bits().to_le_bytes() {
            *digest ^= byte as u64;
            *digest = digest.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Runs every controller of `config` against trial `index`'s system and disturbances.
pub fn run_trial(config: &ExperimentConfig, index: usize) -> Result<TrialLog> {
    config.validate()?;
    let seed = trial_seed(config.seed, index);
    let model = build_system(config, seed)?;
    let cost = build_cost(&config.cost, &model)?;
    let d = model.state_dim();

    let mut init_rng = stream_rng(seed, STREAM_INITIAL);
    let x0 = DVector::from_fn(d, |_, _| config.initial_state_std * init_rng.sample::<f64, _>(StandardNormal));

    let disturbances = |stream: u64| -> Result<Vec<DVector<f64>>> {
        DisturbanceSource::new(
            config.disturbance.kind.clone(),
            d,
            config.disturbance.bound,
            stream_rng(seed, stream),
        )?
        .take(config.horizon)
    };
    let shared = if config.shared_adversary {
        Some(disturbances(STREAM_DISTURBANCE)?)
    } else {
        None
    };

    let mut costs = Vec::with_capacity(config.controllers.len());
    let mut digests = Vec::with_capacity(config.controllers.len());
    for (ci, spec) in config.controllers.iter().enumerate() {
        let owned;
        let ws = match &shared {
            Some(ws) => ws,
            None => {
                owned = disturbances(STREAM_DISTURBANCE + 1 + ci as u64)?;
                &owned
            }
        };
        let mut controller = build_controller(spec, config, &model, &cost)?;
        let mut state = SimState::from_state(x0.clone());
        let mut series = Vec::with_capacity(config.horizon);
        let mut digest = 0xcbf2_9ce4_8422_2325u64;
        let diverged = |step: usize| Error::Divergence {
            controller: spec.label().to_string(),
            trial: index,
            step,
        };
        for (t, w) in ws.iter().enumerate() {
            let y = state.observe(&model);
            let u = controller.act(&y).map_err(|_| diverged(t))?;
            let value = cost.evaluate(&y, &u)?.value;
            if !value.is_finite() {
                return Err(diverged(t));
            }
            series.push(value);
            fnv1a(&mut digest, w);
            state.advance(config.transition, &model, &u, w).map_err(|_| diverged(t))?;
        }
        costs.push(series);
        digests.push(digest);
    }
    Ok(TrialLog {
        trial: index,
        seed,
        controllers: config.controller_names(),
        costs,
        disturbance_digests: digests,
    })
}

/// `out[t] = mean(costs[max(0, t−w+1)..=t])` with `w = max(1, ⌊fraction·T⌋)`.
pub fn sliding_window(costs: &[f64], fraction: f64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Parameter("sliding window over an empty series".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("window fraction must lie in (0, 1], got {fraction}")));
    }
    let w = ((fraction * costs.len() as f64).floor() as usize).max(1);
    let mut out = Vec::with_capacity(costs.len());
    let mut sum = 0.0;
    for t in 0..costs.len() {
        sum += costs[t];
        if t >= w {
            sum -= costs[t - w];
        }
        // Re-summing each window keeps the running sum from drifting.
        let start = (t + 1).saturating_sub(w);
        let exact: f64 = if t % 256 == 255 { costs[start..=t].iter().sum() } else { sum };
        sum = exact;
        out.push(exact / (t + 1 - start) as f64);
    }
    Ok(out)
}

/// Sliding-window mean curves and normal-approximation 95% CIs across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub controllers: Vec<String>,
    /// `mean[c][t]`.
    pub mean: Vec<Vec<f64>>,
    /// `half_width[c][t] = 1.96 · std / √trials`.
    pub half_width: Vec<Vec<f64>>,
    pub trials: usize,
}

impl AggregateResult {
    pub fn empty() -> Self {
        AggregateResult {
            controllers: Vec::new(),
            mean: Vec::new(),
            half_width: Vec::new(),
            trials: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, controller: &str) -> Option<usize> {
        self.controllers.iter().position(|c| c == controller)
    }

    /// `(mean, ci_low, ci_high)` of a controller at the last step.
    pub fn final_window(&self, controller: &str) -> Option<(f64, f64, f64)> {
        let c = self.index_of(controller)?;
        let t = self.horizon().checked_sub(1)?;
        let (m, hw) = (self.mean[c][t], self.half_width[c][t]);
        Some((m, m - hw, m + hw))
    }
}

/// Aggregates trials in the order given.
pub fn aggregate(logs: &[TrialLog], fraction: f64) -> Result<AggregateResult> {
    if logs.len() < 2 {
        return Err(Error::Parameter(format!(
            "confidence intervals need at least 2 trials, got {}",
            logs.len()
        )));
    }
    let controllers = logs[0].controllers.clone();
    let horizon = logs[0].horizon();
    for log in logs {
        if log.controllers != controllers || log.horizon() != horizon {
            return Err(Error::Parameter(format!(
                "trial {} does not match the controllers or horizon of trial {}",
                log.trial, logs[0].trial
            )));
        }
    }
    let trials = logs.len() as f64;
    let mut mean = Vec::with_capacity(controllers.len());
    let mut half_width = Vec::with_capacity(controllers.len());
    for c in 0..controllers.len() {
        let curves = logs
            .iter()
            .map(|log| sliding_window(&log.costs[c], fraction))
            .collect::<Result<Vec<_>>>()?;
        let mut m = vec![0.0; horizon];
        let mut hw = vec![0.0; horizon];
        for t in 0..horizon {
            let mu = curves.iter().map(|curve| curve[t]).sum::<f64>() / trials;
            let spread = curves.iter().fold(0.0f64, |acc, curve| acc.max((curve[t] - mu).abs()));
            let sd = if spread > 0.0 && spread.is_finite() {
                let scaled: f64 = curves.iter().map(|curve| ((curve[t] - mu) / spread).powi(2)).sum();
                spread * (scaled / (trials - 1.0)).sqrt()
            } else {
                spread
            };
            m[t] = mu;
            hw[t] = 1.96 * sd / trials.sqrt();
        }
        mean.push(m);
        half_width.push(hw);
    }
    Ok(AggregateResult {
        controllers,
        mean,
        half_width,
        trials: logs.len(),
    })
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub const CSV_HEADER: &str = "t,controller,mean,ci_low,ci_high";

/// Writes `t,controller,mean,ci_low,ci_high` rows, ordered by step then controller.
pub fn write_csv(result: &AggregateResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(64 * (result.horizon() * result.controllers.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for t in 0..result.horizon() {
        for (c, name) in result.controllers.iter().enumerate() {
            let (m, hw) = (result.mean[c][t], result.half_width[c][t]);
            text.push_str(&format!(
                "{t},{name},{},{},{}\n",
                format_float(m),
                format_float(m - hw),
                format_float(m + hw)
            ));
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A trial aborted because a controller diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub trial: usize,
    pub controller: String,
    pub step: usize,
}

/// Output of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// Completed trials, in trial order.
    pub logs: Vec<TrialLog>,
    /// Aborted trials, in trial order; excluded from the aggregate.
    pub failures: Vec<TrialFailure>,
    pub aggregate: AggregateResult,
}

/// Runs all trials (in parallel when `threads != 1`) and aggregates the
/// completed ones in trial order.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentOutput> {
    config.validate()?;
    let run = || -> Vec<Result<TrialLog>> {
        (0..config.trials)
            .into_par_iter()
            .map(|i| run_trial(config, i))
            .collect()
    };
    let outcomes = match threads {
        Some(1) => (0..config.trials).map(|i| run_trial(config, i)).collect(),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut logs = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(log) => logs.push(log),
            Err(Error::Divergence {
                controller,
                trial,
                step,
            }) => failures.push(TrialFailure {
                trial,
                controller,
                step,
            }),
            Err(e) => return Err(e),
        }
    }
    let aggregate = aggregate(&logs, config.window_fraction)?;
    Ok(ExperimentOutput {
        logs,
        failures,
        aggregate,
    })
}

pub const ERROR_CSV_HEADER: &str = "trial,controller,step,error";

/// Writes `<dir>/<name>.csv`, `<dir>/manifest.json` and, when trials were
/// aborted, `<dir>/<name>_errors.csv`; returns the main CSV path.
pub fn write_outputs(config: &ExperimentConfig, output: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", config.name));
    write_csv(&output.aggregate, &csv_path)?;
    let errors_path = dir.join(format!("{}_errors.csv", config.name));
    if output.failures.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
        }
    } else {
        let mut text = format!("{ERROR_CSV_HEADER}\n");
        for f in &output.failures {
            text.push_str(&format!("{},{},{},diverged\n", f.trial, f.controller, f.step));
        }
        fs::write(&errors_path, text).map_err(|e| Error::io(&errors_path, e))?;
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(csv_path)
}
