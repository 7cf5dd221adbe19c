//! Double spectral control.
//!
//! Natural observations are lifted with a first Hankel filter bank,
//!
//! ```text
//! ỹ_t = [ y_nat_t ; σ_0^{1/4} Y_{t:t−m} φ_0 ; … ; σ_h^{1/4} Y_{t:t−m} φ_h ] ∈ R^{(h+2)p},
//! ```
//!
//! and the lifted stream is filtered again with a second bank,
//!
//! ```text
//! u_t = M_0 ỹ_t + Σ_{i=1}^{h̃} λ_i^{1/4} M_i Ỹ_{t:t−m̃} ϕ_i .
//! ```
//!
//! The control is linear in `M`, which is learned by projected online
//! gradient descent on the memoryless loss.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::lds::{CostFunction, SystemModel};
use crate::memoryless::{self, FeatureHistory, ParamTensor};
use crate::signals::{ConvMode, NatureState, StreamConvolver};
use crate::spectral::SpectralBasis;

/// Learnable tensor and the two filter banks.
///
/// `tensor` has `h̃ + 1` slices of shape `n × (h+2)p`. The lifting bank has
/// window `m + 1` and `h + 1` filters (indexed from 0); the learning bank has
/// window `m̃ + 1` and `h̃` filters (indexed from 1 in the formulas, stored
/// from 0).
#[derive(Debug, Clone)]
pub struct DscParams {
    pub tensor: ParamTensor,
    pub h: usize,
    pub h_tilde: usize,
    pub m: usize,
    pub m_tilde: usize,
    pub lifting: SpectralBasis,
    pub learning: SpectralBasis,
    pub eta: f64,
}

impl DscParams {
    /// Zero-initialized parameters with freshly computed filter banks.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h: usize,
        h_tilde: usize,
        m: usize,
        m_tilde: usize,
        gamma: f64,
        n: usize,
        p: usize,
        eta: f64,
    ) -> Result<Self> {
        if h + 1 > m + 1 {
            return Err(Error::Parameter(format!(
                "lifting bank needs h + 1 <= m + 1 (h = {h}, m = {m})"
            )));
        }
        if h_tilde == 0 || h_tilde > m_tilde + 1 {
            return Err(Error::Parameter(format!(
                "learning bank needs 1 <= h̃ <= m̃ + 1 (h̃ = {h_tilde}, m̃ = {m_tilde})"
            )));
        }
        if n == 0 || p == 0 {
            return Err(Error::Parameter("control and observation dimensions must be positive".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Parameter(format!("step size must be finite and nonnegative, got {eta}")));
        }
        let lifting = SpectralBasis::compute(m + 1, h + 1, gamma)?;
        let learning = SpectralBasis::compute(m_tilde + 1, h_tilde, gamma)?;
        Ok(DscParams {
            tensor: ParamTensor::zeros(h_tilde + 1, n, (h + 2) * p),
            h,
            h_tilde,
            m,
            m_tilde,
            lifting,
            learning,
            eta,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.tensor.shape().2 / (self.h + 2)
    }

    pub fn control_dim(&self) -> usize {
        self.tensor.shape().1
    }

    /// Length of a lifted observation, `(h+2)p`.
    pub fn lifted_dim(&self) -> usize {
        self.tensor.shape().2
    }
}

/// Spectral lifting of a `p × (m+1)` window of natural observations, newest first.
pub fn lift(window: &DMatrix<f64>, basis: &SpectralBasis) -> Result<DVector<f64>> {
    if window.ncols() != basis.window() {
        return Err(Error::dims("lift window", basis.window(), window.ncols()));
    }
    let p = window.nrows();
    let mut out = DVector::zeros((basis.count() + 1) * p);
    out.rows_mut(0, p).copy_from(&window.column(0));
    for j in 0..basis.count() {
        let proj = window * basis.filter(j) * basis.weight(j);
        out.rows_mut((j + 1) * p, p).copy_from(&proj);
    }
    Ok(out)
}

/// The most recent `m̃ + 1` lifted observations, zero before the start.
#[derive(Debug, Clone)]
pub struct LiftedState {
    dim: usize,
    capacity: usize,
    entries: VecDeque<DVector<f64>>,
}

impl LiftedState {
    pub fn new(dim: usize, m_tilde: usize) -> Self {
        LiftedState {
            dim,
            capacity: m_tilde + 1,
            entries: VecDeque::with_capacity(m_tilde + 1),
        }
    }

    pub fn push(&mut self, lifted: DVector<f64>) -> Result<()> {
        if lifted.len() != self.dim {
            return Err(Error::dims("lifted observation", self.dim, lifted.len()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_back();
        }
        self.entries.push_front(lifted);
        Ok(())
    }

    /// `(h+2)p × (m̃+1)` matrix `Ỹ_{t:t−m̃}`.
    pub fn window(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.capacity);
        for (k, v) in self.entries.iter().enumerate() {
            out.set_column(k, v);
        }
        out
    }
}

/// Features `[ỹ_t, λ_1^{1/4} Ỹ ϕ_1, …, λ_h̃^{1/4} Ỹ ϕ_h̃]` multiplying `M_0, …, M_h̃`.
pub fn learning_features(lifted_window: &DMatrix<f64>, basis: &SpectralBasis) -> Result<Vec<DVector<f64>>> {
    if lifted_window.ncols() != basis.window() {
        return Err(Error::dims("learning window", basis.window(), lifted_window.ncols()));
    }
    let mut out = Vec::with_capacity(basis.count() + 1);
    out.push(lifted_window.column(0).into_owned());
    for i in 0..basis.count() {
        out.push(lifted_window * basis.filter(i) * basis.weight(i));
    }
    Ok(out)
}

/// `u_t` from the current lifted history.
pub fn control(params: &DscParams, lifted: &LiftedState) -> Result<DVector<f64>> {
    if lifted.dim != params.lifted_dim() || lifted.capacity != params.m_tilde + 1 {
        return Err(Error::dims(
            "lifted state",
            format!("{}x{}", params.lifted_dim(), params.m_tilde + 1),
            format!("{}x{}", lifted.dim, lifted.capacity),
        ));
    }
    let feats = learning_features(&lifted.window(), &params.learning)?;
    params.tensor.apply(&feats)
}

fn window_at(y_nat: &[DVector<f64>], s: isize, len: usize, p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, len);
    for k in 0..len {
        let idx = s - k as isize;
        if idx >= 0 {
            out.set_column(k, &y_nat[idx as usize]);
        }
    }
    out
}

/// Features at step `s` computed directly from the natural observations
/// `y_nat[0..=s]`; all zero for `s < 0`.
pub fn features_at(params: &DscParams, y_nat: &[DVector<f64>], s: isize) -> Result<Vec<DVector<f64>>> {
    let p = params.obs_dim();
    if s < 0 {
        return Ok(vec![DVector::zeros(params.lifted_dim()); params.h_tilde + 1]);
    }
    if let Some(bad) = y_nat.iter().find(|v| v.len() != p) {
        return Err(Error::dims("natural observation", p, bad.len()));
    }
    let mut lifted = DMatrix::zeros(params.lifted_dim(), params.m_tilde + 1);
    for j in 0..=params.m_tilde {
        let w = window_at(y_nat, s - j as isize, params.m + 1, p);
        lifted.set_column(j, &lift(&w, &params.lifting)?);
    }
    learning_features(&lifted, &params.learning)
}

fn history_from_observations(params: &DscParams, y_nat: &[DVector<f64>], lookback: usize) -> Result<FeatureHistory> {
    if y_nat.is_empty() {
        return Err(Error::Parameter("natural observation history is empty".into()));
    }
    let t = y_nat.len() as isize - 1;
    let mut history = FeatureHistory::new(lookback);
    let start = (t - lookback as isize).max(0);
    for s in start..=t {
        history.push(features_at(params, y_nat, s)?);
    }
    Ok(history)
}

/// `(y_t(M), u_t(M))` for `t = y_nat.len() − 1`, with the counterfactual
/// observation truncated to the last `truncation` controls.
pub fn counterfactual_outputs(
    params: &DscParams,
    y_nat: &[DVector<f64>],
    model: &SystemModel,
    truncation: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if truncation == 0 {
        return Err(Error::Parameter("truncation must be at least 1".into()));
    }
    let history = history_from_observations(params, y_nat, truncation)?;
    let markov = model.markov_parameters(truncation);
    memoryless::counterfactual(&params.tensor, &history, y_nat.last().unwrap(), &markov)
}

/// `ℓ_t(M)` for `t = y_nat.len() − 1`.
pub fn memoryless_loss(
    params: &DscParams,
    y_nat: &[DVector<f64>],
    model: &SystemModel,
    cost: &CostFunction,
    truncation: usize,
) -> Result<f64> {
    let (y, u) = counterfactual_outputs(params, y_nat, model, truncation)?;
    Ok(cost.evaluate(&y, &u)?.value)
}

/// `∇_M ℓ_t(M)` for `t = y_nat.len() − 1`.
pub fn loss_gradient(
    params: &DscParams,
    y_nat: &[DVector<f64>],
    model: &SystemModel,
    cost: &CostFunction,
    truncation: usize,
) -> Result<ParamTensor> {
    if truncation == 0 {
        return Err(Error::Parameter("truncation must be at least 1".into()));
    }
    let history = history_from_observations(params, y_nat, truncation)?;
    let markov = model.markov_parameters(truncation);
    let lg = memoryless::memoryless_gradient(&params.tensor, &history, y_nat.last().unwrap(), &markov, cost)?;
    Ok(lg.grad)
}

/// Trajectory bound `R` and parameter bound `R_M` of the constraint set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSet {
    pub r: f64,
    pub r_m: f64,
}

impl ConstraintSet {
    pub fn new(r: f64, r_m: f64) -> Result<Self> {
        if !(r > 0.0 && r_m > 0.0) {
            return Err(Error::Parameter(format!("constraint radii must be positive, got R={r}, R_M={r_m}")));
        }
        Ok(ConstraintSet { r, r_m })
    }

    /// Radii from the system constants and filter counts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_constants(
        kappa: f64,
        kappa_b: f64,
        kappa_c: f64,
        w: f64,
        h: usize,
        h_tilde: usize,
        gamma: f64,
    ) -> Result<Self> {
        let (h, ht) = (h as f64, h_tilde as f64);
        let log_term = (2.0 / gamma).ln();
        let r = 4096.0 * kappa.powi(24) * kappa_b * kappa_c.powi(2) * w * h.powi(4) / gamma.powi(4)
            * log_term.sqrt();
        let r_m = 128.0 * kappa.powi(16) * kappa_b * kappa_c * (h.powi(5) * ht).sqrt() / gamma.powf(2.5)
            * log_term.powf(0.25);
        Self::new(r, r_m)
    }

    pub fn for_model(model: &SystemModel, h: usize, h_tilde: usize) -> Result<Self> {
        Self::from_constants(
            model.kappa,
            model.kappa_b,
            model.kappa_c,
            model.w_bound,
            h,
            h_tilde,
            model.gamma,
        )
    }
}

/// Projection onto `{‖M‖_F ≤ R_M}`.
pub fn project(m: &mut ParamTensor, cs: &ConstraintSet) {
    memoryless::project(m, cs.r_m);
}

/// `M ← Π[M − η ∇]`.
pub fn ogd_step(params: &mut DscParams, gradient: &ParamTensor, cs: &ConstraintSet) -> Result<()> {
    memoryless::ogd_step(&mut params.tensor, gradient, params.eta, cs.r_m)
}

/// Hyperparameters prescribed by the regret bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub m: usize,
    pub h: usize,
    pub m_tilde: usize,
    pub h_tilde: usize,
    pub eta: f64,
    pub constraints: ConstraintSet,
}

/// Inputs to [`schedule_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleInputs {
    pub horizon: usize,
    pub gamma: f64,
    pub kappa: f64,
    pub kappa_b: f64,
    pub kappa_c: f64,
    pub w: f64,
    pub g: f64,
    pub d: usize,
    /// The unspecified absolute constant; 1 by default.
    pub c0: f64,
}

const MAX_SCHEDULE_VALUE: f64 = 4_294_967_296.0;

fn ceil_checked(value: f64, name: &str, inputs: &ScheduleInputs) -> Result<usize> {
    if !value.is_finite() || value > MAX_SCHEDULE_VALUE {
        return Err(Error::Parameter(format!(
            "{name} overflows for T = {}, gamma = {}; use a smaller horizon or a larger gamma",
            inputs.horizon, inputs.gamma
        )));
    }
    let c = value.ceil();
    if c < 1.0 {
        return Err(Error::Parameter(format!("{name} evaluates to {value}, below 1")));
    }
    Ok(c as usize)
}

pub fn schedule_params(inputs: ScheduleInputs) -> Result<Schedule> {
    let ScheduleInputs {
        horizon,
        gamma,
        kappa,
        kappa_b,
        kappa_c,
        w,
        g,
        d,
        c0,
    } = inputs;
    if horizon < 2 {
        return Err(Error::Parameter("schedule needs a horizon of at least 2".into()));
    }
    if !(gamma > 0.0 && gamma <= 2.0 / 3.0) {
        return Err(Error::Parameter(format!("gamma must lie in (0, 2/3], got {gamma}")));
    }
    if [kappa, kappa_b, kappa_c, w, g].iter().any(|&c| !(c >= 1.0)) || d == 0 || !(c0 > 0.0) {
        return Err(Error::Parameter("bound constants must be at least 1".into()));
    }
    let t = horizon as f64;
    let d = d as f64;
    let log_t = t.ln();
    let log_g = (2.0 / gamma).ln();

    let c1 = c0 * g * kappa.powi(13) * kappa_b * kappa_c.powi(4) * w.powi(2);
    let c2 = c0 * g * kappa.powi(13) * kappa_b.powi(2) * kappa_c.powi(5) * w.powi(2) * d;
    let c3 = c0 * g * kappa.powi(56) * kappa_b.powi(3) * kappa_c.powi(5) * w.powi(2);
    let c4 = c3 * d;
    let c5 = 1024.0 * g * kappa.powi(12) * kappa_b * kappa_c.powi(3) * w.powi(2);

    let m = ceil_checked(
        (1.0 / gamma) * (c1 * t.powf(1.5) / gamma.powi(3)).ln(),
        "m",
        &inputs,
    )?;
    let h = ceil_checked(
        2.0 * log_t
            * (c2 * (m as f64).sqrt() / gamma.powi(2) * t.powf(1.5) * log_t * log_g.powf(0.25)).ln(),
        "h",
        &inputs,
    )?;
    let hf = h as f64;
    let m_tilde = ceil_checked(
        (1.0 / gamma) * (c3 * hf.powf(9.5) / gamma.powi(12) * t.sqrt() * log_g.powf(1.25)).ln(),
        "m_tilde",
        &inputs,
    )?;
    let h_tilde = ceil_checked(
        2.0 * log_t
            * (c4 * hf.powf(10.5) * (m_tilde as f64).sqrt() / gamma.powf(11.5)
                * t.sqrt()
                * log_t
                * log_g.powf(1.5))
            .ln(),
        "h_tilde",
        &inputs,
    )?;
    let eta = (1.0 / c5)
        * (gamma.powi(7) / (hf.powi(5) * h_tilde as f64 * m as f64 * m_tilde as f64)).sqrt();
    let constraints = ConstraintSet::from_constants(kappa, kappa_b, kappa_c, w, h, h_tilde, gamma)?;
    Ok(Schedule {
        m,
        h,
        m_tilde,
        h_tilde,
        eta,
        constraints,
    })
}

/// Counterfactual truncation `⌈(1/γ) log(κ² T)⌉`, at least 1.
pub fn default_truncation(gamma: f64, kappa: f64, horizon: usize) -> usize {
    let value = (1.0 / gamma) * (kappa * kappa * horizon.max(1) as f64).ln();
    (value.ceil() as usize).max(1)
}

/// Online double spectral controller.
pub struct DscController {
    name: String,
    model: SystemModel,
    cost: CostFunction,
    params: DscParams,
    constraints: ConstraintSet,
    markov: Vec<DMatrix<f64>>,
    nature: NatureState,
    lifting_conv: StreamConvolver,
    learning_conv: StreamConvolver,
    history: FeatureHistory,
    u_prev: DVector<f64>,
    t: usize,
    bound_exceedances: usize,
    last_loss: f64,
}

impl DscController {
    pub fn new(
        model: SystemModel,
        cost: CostFunction,
        params: DscParams,
        constraints: ConstraintSet,
        truncation: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        if params.obs_dim() != model.obs_dim() || params.control_dim() != model.control_dim() {
            return Err(Error::dims(
                "DSC parameters",
                format!("n={}, p={}", model.control_dim(), model.obs_dim()),
                format!("n={}, p={}", params.control_dim(), params.obs_dim()),
            ));
        }
        if truncation == 0 {
            return Err(Error::Parameter("truncation must be at least 1".into()));
        }
        let p = model.obs_dim();
        let lifting_conv = StreamConvolver::from_filters(p, params.lifting.filters(), mode)?;
        let learning_conv = StreamConvolver::from_filters(params.lifted_dim(), params.learning.filters(), mode)?;
        Ok(DscController {
            name: "DSC".into(),
            markov: model.markov_parameters(truncation),
            nature: NatureState::new(&model, params.m + 1),
            u_prev: DVector::zeros(model.control_dim()),
            model,
            cost,
            params,
            constraints,
            lifting_conv,
            learning_conv,
            history: FeatureHistory::new(truncation),
            t: 0,
            bound_exceedances: 0,
            last_loss: 0.0,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn params(&self) -> &DscParams {
        &self.params
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Steps at which the counterfactual trajectory left the `R` ball.
    /// Monitored only; the projection enforces `R_M` alone.
    pub fn bound_exceedances(&self) -> usize {
        self.bound_exceedances
    }

    /// `ℓ_t(M^t)` of the latest step.
    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    fn lifted_features(&mut self, y_nat: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let p = y_nat.len();
        let h = self.params.h;
        self.lifting_conv.push(y_nat)?;
        let mut lifted = DVector::zeros(self.params.lifted_dim());
        lifted.rows_mut(0, p).copy_from(y_nat);
        for j in 0..=h {
            let block = &mut lifted.as_mut_slice()[(j + 1) * p..(j + 2) * p];
            self.lifting_conv.query_into(j, block)?;
            let w = self.params.lifting.weight(j);
            block.iter_mut().for_each(|v| *v *= w);
        }

        self.learning_conv.push(&lifted)?;
        let mut feats = Vec::with_capacity(self.params.h_tilde + 1);
        for i in 0..self.params.h_tilde {
            let mut f = self.learning_conv.query(i)?;
            f *= self.params.learning.weight(i);
            feats.push(f);
        }
        feats.insert(0, lifted);
        Ok(feats)
    }
}

impl Controller for DscController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let y_nat = self.nature.update(self.t, &self.model, &self.u_prev, y)?;
        let feats = self.lifted_features(&y_nat)?;
        self.history.push(feats);

        let lg = memoryless::memoryless_gradient(&self.params.tensor, &self.history, &y_nat, &self.markov, &self.cost)?;
        if lg.y.norm() > self.constraints.r || lg.u.norm() > self.constraints.r {
            self.bound_exceedances += 1;
        }
        self.last_loss = lg.eval.value;
        let u = lg.u;
        ogd_step(&mut self.params, &lg.grad, &self.constraints)?;
        if !self.params.tensor.is_finite() {
            return Err(Error::NonFinite("DSC parameters"));
        }
        self.u_prev = u.clone();
        self.t += 1;
        Ok(u)
    }
}
