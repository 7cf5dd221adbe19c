//! GRC and LQG baselines.

use nalgebra::{DMatrix, DVector};

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::lds::{CostFunction, SystemModel};
use crate::memoryless::{self, FeatureHistory, ParamTensor};
use crate::signals::NatureState;

/// Disturbance-response taps `u_t = Σ_{i<m_g} M^{[i]} y_nat_{t−i}`.
#[derive(Debug, Clone)]
pub struct GrcParams {
    pub taps: ParamTensor,
    pub eta: f64,
    pub radius: f64,
}

impl GrcParams {
    pub fn new(memory: usize, n: usize, p: usize, eta: f64, radius: f64) -> Result<Self> {
        if memory == 0 || n == 0 || p == 0 {
            return Err(Error::Parameter("GRC memory and dimensions must be positive".into()));
        }
        if !(eta >= 0.0 && eta.is_finite() && radius > 0.0) {
            return Err(Error::Parameter(format!("invalid GRC step {eta} or radius {radius}")));
        }
        Ok(GrcParams {
            taps: ParamTensor::zeros(memory, n, p),
            eta,
            radius,
        })
    }

    pub fn memory(&self) -> usize {
        self.taps.len()
    }
}

/// `Σ_i M^{[i]} y_nat_{t−i}` with `y_nat` given oldest first, zero-padded.
pub fn grc_control(params: &GrcParams, y_nat: &[DVector<f64>]) -> Result<DVector<f64>> {
    params.taps.apply(&grc_features(params.memory(), params.taps.shape().2, y_nat, y_nat.len() as isize - 1))
}

fn grc_features(memory: usize, p: usize, y_nat: &[DVector<f64>], s: isize) -> Vec<DVector<f64>> {
    (0..memory)
        .map(|i| {
            let idx = s - i as isize;
            if idx >= 0 {
                y_nat[idx as usize].clone()
            } else {
                DVector::zeros(p)
            }
        })
        .collect()
}

/// Projected gradient step on the taps.
pub fn grc_step(params: &mut GrcParams, gradient: &ParamTensor) -> Result<()> {
    memoryless::ogd_step(&mut params.taps, gradient, params.eta, params.radius)
}

/// Gradient of the truncated memoryless loss of the GRC policy at
/// `t = y_nat.len() − 1`.
pub fn grc_loss_gradient(
    params: &GrcParams,
    y_nat: &[DVector<f64>],
    model: &SystemModel,
    cost: &CostFunction,
    truncation: usize,
) -> Result<ParamTensor> {
    if y_nat.is_empty() {
        return Err(Error::Parameter("natural observation history is empty".into()));
    }
    let t = y_nat.len() as isize - 1;
    let p = model.obs_dim();
    let mut history = FeatureHistory::new(truncation);
    for s in (t - truncation as isize).max(0)..=t {
        history.push(grc_features(params.memory(), p, y_nat, s));
    }
    let markov = model.markov_parameters(truncation);
    Ok(memoryless::memoryless_gradient(&params.taps, &history, y_nat.last().unwrap(), &markov, cost)?.grad)
}

/// Online GRC: natural-observation feedback learned by projected OGD on the
/// truncated memoryless loss.
pub struct GrcController {
    name: String,
    model: SystemModel,
    cost: CostFunction,
    params: GrcParams,
    markov: Vec<DMatrix<f64>>,
    nature: NatureState,
    history: FeatureHistory,
    u_prev: DVector<f64>,
    t: usize,
}

impl GrcController {
    pub fn new(model: SystemModel, cost: CostFunction, params: GrcParams, truncation: usize) -> Result<Self> {
        let (_, n, p) = params.taps.shape();
        if n != model.control_dim() || p != model.obs_dim() {
            return Err(Error::dims(
                "GRC taps",
                format!("{}x{}", model.control_dim(), model.obs_dim()),
                format!("{n}x{p}"),
            ));
        }
        if truncation == 0 {
            return Err(Error::Parameter("truncation must be at least 1".into()));
        }
        Ok(GrcController {
            name: "GRC".into(),
            markov: model.markov_parameters(truncation),
            nature: NatureState::new(&model, params.memory()),
            u_prev: DVector::zeros(n),
            model,
            cost,
            params,
            history: FeatureHistory::new(truncation),
            t: 0,
        })
    }

    pub fn params(&self) -> &GrcParams {
        &self.params
    }
}

impl Controller for GrcController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let y_nat = self.nature.update(self.t, &self.model, &self.u_prev, y)?;
        let feats = (0..self.params.memory()).map(|i| self.nature.lagged(i)).collect();
        self.history.push(feats);
        let lg = memoryless::memoryless_gradient(&self.params.taps, &self.history, &y_nat, &self.markov, &self.cost)?;
        grc_step(&mut self.params, &lg.grad)?;
        if !self.params.taps.is_finite() {
            return Err(Error::NonFinite("GRC parameters"));
        }
        self.u_prev = lg.u.clone();
        self.t += 1;
        Ok(lg.u)
    }
}

/// Fixed point of a discrete algebraic Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// `(R + BᵀPB)⁻¹ BᵀPA`.
    pub gain: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// One Riccati map application and the gain it implies.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("R + BᵀPB is not positive definite".into()))?;
    let gain = chol.solve(&(&bt_p * a));
    let next = q + a.transpose() * p * a - a.transpose() * bt_p.transpose() * &gain;
    // Symmetrize to keep roundoff from accumulating in the skew part.
    let next = (&next + next.transpose()) * 0.5;
    Ok((next, gain))
}

/// Solves `P = Q + Aᵀ(P − PB(R + BᵀPB)⁻¹BᵀP)A` by fixed-point iteration from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution> {
    let d = a.nrows();
    if !a.is_square() || b.nrows() != d || q.shape() != (d, d) || !r.is_square() || r.nrows() != b.ncols() {
        return Err(Error::dims(
            "solve_dare",
            format!("A {d}x{d}, B {d}xn, Q {d}x{d}, R nxn"),
            format!(
                "A {:?}, B {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                q.shape(),
                r.shape()
            ),
        ));
    }
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let (next, _) = riccati_map(a, b, q, r, &p)?;
        residual = (&next - &p).norm();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            let (_, gain) = riccati_map(a, b, q, r, &p)?;
            return Ok(DareSolution {
                p,
                gain,
                residual,
                iterations: iter,
            });
        }
    }
    Err(Error::Numerical(format!(
        "Riccati iteration did not converge in {max_iter} iterations (residual {residual:e})"
    )))
}

/// Cost and noise weights of the LQG baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgWeights {
    pub state_cost: DMatrix<f64>,
    pub control_cost: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
    pub measurement_cov: DMatrix<f64>,
}

impl LqgWeights {
    /// `Q = CᵀC + εI`, `R = I`, process covariance `σ² I`, measurement covariance `εI`.
    pub fn standard(model: &SystemModel, process_variance: f64, eps: f64) -> Self {
        let d = model.state_dim();
        LqgWeights {
            state_cost: model.c.transpose() * &model.c + DMatrix::identity(d, d) * eps,
            control_cost: DMatrix::identity(model.control_dim(), model.control_dim()),
            process_cov: DMatrix::identity(d, d) * process_variance.max(eps),
            measurement_cov: DMatrix::identity(model.obs_dim(), model.obs_dim()) * eps,
        }
    }
}

/// Controller and Kalman filter gains plus the running estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgSolution {
    pub p_control: DMatrix<f64>,
    pub k_gain: DMatrix<f64>,
    pub p_filter: DMatrix<f64>,
    /// `P Cᵀ (C P Cᵀ + V)⁻¹`, `d × p`.
    pub l_gain: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    u_prev: DVector<f64>,
}

impl LqgSolution {
    pub fn solve(model: &SystemModel, weights: &LqgWeights, tol: f64, max_iter: usize) -> Result<Self> {
        let control = solve_dare(&model.a, &model.b, &weights.state_cost, &weights.control_cost, tol, max_iter)?;
        let filter = solve_dare(
            &model.a.transpose(),
            &model.c.transpose(),
            &weights.process_cov,
            &weights.measurement_cov,
            tol,
            max_iter,
        )?;
        let p_f = filter.p;
        let innovation = &model.c * &p_f * model.c.transpose() + &weights.measurement_cov;
        let l_gain = innovation
            .cholesky()
            .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?
            .solve(&(&model.c * &p_f))
            .transpose();
        Ok(LqgSolution {
            p_control: control.p,
            k_gain: control.gain,
            p_filter: p_f,
            l_gain,
            x_hat: DVector::zeros(model.state_dim()),
            u_prev: DVector::zeros(model.control_dim()),
        })
    }
}

/// Predict with the previous control, correct with `y`, return `−K x̂`.
pub fn lqg_step(sol: &mut LqgSolution, model: &SystemModel, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != model.obs_dim() || sol.x_hat.len() != model.state_dim() {
        return Err(Error::dims("LQG observation", model.obs_dim(), y.len()));
    }
    let predicted = &model.a * &sol.x_hat + &model.b * &sol.u_prev;
    let innovation = y - &model.c * &predicted;
    sol.x_hat = predicted + &sol.l_gain * innovation;
    let u = -(&sol.k_gain * &sol.x_hat);
    sol.u_prev = u.clone();
    Ok(u)
}

pub struct LqgController {
    name: String,
    model: SystemModel,
    solution: LqgSolution,
}

impl LqgController {
    pub fn new(model: SystemModel, weights: &LqgWeights, tol: f64, max_iter: usize) -> Result<Self> {
        let solution = LqgSolution::solve(&model, weights, tol, max_iter)?;
        Ok(LqgController {
            name: "LQG".into(),
            model,
            solution,
        })
    }

    pub fn solution(&self) -> &LqgSolution {
        &self.solution
    }
}

impl Controller for LqgController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        lqg_step(&mut self.solution, &self.model, y)
    }
}
