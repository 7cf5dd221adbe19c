//! Partially observed linear dynamical systems.
//!
//! `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t`, plus the ReLU variant,
//! disturbance sources, convex costs and linear dynamical controllers (LDCs).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizon over which `‖A^i‖ ≤ κ(1-γ)^i` is measured when filling `κ`.
pub const POWER_SCAN_HORIZON: usize = 200;

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

fn ensure_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn ensure_len(v: &DVector<f64>, len: usize, what: &'static str) -> Result<()> {
    if v.len() == len {
        Ok(())
    } else {
        Err(Error::dims(what, len, v.len()))
    }
}

/// System matrices together with the bound constants of the regret analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub kappa: f64,
    pub kappa_b: f64,
    pub kappa_c: f64,
    /// Disturbance norm bound.
    pub w_bound: f64,
    /// Cost gradient constant.
    pub g: f64,
    pub gamma: f64,
}

impl SystemModel {
    /// Validates shapes and fills `κ`, `κ_B`, `κ_C` from measured norms.
    /// `W` and `G` default to 1; see [`SystemModel::with_bounds`].
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::dims("A", "square, nonempty", format!("{}x{}", d, a.ncols())));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(Error::dims("B rows", d, b.nrows()));
        }
        if c.ncols() != d || c.nrows() == 0 {
            return Err(Error::dims("C columns", d, c.ncols()));
        }
        if !(gamma > 0.0 && gamma <= 2.0 / 3.0) {
            return Err(Error::Parameter(format!("gamma must lie in (0, 2/3], got {gamma}")));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("system matrices"));
        }
        let kappa = measured_kappa(&a, gamma, POWER_SCAN_HORIZON);
        let kappa_b = spectral_norm(&b).max(1.0);
        let kappa_c = spectral_norm(&c).max(1.0);
        Ok(SystemModel {
            a,
            b,
            c,
            kappa,
            kappa_b,
            kappa_c,
            w_bound: 1.0,
            g: 1.0,
            gamma,
        })
    }

    pub fn with_bounds(mut self, w_bound: f64, g: f64) -> Result<Self> {
        if !(w_bound >= 1.0 && g >= 1.0) {
            return Err(Error::Parameter(format!(
                "W and G must be at least 1, got W={w_bound}, G={g}"
            )));
        }
        self.w_bound = w_bound;
        self.g = g;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `C A^{q-1} B` for `q = 1..=len`.
    pub fn markov_parameters(&self, len: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut power_b = self.b.clone();
        for _ in 0..len {
            out.push(&self.c * &power_b);
            power_b = &self.a * power_b;
        }
        out
    }

    /// Checks `‖A^i‖ ≤ κ(1-γ)^i` for `i ≤ horizon`, with a relative slack of 1e-9.
    pub fn power_bound_holds(&self, horizon: usize) -> bool {
        let decay = 1.0 - self.gamma;
        let mut power = DMatrix::identity(self.state_dim(), self.state_dim());
        for i in 0..=horizon {
            let bound = self.kappa * decay.powi(i as i32);
            if spectral_norm(&power) > bound * (1.0 + 1e-9) {
                return false;
            }
            power = &self.a * power;
        }
        true
    }
}

fn measured_kappa(a: &DMatrix<f64>, gamma: f64, horizon: usize) -> f64 {
    let decay = 1.0 - gamma;
    let mut kappa: f64 = 1.0;
    let mut power = DMatrix::identity(a.nrows(), a.nrows());
    for i in 1..=horizon {
        power = a * power;
        kappa = kappa.max(spectral_norm(&power) / decay.powi(i as i32));
    }
    kappa
}

/// Draws a diagonalizable system `A = V Λ V⁻¹` with spectral radius exactly
/// `spectral_radius` and standard-normal `B`, `C`.
///
/// `V = Q₁ diag(s) Q₂` with Haar-like orthogonal factors and `s ∈ [1, 2]`,
/// so `cond(V) ≤ 2`. The stability margin is `γ = min(1 - ρ, 2/3)`.
pub fn random_system<R: Rng + ?Sized>(
    d: usize,
    n: usize,
    p: usize,
    spectral_radius: f64,
    rng: &mut R,
) -> Result<SystemModel> {
    if d == 0 || n == 0 || p == 0 {
        return Err(Error::Parameter("system dimensions must be positive".into()));
    }
    if !(spectral_radius > 0.0 && spectral_radius < 1.0) {
        return Err(Error::Parameter(format!(
            "spectral radius must lie in (0, 1), got {spectral_radius}"
        )));
    }
    let mut normal = |rows: usize, cols: usize| -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let q1 = normal(d, d).qr().q();
    let q2 = normal(d, d).qr().q();
    let b = normal(d, n);
    let c = normal(p, d);

    let eigenvalues: Vec<f64> = (0..d)
        .map(|i| {
            if i == 0 {
                spectral_radius
            } else {
                spectral_radius * (1.0 - rng.random::<f64>())
            }
        })
        .collect();
    let scales: Vec<f64> = (0..d).map(|_| 1.0 + rng.random::<f64>()).collect();

    let s = DMatrix::from_diagonal(&DVector::from_vec(scales.clone()));
    let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(d, scales.iter().map(|x| 1.0 / x)));
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(eigenvalues));
    let v = &q1 * &s * &q2;
    let v_inv = q2.transpose() * s_inv * q1.transpose();
    let a = &v * lambda * v_inv;

    let gamma = (1.0 - spectral_radius).min(2.0 / 3.0);
    SystemModel::new(a, b, c, gamma)
}

/// State transition rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    #[default]
    Linear,
    /// `x' = ReLU(A x + B u) + w`.
    Relu,
}

/// Hidden state of a simulated system.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub x: DVector<f64>,
    pub t: usize,
}

impl SimState {
    pub fn zero(d: usize) -> Self {
        SimState {
            x: DVector::zeros(d),
            t: 0,
        }
    }

    pub fn from_state(x: DVector<f64>) -> Self {
        SimState { x, t: 0 }
    }

    /// `y_t = C x_t`.
    pub fn observe(&self, model: &SystemModel) -> DVector<f64> {
        &model.c * &self.x
    }

    /// Linear step. Returns the observation of the pre-update state.
    pub fn step(&mut self, model: &SystemModel, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.advance(Transition::Linear, model, u, w)
    }

    /// ReLU step. Returns the observation of the pre-update state.
    pub fn step_relu(&mut self, model: &SystemModel, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.advance(Transition::Relu, model, u, w)
    }

    pub fn advance(
        &mut self,
        transition: Transition,
        model: &SystemModel,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        ensure_len(&self.x, model.state_dim(), "state")?;
        ensure_len(u, model.control_dim(), "control")?;
        ensure_len(w, model.state_dim(), "disturbance")?;
        ensure_finite(u, "control")?;
        ensure_finite(w, "disturbance")?;
        let y = self.observe(model);
        let mut next = &model.a * &self.x + &model.b * u;
        if transition == Transition::Relu {
            next.apply(|v| *v = v.max(0.0));
        }
        next += w;
        ensure_finite(&next, "state")?;
        self.x = next;
        self.t += 1;
        Ok(y)
    }
}

/// Disturbance process description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// i.i.d. `N(0, std² I)`.
    Gaussian { std: f64 },
    /// Coordinate `i` is `amplitude · sin(2π·frequency·t + phase_i)`.
    Sinusoid {
        /// Defaults to `W/√d`.
        #[serde(default)]
        amplitude: Option<f64>,
        #[serde(default = "default_frequency")]
        frequency: f64,
        /// Defaults to `2π i / d`.
        #[serde(default)]
        phases: Option<Vec<f64>>,
    },
    /// Rows of a headerless CSV file, `d` columns each.
    Replay { path: PathBuf },
}

fn default_frequency() -> f64 {
    0.01
}

impl DisturbanceKind {
    /// Per-coordinate variance, as assumed by the LQG baseline.
    pub fn coordinate_variance(&self, d: usize, bound: f64) -> f64 {
        match self {
            DisturbanceKind::Gaussian { std } => std * std,
            DisturbanceKind::Sinusoid { amplitude, .. } => {
                let a = amplitude.unwrap_or(bound / (d as f64).sqrt());
                0.5 * a * a
            }
            DisturbanceKind::Replay { .. } => 1.0,
        }
    }
}

/// Emits `w_0, w_1, …` with `‖w_t‖ ≤ W`, rescaling samples that exceed the bound.
#[derive(Debug, Clone)]
pub struct DisturbanceSource {
    kind: DisturbanceKind,
    bound: f64,
    dim: usize,
    rng: ChaCha8Rng,
    replay: Vec<DVector<f64>>,
    t: usize,
}

impl DisturbanceSource {
    pub fn new(kind: DisturbanceKind, dim: usize, bound: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::Parameter(format!("disturbance bound must be positive, got {bound}")));
        }
        let replay = match &kind {
            DisturbanceKind::Gaussian { std } if !(*std >= 0.0) => {
                return Err(Error::Parameter(format!("gaussian std must be nonnegative, got {std}")));
            }
            DisturbanceKind::Sinusoid { phases: Some(p), .. } if p.len() != dim => {
                return Err(Error::dims("sinusoid phases", dim, p.len()));
            }
            DisturbanceKind::Replay { path } => read_replay(path, dim)?,
            _ => Vec::new(),
        };
        Ok(DisturbanceSource {
            kind,
            bound,
            dim,
            rng,
            replay,
            t: 0,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn next_disturbance(&mut self) -> Result<DVector<f64>> {
        let t = self.t;
        let mut w = match &self.kind {
            DisturbanceKind::Gaussian { std } => {
                let std = *std;
                let rng = &mut self.rng;
                DVector::from_fn(self.dim, |_, _| std * rng.sample::<f64, _>(StandardNormal))
            }
            DisturbanceKind::Sinusoid {
                amplitude,
                frequency,
                phases,
            } => {
                let d = self.dim as f64;
                let amp = amplitude.unwrap_or(self.bound / d.sqrt());
                DVector::from_fn(self.dim, |i, _| {
                    let phase = phases.as_ref().map_or(2.0 * PI * i as f64 / d, |p| p[i]);
                    amp * (2.0 * PI * frequency * t as f64 + phase).sin()
                })
            }
            DisturbanceKind::Replay { path } => self.replay.get(t).cloned().ok_or_else(|| {
                Error::Parameter(format!(
                    "replay file {} has only {} rows, step {t} requested",
                    path.display(),
                    self.replay.len()
                ))
            })?,
        };
        let norm = w.norm();
        if norm > self.bound {
            w *= self.bound / norm;
            // Rescaling can land one ulp above the bound.
            while w.norm() > self.bound {
                w *= 1.0 - f64::EPSILON;
            }
        }
        self.t += 1;
        Ok(w)
    }

    /// The next `len` disturbances.
    pub fn take(&mut self, len: usize) -> Result<Vec<DVector<f64>>> {
        (0..len).map(|_| self.next_disturbance()).collect()
    }
}

fn read_replay(path: &Path, dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if record.len() != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("row {line} has {} columns, expected {dim}", record.len()),
            });
        }
        let values = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("row {line}: {e}"),
            })?;
        rows.push(DVector::from_vec(values));
    }
    Ok(rows)
}

/// Value and gradients of a cost at `(y, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    pub grad_y: DVector<f64>,
    pub grad_u: DVector<f64>,
}

/// A convex cost supplied by value and gradient oracles.
pub trait CostOracle: Send + Sync {
    fn evaluate(&self, y: &DVector<f64>, u: &DVector<f64>) -> CostEval;
}

#[derive(Clone)]
pub enum CostFunction {
    /// `yᵀQy + uᵀRu` with PSD `Q`, `R`.
    Quadratic { q: DMatrix<f64>, r: DMatrix<f64> },
    Custom(Arc<dyn CostOracle>),
}

impl fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostFunction::Quadratic { q, r } => f
                .debug_struct("Quadratic")
                .field("q", q)
                .field("r", r)
                .finish(),
            CostFunction::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Parameter(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Parameter(format!("{name} must be symmetric")));
    }
    if m.nrows() > 0 {
        let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if min < -1e-12 * scale {
            return Err(Error::Parameter(format!(
                "{name} must be positive semidefinite (min eigenvalue {min})"
            )));
        }
    }
    Ok(())
}

impl CostFunction {
    pub fn quadratic(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_psd(&q, "Q")?;
        check_psd(&r, "R")?;
        Ok(CostFunction::Quadratic { q, r })
    }

    /// `Q = I_p`, `R = I_n`.
    pub fn identity(p: usize, n: usize) -> Self {
        CostFunction::Quadratic {
            q: DMatrix::identity(p, p),
            r: DMatrix::identity(n, n),
        }
    }

    pub fn custom(oracle: Arc<dyn CostOracle>) -> Self {
        CostFunction::Custom(oracle)
    }

    pub fn evaluate(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<CostEval> {
        match self {
            CostFunction::Quadratic { q, r } => {
                ensure_len(y, q.nrows(), "cost observation")?;
                ensure_len(u, r.nrows(), "cost control")?;
                let qy = q * y;
                let ru = r * u;
                Ok(CostEval {
                    value: y.dot(&qy) + u.dot(&ru),
                    grad_y: qy * 2.0,
                    grad_u: ru * 2.0,
                })
            }
            CostFunction::Custom(oracle) => Ok(oracle.evaluate(y, u)),
        }
    }
}

/// Linear dynamical controller `s_{t+1} = A_π s_t + B_π y_t`, `u_t = C_π s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdcPolicy {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub state: DVector<f64>,
}

impl LdcPolicy {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let s = a.nrows();
        if a.ncols() != s {
            return Err(Error::dims("A_pi", "square", format!("{}x{}", s, a.ncols())));
        }
        if b.nrows() != s {
            return Err(Error::dims("B_pi rows", s, b.nrows()));
        }
        if c.ncols() != s {
            return Err(Error::dims("C_pi columns", s, c.ncols()));
        }
        Ok(LdcPolicy {
            a,
            b,
            c,
            state: DVector::zeros(s),
        })
    }

    /// The zero policy with a one-dimensional internal state.
    pub fn zero(p: usize, n: usize) -> Self {
        LdcPolicy {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(1, p),
            c: DMatrix::zeros(n, 1),
            state: DVector::zeros(1),
        }
    }

    /// Builds `A_π = H diag(l) H⁻¹` and checks the (κ, γ)-diagonalizable
    /// stability conditions on the factors and on `B_π`, `C_π`.
    pub fn from_diagonalization(
        h: &DMatrix<f64>,
        diag: &DVector<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        kappa: f64,
        gamma: f64,
    ) -> Result<Self> {
        let h_inv = h
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Parameter("H_pi must be invertible".into()))?;
        if diag.iter().any(|&l| !(l > 0.0 && l <= 1.0 - gamma)) {
            return Err(Error::Parameter("diagonal factor must lie in (0, 1-gamma]".into()));
        }
        let checks = [
            ("H_pi", spectral_norm(h)),
            ("H_pi^-1", spectral_norm(&h_inv)),
            ("B_pi", spectral_norm(&b)),
            ("C_pi", spectral_norm(&c)),
        ];
        for (name, norm) in checks {
            if norm > kappa {
                return Err(Error::Parameter(format!("‖{name}‖ = {norm} exceeds kappa = {kappa}")));
            }
        }
        let a = h * DMatrix::from_diagonal(diag) * h_inv;
        Self::new(a, b, c)
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// Returns `C_π s_t` and advances the internal state with `y_t`.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len(y, self.b.ncols(), "LDC observation")?;
        let u = &self.c * &self.state;
        self.state = &self.a * &self.state + &self.b * y;
        Ok(u)
    }
}
