//! Memoryless losses of linear-in-parameter policies and projected OGD.
//!
//! Both learned controllers play `u_t(M) = Σ_i M_i f_i(t)` where the feature
//! vectors `f_i(t)` are built from natural observations only, so they do
//! not depend on `M`. The counterfactual observation is
//! `y_t(M) = y_nat_t + Σ_{q=1}^{L} G_q u_{t−q}(M)` with Markov parameters
//! `G_q = C A^{q−1} B`, and `ℓ_t(M) = c(y_t(M), u_t(M))` is convex in `M`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::{CostEval, CostFunction};

/// A stack of equally shaped `n × F` parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    slices: Vec<DMatrix<f64>>,
}

impl ParamTensor {
    pub fn zeros(count: usize, rows: usize, cols: usize) -> Self {
        ParamTensor {
            slices: vec![DMatrix::zeros(rows, cols); count],
        }
    }

    pub fn from_slices(slices: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Parameter("parameter tensor needs at least one slice".into()));
        };
        let shape = first.shape();
        if let Some(bad) = slices.iter().find(|s| s.shape() != shape) {
            return Err(Error::dims("parameter slice", format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        Ok(ParamTensor { slices })
    }

    pub fn slices(&self) -> &[DMatrix<f64>] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// `(slices, rows, cols)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (r, c) = self.slices[0].shape();
        (self.slices.len(), r, c)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let largest = self
            .slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if largest == 0.0 || !largest.is_finite() {
            return largest;
        }
        // Scaled so that squaring cannot overflow or underflow.
        let sum: f64 = self
            .slices
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| (v / largest).powi(2))
            .sum();
        largest * sum.sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in &mut self.slices {
            *s *= alpha;
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "parameter update",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (s, o) in self.slices.iter_mut().zip(&other.slices) {
            *s += o * alpha;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `Σ_i M_i f_i`.
    pub fn apply(&self, features: &[DVector<f64>]) -> Result<DVector<f64>> {
        if features.len() != self.slices.len() {
            return Err(Error::dims("feature count", self.slices.len(), features.len()));
        }
        let (_, rows, cols) = self.shape();
        let mut u = DVector::zeros(rows);
        for (m, f) in self.slices.iter().zip(features) {
            if f.len() != cols {
                return Err(Error::dims("feature length", cols, f.len()));
            }
            u.gemv(1.0, m, f, 1.0);
        }
        Ok(u)
    }
}

/// Radial projection onto the Frobenius ball of the given radius.
pub fn project(params: &mut ParamTensor, radius: f64) {
    let norm = params.frobenius_norm();
    if norm > radius {
        params.scale(radius / norm);
    }
}

/// `M ← Π[M − η ∇]` onto the Frobenius ball of `radius`.
pub fn ogd_step(params: &mut ParamTensor, gradient: &ParamTensor, eta: f64, radius: f64) -> Result<()> {
    params.axpy(-eta, gradient)?;
    project(params, radius);
    Ok(())
}

/// Feature sets of the most recent steps, newest first.
#[derive(Debug, Clone)]
pub struct FeatureHistory {
    capacity: usize,
    entries: VecDeque<Vec<DVector<f64>>>,
}

impl FeatureHistory {
    /// Keeps the current step plus `lookback` past steps.
    pub fn new(lookback: usize) -> Self {
        FeatureHistory {
            capacity: lookback + 1,
            entries: VecDeque::with_capacity(lookback + 1),
        }
    }

    pub fn push(&mut self, features: Vec<DVector<f64>>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_back();
        }
        self.entries.push_front(features);
    }

    /// Features at `t − lag`; `None` before the start of the stream.
    pub fn get(&self, lag: usize) -> Option<&[DVector<f64>]> {
        self.entries.get(lag).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Counterfactual `(y_t(M), u_t(M))` truncated to `markov.len()` past controls.
pub fn counterfactual(
    params: &ParamTensor,
    history: &FeatureHistory,
    y_nat: &DVector<f64>,
    markov: &[DMatrix<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let current = history
        .get(0)
        .ok_or_else(|| Error::Parameter("feature history is empty".into()))?;
    let u = params.apply(current)?;
    let mut y = y_nat.clone();
    for (q, g) in markov.iter().enumerate() {
        let Some(past) = history.get(q + 1) else { break };
        let u_past = params.apply(past)?;
        y.gemv(1.0, g, &u_past, 1.0);
    }
    Ok((y, u))
}

/// `ℓ_t(M)` together with its cost evaluation.
pub fn memoryless_loss(
    params: &ParamTensor,
    history: &FeatureHistory,
    y_nat: &DVector<f64>,
    markov: &[DMatrix<f64>],
    cost: &CostFunction,
) -> Result<CostEval> {
    let (y, u) = counterfactual(params, history, y_nat, markov)?;
    cost.evaluate(&y, &u)
}

/// Counterfactual outputs, loss and gradient at the current parameters.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub eval: CostEval,
    pub grad: ParamTensor,
}

/// Exact gradient of `ℓ_t` with respect to every slice of `M`:
/// `∇M_i = ∇_u c · f_i(t)ᵀ + Σ_q (G_qᵀ ∇_y c) · f_i(t−q)ᵀ`.
pub fn memoryless_gradient(
    params: &ParamTensor,
    history: &FeatureHistory,
    y_nat: &DVector<f64>,
    markov: &[DMatrix<f64>],
    cost: &CostFunction,
) -> Result<LossGradient> {
    let (y, u) = counterfactual(params, history, y_nat, markov)?;
    let eval = cost.evaluate(&y, &u)?;
    if eval
        .grad_y
        .iter()
        .chain(eval.grad_u.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("cost gradient"));
    }
    let (count, rows, cols) = params.shape();
    let mut grad = ParamTensor::zeros(count, rows, cols);
    let current = history.get(0).expect("checked by counterfactual");
    for (g, f) in grad.slices.iter_mut().zip(current) {
        g.ger(1.0, &eval.grad_u, f, 1.0);
    }
    for (q, gq) in markov.iter().enumerate() {
        let Some(past) = history.get(q + 1) else { break };
        let back = gq.tr_mul(&eval.grad_y);
        for (g, f) in grad.slices.iter_mut().zip(past) {
            g.ger(1.0, &back, f, 1.0);
        }
    }
    Ok(LossGradient { y, u, eval, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(values: &[f64]) -> ParamTensor {
        ParamTensor::from_slices(vec![DMatrix::from_row_slice(1, values.len(), values)]).unwrap()
    }

    #[test]
    fn projection_cases() {
        let mut inside = tensor(&[3.0, 4.0]);
        project(&mut inside, 10.0);
        assert_eq!(inside, tensor(&[3.0, 4.0]));

        let mut outside = tensor(&[6.0, 8.0]);
        project(&mut outside, 5.0);
        assert!((outside.frobenius_norm() - 5.0).abs() < 1e-14);
        assert!((outside.slices()[0][(0, 0)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn projection_survives_huge_entries() {
        let mut m = tensor(&[3e200, 4e200]);
        assert!((m.frobenius_norm() / 5e200 - 1.0).abs() < 1e-15);
        project(&mut m, 1.0);
        assert!((m.frobenius_norm() - 1.0).abs() < 1e-14);
        assert!((m.slices()[0][(0, 1)] - 0.8).abs() < 1e-14);
        assert!((tensor(&[3e-200, 4e-200]).frobenius_norm() / 5e-200 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ogd_step_trivial_cases() {
        let start = tensor(&[1.0, -2.0]);
        let mut m = start.clone();
        ogd_step(&mut m, &tensor(&[0.0, 0.0]), 0.5, 10.0).unwrap();
        assert_eq!(m, start);
        ogd_step(&mut m, &tensor(&[7.0, 1.0]), 0.0, 10.0).unwrap();
        assert_eq!(m, start);
        assert!(ogd_step(&mut m, &ParamTensor::zeros(2, 1, 2), 0.1, 1.0).is_err());
    }

    #[test]
    fn apply_checks_shapes() {
        let m = ParamTensor::zeros(2, 3, 4);
        assert!(m.apply(&[DVector::zeros(4)]).is_err());
        assert!(m.apply(&[DVector::zeros(4), DVector::zeros(3)]).is_err());
        assert_eq!(m.apply(&[DVector::zeros(4), DVector::zeros(4)]).unwrap(), DVector::zeros(3));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_bounded(
            values in prop::collection::vec(-100.0f64..100.0, 1..20),
            radius in 0.1f64..50.0,
        ) {
            let mut once = tensor(&values);
            project(&mut once, radius);
            let mut twice = once.clone();
            project(&mut twice, radius);
            prop_assert!(once.frobenius_norm() <= radius * (1.0 + 1e-12));
            for (a, b) in once.slices()[0].iter().zip(twice.slices()[0].iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
