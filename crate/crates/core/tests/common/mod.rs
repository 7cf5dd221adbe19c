#![allow(dead_code)]

use dsc_core::dsc::DscParams;
use dsc_core::lds::{random_system, SystemModel};
use dsc_core::memoryless::ParamTensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn randomize(tensor: &mut ParamTensor, rng: &mut ChaCha8Rng, scale: f64) {
    for s in tensor.slices_mut() {
        s.iter_mut().for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Small random problem: a system plus DSC parameters with random `M`.
pub struct Instance {
    pub model: SystemModel,
    pub params: DscParams,
}

pub fn small_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(1..=4);
    let p = rng.random_range(1..=3);
    let n = rng.random_range(1..=2);
    let rho = rng.random_range(0.3..0.9);
    let model = random_system(d, n, p, rho, rng).unwrap();
    let m = rng.random_range(0..=6);
    let h = rng.random_range(0..=m.min(3));
    let m_tilde = rng.random_range(0..=6);
    let h_tilde = rng.random_range(1..=(m_tilde + 1).min(3));
    let mut params = DscParams::new(h, h_tilde, m, m_tilde, model.gamma, n, p, 0.0).unwrap();
    randomize(&mut params.tensor, rng, 0.5);
    Instance { model, params }
}

/// `u_t` expanded term by term from the raw filters and `n × p` blocks of `M`.
pub fn quadruple_sum(params: &DscParams, y_nat: &[DVector<f64>], t: usize) -> DVector<f64> {
    let p = params.obs_dim();
    let n = params.control_dim();
    let y = |s: isize| -> DVector<f64> {
        if s >= 0 {
            y_nat[s as usize].clone()
        } else {
            DVector::zeros(p)
        }
    };
    let block = |i: usize, b: usize| -> DMatrix<f64> { params.tensor.slices()[i].columns(b * p, p).into_owned() };
    let sigma = params.lifting.eigenvalues();
    let lambda = params.learning.eigenvalues();
    let phi = params.lifting.filters();
    let varphi = params.learning.filters();
    let t = t as isize;

    let mut u = block(0, 0) * y(t);
    for l in 0..=params.h {
        for k in 0..=params.m {
            u += block(0, l + 1) * y(t - k as isize) * (sigma[l].powf(0.25) * phi[l][k]);
        }
    }
    for i in 1..=params.h_tilde {
        for j in 0..=params.m_tilde {
            u += block(i, 0) * y(t - j as isize) * (lambda[i - 1].powf(0.25) * varphi[i - 1][j]);
        }
    }
    for i in 1..=params.h_tilde {
        for j in 0..=params.m_tilde {
            for l in 0..=params.h {
                for k in 0..=params.m {
                    let w = (sigma[l] * lambda[i - 1]).powf(0.25) * phi[l][k] * varphi[i - 1][j];
                    u += block(i, l + 1) * y(t - (j + k) as isize) * w;
                }
            }
        }
    }
    assert_eq!(u.len(), n);
    u
}

/// `z ← Az + Bu_prev`, `y_nat = y − Cz`, written out independently of the library tracker.
pub struct ReferenceTracker {
    z: DVector<f64>,
    started: bool,
}

impl ReferenceTracker {
    pub fn new(d: usize) -> Self {
        ReferenceTracker {
            z: DVector::zeros(d),
            started: false,
        }
    }

    pub fn update(&mut self, model: &SystemModel, u_prev: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        if self.started {
            self.z = &model.a * &self.z + &model.b * u_prev;
        }
        self.started = true;
        y - &model.c * &self.z
    }
}

/// Observations of the uncontrolled system driven by `ws` from `x0`.
pub fn zero_control_replay(model: &SystemModel, x0: &DVector<f64>, ws: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(ws.len());
    for w in ws {
        out.push(&model.c * &x);
        x = &model.a * &x + w;
    }
    out
}

/// Central differences of `f` over every coordinate of `at`.
pub fn finite_difference(at: &ParamTensor, step: f64, f: impl Fn(&ParamTensor) -> f64) -> ParamTensor {
    let (count, rows, cols) = at.shape();
    let mut grad = ParamTensor::zeros(count, rows, cols);
    for s in 0..count {
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = at.clone();
                plus.slices_mut()[s][(r, c)] += step;
                let mut minus = at.clone();
                minus.slices_mut()[s][(r, c)] -= step;
                grad.slices_mut()[s][(r, c)] = (f(&plus) - f(&minus)) / (2.0 * step);
            }
        }
    }
    grad
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute difference when `b` vanishes.
pub fn relative_error(a: &ParamTensor, b: &ParamTensor) -> f64 {
    let mut diff = a.clone();
    diff.axpy(-1.0, b).unwrap();
    let scale = b.frobenius_norm();
    if scale == 0.0 {
        diff.frobenius_norm()
    } else {
        diff.frobenius_norm() / scale
    }
}

/// Random symmetric positive semidefinite matrix `LLᵀ`.
pub fn random_psd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let l = gaussian_mat(rng, dim, dim, 1.0);
    &l * l.transpose()
}
