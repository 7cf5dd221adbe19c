//! Natural observations and streaming convolution.
//!
//! [`NatureState`] tracks `y_nat_t = y_t − C z_t` where `z` is driven only by
//! the learner's own controls. [`StreamConvolver`] evaluates
//! `Σ_k f_j[k] · x_{t−k}` for a bank of filters as vectors are pushed one at
//! a time, either directly or with an epoch-doubling FFT scheme whose
//! amortized cost per step is polylogarithmic in the stream length.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::lds::SystemModel;

/// Fictitious state `z` and a zero-padded history of natural observations.
#[derive(Debug, Clone)]
pub struct NatureState {
    z: DVector<f64>,
    history: VecDeque<DVector<f64>>,
    capacity: usize,
    obs_dim: usize,
    next_t: usize,
}

impl NatureState {
    /// `capacity` is the number of most recent `y_nat` vectors retained.
    pub fn new(model: &SystemModel, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        NatureState {
            z: DVector::zeros(model.state_dim()),
            history: VecDeque::with_capacity(capacity),
            capacity,
            obs_dim: model.obs_dim(),
            next_t: 0,
        }
    }

    /// Number of updates performed so far.
    pub fn steps(&self) -> usize {
        self.next_t
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    /// Round `t`: `z ← A z + B u_prev`, returns `y − C z` and records it.
    ///
    /// `u_prev` is the control applied at `t − 1` (zero at `t = 0`).
    pub fn update(
        &mut self,
        t: usize,
        model: &SystemModel,
        u_prev: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if t != self.next_t {
            return Err(Error::OutOfOrder {
                expected: self.next_t,
                actual: t,
            });
        }
        if u_prev.len() != model.control_dim() {
            return Err(Error::dims("nature control", model.control_dim(), u_prev.len()));
        }
        if y.len() != self.obs_dim {
            return Err(Error::dims("nature observation", self.obs_dim, y.len()));
        }
        if t > 0 {
            self.z = &model.a * &self.z + &model.b * u_prev;
        }
        let y_nat = y - &model.c * &self.z;
        if y_nat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("natural observation"));
        }
        if self.history.len() == self.capacity {
            self.history.pop_back();
        }
        self.history.push_front(y_nat.clone());
        self.next_t += 1;
        Ok(y_nat)
    }

    /// `y_nat_{t−lag}` for the latest `t`; zero before the start or beyond capacity.
    pub fn lagged(&self, lag: usize) -> DVector<f64> {
        self.history
            .get(lag)
            .cloned()
            .unwrap_or_else(|| DVector::zeros(self.obs_dim))
    }

    /// `p × len` matrix of the latest `len` natural observations, newest first.
    pub fn window(&self, len: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.obs_dim, len);
        for (k, v) in self.history.iter().take(len).enumerate() {
            out.set_column(k, v);
        }
        out
    }
}

/// Which evaluation path a [`StreamConvolver`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    #[default]
    Fast,
    Naive,
}

/// Per-level FFT plan and filter spectra for one epoch size.
struct Level {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// One spectrum per filter, taps `[0, size)`.
    spectra: Vec<Vec<Complex<f64>>>,
}

/// Streaming multi-channel convolution against a fixed filter bank.
///
/// After the `t`-th push, `query(j)` returns `Σ_{k=0}^{min(t, L−1)} f_j[k] · x_{t−k}`.
///
/// The fast path splits every (input, output) pair with lag ≥ 1 by the time
/// `τ` of largest 2-adic valuation in `[s + 1, t']` (1-based): right after
/// input `τ` arrives, the block of the last `2^k` inputs is convolved by FFT
/// into the next `2^k` outputs, where `2^k` divides `τ`. Lag 0 is applied at
/// query time. Blocks are clipped to the filter support, so short filters
/// never trigger transforms longer than twice their length.
pub struct StreamConvolver {
    dim: usize,
    filters: Vec<Vec<f64>>,
    max_len: usize,
    mode: ConvMode,
    inputs: Vec<f64>,
    len: usize,
    /// `pending[j][t * dim + c]`: contributions of inputs older than `t`.
    pending: Vec<Vec<f64>>,
    levels: Vec<Option<Level>>,
    planner: FftPlanner<f64>,
    scratch_in: Vec<Vec<Complex<f64>>>,
    scratch_out: Vec<Complex<f64>>,
}

impl std::fmt::Debug for StreamConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamConvolver")
            .field("dim", &self.dim)
            .field("filters", &self.filters.len())
            .field("mode", &self.mode)
            .field("len", &self.len)
            .finish()
    }
}

impl Clone for StreamConvolver {
    fn clone(&self) -> Self {
        let mut out = StreamConvolver::new(self.dim, self.filters.clone(), self.mode)
            .expect("validated at construction");
        out.inputs = self.inputs.clone();
        out.len = self.len;
        out.pending = self.pending.clone();
        out
    }
}

impl StreamConvolver {
    pub fn new(dim: usize, filters: Vec<Vec<f64>>, mode: ConvMode) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("stream dimension must be positive".into()));
        }
        if filters.is_empty() || filters.iter().any(|f| f.is_empty()) {
            return Err(Error::Parameter("filter bank must hold nonempty filters".into()));
        }
        let max_len = filters.iter().map(Vec::len).max().unwrap_or(0);
        let count = filters.len();
        Ok(StreamConvolver {
            dim,
            filters,
            max_len,
            mode,
            inputs: Vec::new(),
            len: 0,
            pending: vec![Vec::new(); count],
            levels: Vec::new(),
            planner: FftPlanner::new(),
            scratch_in: Vec::new(),
            scratch_out: Vec::new(),
        })
    }

    /// Convenience constructor from a bank of filter vectors.
    pub fn from_filters(dim: usize, filters: &[DVector<f64>], mode: ConvMode) -> Result<Self> {
        Self::new(dim, filters.iter().map(|f| f.as_slice().to_vec()).collect(), mode)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    /// Number of vectors pushed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, v: &DVector<f64>) -> Result<()> {
        self.push_slice(v.as_slice())
    }

    pub fn push_slice(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dims("stream input", self.dim, v.len()));
        }
        self.inputs.extend_from_slice(v);
        self.len += 1;
        if self.mode == ConvMode::Fast {
            self.fill_future();
        }
        Ok(())
    }

    /// Output for the latest pushed input and filter `j`.
    pub fn query(&self, j: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.query_into(j, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn query_into(&self, j: usize, out: &mut [f64]) -> Result<()> {
        if j >= self.filters.len() {
            return Err(Error::Parameter(format!(
                "filter index {j} out of range for a bank of {}",
                self.filters.len()
            )));
        }
        if self.len == 0 {
            return Err(Error::Parameter("query before any push".into()));
        }
        if out.len() != self.dim {
            return Err(Error::dims("query output", self.dim, out.len()));
        }
        let t = self.len - 1;
        let filter = &self.filters[j];
        let dim = self.dim;
        match self.mode {
            ConvMode::Naive => {
                out.fill(0.0);
                for (k, &f) in filter.iter().enumerate().take(t + 1) {
                    let x = &self.inputs[(t - k) * dim..(t - k + 1) * dim];
                    for (o, xv) in out.iter_mut().zip(x) {
                        *o += f * xv;
                    }
                }
            }
            ConvMode::Fast => {
                let pending = &self.pending[j];
                let x = &self.inputs[t * dim..(t + 1) * dim];
                for c in 0..dim {
                    let carried = pending.get(t * dim + c).copied().unwrap_or(0.0);
                    out[c] = carried + filter[0] * x[c];
                }
            }
        }
        Ok(())
    }

    fn level(&mut self, k: usize) -> &Level {
        if self.levels.len() <= k {
            self.levels.resize_with(k + 1, || None);
        }
        if self.levels[k].is_none() {
            let size = 2usize << k;
            let forward = self.planner.plan_fft_forward(size);
            let inverse = self.planner.plan_fft_inverse(size);
            let spectra = self
                .filters
                .iter()
                .map(|f| {
                    let mut buf: Vec<Complex<f64>> = (0..size)
                        .map(|i| Complex::new(f.get(i).copied().unwrap_or(0.0), 0.0))
                        .collect();
                    forward.process(&mut buf);
                    buf
                })
                .collect();
            self.levels[k] = Some(Level {
                size,
                forward,
                inverse,
                spectra,
            });
        }
        self.levels[k].as_ref().unwrap()
    }

    /// Convolves the latest block of inputs into the pending outputs.
    fn fill_future(&mut self) {
        let tau = self.len;
        // Inputs older than L−1 steps, or outputs further than L−1 steps
        // ahead, have no tap in common, so the block is clipped to the
        // smallest power of two covering L−1.
        if self.max_len < 2 {
            return;
        }
        let cap = (self.max_len - 1).next_power_of_two();
        let block = (1usize << tau.trailing_zeros()).min(cap);
        let k = block.trailing_zeros() as usize;
        let dim = self.dim;
        let count = self.filters.len();
        let t = tau - 1;
        let first_input = tau - block;

        let needed = (t + block + 1) * dim;
        for p in &mut self.pending {
            if p.len() < needed {
                p.resize(needed, 0.0);
            }
        }

        let mut scratch_in = std::mem::take(&mut self.scratch_in);
        let mut scratch_out = std::mem::take(&mut self.scratch_out);
        let level = self.level(k);
        let size = level.size;
        let forward = Arc::clone(&level.forward);
        let inverse = Arc::clone(&level.inverse);

        scratch_in.resize_with(dim, Vec::new);
        for (c, buf) in scratch_in.iter_mut().enumerate() {
            buf.clear();
            buf.resize(size, Complex::new(0.0, 0.0));
            for a in 0..block {
                buf[a].re = self.inputs[(first_input + a) * dim + c];
            }
            forward.process(buf);
        }

        let scale = 1.0 / size as f64;
        let levels = &self.levels;
        let spectra = &levels[k].as_ref().unwrap().spectra;
        for j in 0..count {
            let spectrum = &spectra[j];
            let pending = &mut self.pending[j];
            for (c, buf) in scratch_in.iter().enumerate() {
                scratch_out.clear();
                scratch_out.extend(buf.iter().zip(spectrum).map(|(x, f)| x * f));
                inverse.process(&mut scratch_out);
                // Circular indices [block, 2·block) are free of wrap-around.
                for n in block..2 * block {
                    let out_t = first_input + n;
                    pending[out_t * dim + c] += scratch_out[n].re * scale;
                }
            }
        }
        self.scratch_in = scratch_in;
        self.scratch_out = scratch_out;
    }
}
