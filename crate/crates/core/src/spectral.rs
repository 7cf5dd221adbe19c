//! Hankel filter banks.
//!
//! The filters are the top eigenvectors of the positive semidefinite Hankel
//! matrix `H[i][j] = (1-γ)^(i+j-1) / (i+j-1)` (1-based indices). They do not
//! depend on the system, the costs or the disturbances, so a bank is computed
//! once per run (or loaded from a cache file) and shared read-only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"DSCB";
const EIGEN_EPS: f64 = f64::EPSILON;
const EIGEN_MAX_ITER: usize = 10_000;

/// Dense Hankel matrix of the filter construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    size: usize,
    gamma: f64,
    entries: DMatrix<f64>,
}

impl HankelMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Builds the `size × size` Hankel matrix for stability margin `gamma`.
pub fn build_hankel(size: usize, gamma: f64) -> Result<HankelMatrix> {
    if size == 0 {
        return Err(Error::Parameter("Hankel size must be positive".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let decay = 1.0 - gamma;
    // Entries depend only on i + j, so fill the anti-diagonals from one table.
    let diag: Vec<f64> = (1..2 * size)
        .map(|k| decay.powi(k as i32) / k as f64)
        .collect();
    let entries = DMatrix::from_fn(size, size, |i, j| diag[i + j]);
    Ok(HankelMatrix {
        size,
        gamma,
        entries,
    })
}

/// Top eigenpairs of a Hankel matrix, used as a convolution filter bank.
///
/// Eigenvalues are sorted in descending order. Each filter is a unit vector
/// of length `window` whose first nonzero coordinate is nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    gamma: f64,
    window: usize,
    eigenvalues: Vec<f64>,
    filters: Vec<DVector<f64>>,
}

impl SpectralBasis {
    /// Builds the Hankel matrix of size `window` and keeps its top `count` eigenpairs.
    pub fn compute(window: usize, count: usize, gamma: f64) -> Result<Self> {
        top_eigenpairs(&build_hankel(window, gamma)?, count)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Filter length.
    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of retained filters.
    pub fn count(&self) -> usize {
        self.filters.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn filters(&self) -> &[DVector<f64>] {
        &self.filters
    }

    pub fn filter(&self, j: usize) -> &DVector<f64> {
        &self.filters[j]
    }

    /// `σ_j^{1/4}`, the weight applied to the projection onto filter `j`.
    pub fn weight(&self, j: usize) -> f64 {
        self.eigenvalues[j].powf(0.25)
    }

    /// Filters stacked as the columns of a `window × count` matrix.
    pub fn filter_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.filters)
    }

    /// Writes the bank in the little-endian `DSCB` cache layout.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut buf = Vec::with_capacity(20 + 8 * self.count() * (self.window + 1));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&cache_u32(self.window, path)?.to_le_bytes());
        buf.extend_from_slice(&cache_u32(self.count(), path)?.to_le_bytes());
        buf.extend_from_slice(&self.gamma.to_le_bytes());
        for sigma in &self.eigenvalues {
            buf.extend_from_slice(&sigma.to_le_bytes());
        }
        for filter in &self.filters {
            for v in filter.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a bank previously written by [`SpectralBasis::write_cache`].
    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
            return Err(bad("missing DSCB header"));
        }
        let window = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let gamma = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expected = 20 + 8 * count * (window + 1);
        if bytes.len() != expected || window == 0 || count == 0 || count > window {
            return Err(bad("payload length does not match header"));
        }
        let mut values = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let eigenvalues: Vec<f64> = values.by_ref().take(count).collect();
        let filters = (0..count)
            .map(|_| DVector::from_iterator(window, values.by_ref().take(window)))
            .collect();
        Ok(SpectralBasis {
            gamma,
            window,
            eigenvalues,
            filters,
        })
    }
}

fn cache_u32(value: usize, path: &Path) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("{value} does not fit the u32 header field"),
    })
}

/// Returns the `k` largest eigenpairs of `hankel`.
///
/// Eigenvalues are clamped at zero: the matrix is positive semidefinite and
/// negative values can only be roundoff in the numerically null tail.
pub fn top_eigenpairs(hankel: &HankelMatrix, k: usize) -> Result<SpectralBasis> {
    let size = hankel.size;
    if k == 0 || k > size {
        return Err(Error::Parameter(format!(
            "requested {k} eigenpairs of a {size}x{size} matrix"
        )));
    }
    let eig = SymmetricEigen::try_new(hankel.entries.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "symmetric eigensolver did not converge within {EIGEN_MAX_ITER} sweeps \
                 (size {size}, gamma {})",
                hankel.gamma
            ))
        })?;

    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigenvalues = Vec::with_capacity(k);
    let mut filters = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
        let mut v = eig.eigenvectors.column(idx).into_owned();
        v /= v.norm();
        if let Some(first) = v.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        filters.push(v);
    }
    Ok(SpectralBasis {
        gamma: hankel.gamma,
        window: size,
        eigenvalues,
        filters,
    })
}

/// `σ_j^{1/4} · Y · φ_j` for a `p × window` matrix of recent vectors, newest first.
pub fn project_window(window: &DMatrix<f64>, basis: &SpectralBasis, j: usize) -> Result<DVector<f64>> {
    if window.ncols() != basis.window {
        return Err(Error::dims("project_window columns", basis.window, window.ncols()));
    }
    if j >= basis.count() {
        return Err(Error::Parameter(format!(
            "filter index {j} out of range for a bank of {}",
            basis.count()
        )));
    }
    Ok(window * basis.filter(j) * basis.weight(j))
}
