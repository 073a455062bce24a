//! Toeplitz matrix–vector products.
//!
//! A Toeplitz matrix `T` of size `n` has `T[i][j] = t[i - j]` and is therefore
//! described by the `2n - 1` coefficients `t[-(n-1)] ..= t[n-1]`. Every channel
//! of a `d`-channel sequence gets its own coefficient column; channels never mix.
//!
//! Two product routes are provided:
//!
//! * [`naive_matvec`], the direct `O(n^2)` sum that serves as the oracle, and
//! * [`fft_matvec`], which embeds `T` into a circulant matrix of size
//!   `N >= 2n - 1` and evaluates the product with FFTs in `O(n log n)`.
//!
//! Lower-triangular operators can also use [`causal_matvec_batch`], which
//! trades a log factor for outputs that never depend on later inputs, even
//! through rounding.

mod causal;
mod circulant;
mod kernel;

pub use causal::{causal_matvec_batch, LEAF as CAUSAL_LEAF};
pub use circulant::{build_circulant, CirculantSpec, CirculantStrategy};
pub use kernel::{
    fft_matvec, fft_matvec_batch, matvec_backward, matvec_backward_batch, naive_matvec,
    naive_matvec_batch, ToeplitzPlan,
};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-offset, per-channel Toeplitz generators.
///
/// Row `k + (n - 1)` of `values` holds the coefficient at offset `k` for every
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosCoefficients<T = f64> {
    n: usize,
    values: Array2<T>,
}

impl<T: Real> RelPosCoefficients<T> {
    pub fn new(n: usize, values: Array2<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::dim("sequence length must be positive"));
        }
        if values.nrows() != 2 * n - 1 || values.ncols() == 0 {
            return Err(Error::dim(format!(
                "coefficient table is {:?}, expected [{}, d>=1] for n = {n}",
                values.shape(),
                2 * n - 1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("coefficient table has non-finite entries".into()));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize, channels: usize) -> Self {
        assert!(n >= 1 && channels >= 1);
        Self {
            n,
            values: Array2::zeros((2 * n - 1, channels)),
        }
    }

    /// `t[0] = 1`, every other offset zero.
    pub fn identity(n: usize, channels: usize) -> Self {
        let mut c = Self::zeros(n, channels);
        c.values.row_mut(n - 1).fill(T::one());
        c
    }

    /// Builds a table from `f(offset, channel)`.
    pub fn from_fn(n: usize, channels: usize, mut f: impl FnMut(isize, usize) -> T) -> Result<Self> {
        if n == 0 || channels == 0 {
            return Err(Error::dim("n and channels must be positive"));
        }
        let values = Array2::from_shape_fn((2 * n - 1, channels), |(r, c)| {
            f(r as isize - (n as isize - 1), c)
        });
        Self::new(n, values)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<T> {
        &mut self.values
    }

    /// Row index that stores offset `k`.
    pub fn row_of(&self, offset: isize) -> usize {
        debug_assert!(offset.unsigned_abs() < self.n);
        (offset + self.n as isize - 1) as usize
    }

    /// Offset stored at row `row`.
    pub fn offset_of(&self, row: usize) -> isize {
        row as isize - (self.n as isize - 1)
    }

    pub fn get(&self, offset: isize, channel: usize) -> T {
        self.values[[self.row_of(offset), channel]]
    }

    pub fn offset_row(&self, offset: isize) -> ArrayView1<'_, T> {
        self.values.row(self.row_of(offset))
    }

    /// The operator with `t'[k] = t[-k]`, i.e. the transpose.
    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.invert_axis(ndarray::Axis(0));
        Self { n: self.n, values }
    }

    /// Dense `n x n` matrix of one channel.
    pub fn to_dense(&self, channel: usize) -> Array2<T> {
        Array2::from_shape_fn((self.n, self.n), |(i, j)| {
            self.get(i as isize - j as isize, channel)
        })
    }

    pub fn cast<U: Real>(&self) -> RelPosCoefficients<U> {
        RelPosCoefficients {
            n: self.n,
            values: self.values.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
        }
    }

    pub(crate) fn check_input(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.nrows() != self.n || x.ncols() != self.channels() {
            return Err(Error::dim(format!(
                "input is {:?}, operator expects [{}, {}]",
                x.shape(),
                self.n,
                self.channels()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input has non-finite entries".into()));
        }
        Ok(())
    }
}
