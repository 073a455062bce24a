use ndarray::Array2;

use super::RelPosCoefficients;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// How a Toeplitz matrix is embedded into a circulant one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CirculantStrategy {
    /// Size exactly `2n`, with `c[n] = t[0]` filling the spare slot.
    #[serde(rename = "paper_2n")]
    Paper2n,
    /// Smallest power of two `>= 2n - 1`, spare slots zero.
    #[default]
    PaddedPow2,
}

impl CirculantStrategy {
    pub const ALL: [CirculantStrategy; 2] = [CirculantStrategy::Paper2n, CirculantStrategy::PaddedPow2];

    pub fn embed_size(self, n: usize) -> usize {
        match self {
            CirculantStrategy::Paper2n => 2 * n,
            CirculantStrategy::PaddedPow2 => (2 * n - 1).next_power_of_two(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CirculantStrategy::Paper2n => "paper_2n",
            CirculantStrategy::PaddedPow2 => "padded_pow2",
        }
    }
}

impl std::str::FromStr for CirculantStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper_2n" => Ok(CirculantStrategy::Paper2n),
            "padded_pow2" => Ok(CirculantStrategy::PaddedPow2),
            other => Err(format!(
                "unknown circulant strategy `{other}` (expected paper_2n or padded_pow2)"
            )),
        }
    }
}

/// First column of the circulant embedding, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantSpec<T = f64> {
    pub strategy: CirculantStrategy,
    /// `[N, d]`.
    pub first_column: Array2<T>,
}

impl<T: Real> CirculantSpec<T> {
    pub fn embed_size(&self) -> usize {
        self.first_column.nrows()
    }

    /// `C[i][j] = c[(i - j) mod N]`.
    pub fn entry(&self, i: usize, j: usize, channel: usize) -> T {
        let size = self.embed_size();
        self.first_column[[(i + size - j % size) % size, channel]]
    }

    /// Top-left `n x n` block of the circulant for one channel.
    pub fn top_left_block(&self, n: usize, channel: usize) -> Array2<T> {
        Array2::from_shape_fn((n, n), |(i, j)| self.entry(i, j, channel))
    }
}

pub fn build_circulant<T: Real>(
    coeffs: &RelPosCoefficients<T>,
    strategy: CirculantStrategy,
) -> Result<CirculantSpec<T>> {
    let n = coeffs.len();
    if n == 0 {
        return Err(Error::dim("sequence length must be positive"));
    }
    let size = strategy.embed_size(n);
    let mut first_column = Array2::zeros((size, coeffs.channels()));
    let mut column = vec![T::zero(); size];
    for ch in 0..coeffs.channels() {
        let taps: Vec<T> = coeffs.values().column(ch).to_vec();
        fill_first_column(&taps, strategy, &mut column);
        first_column.column_mut(ch).iter_mut().zip(&column).for_each(|(o, &v)| *o = v);
    }
    Ok(CirculantSpec {
        strategy,
        first_column,
    })
}

/// First column of one channel's circulant. `taps[k + n - 1]` holds `t[k]`
/// and `out.len()` is the embedding size.
pub(crate) fn fill_first_column<T: Real>(taps: &[T], strategy: CirculantStrategy, out: &mut [T]) {
    let n = taps.len().div_ceil(2);
    let size = out.len();
    out.fill(T::zero());
    out[..n].copy_from_slice(&taps[n - 1..]);
    match strategy {
        CirculantStrategy::Paper2n => {
            // c[n] never reaches the first n output rows; t[0] is used as filler.
            out[n] = taps[n - 1];
            out[n + 1..].copy_from_slice(&taps[..n - 1]);
        }
        CirculantStrategy::PaddedPow2 => {
            for k in 1..n {
                out[size - k] = taps[n - 1 - k];
            }
        }
    }
}
