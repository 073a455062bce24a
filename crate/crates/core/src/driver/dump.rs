use std::io::Write;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::TnnModel;
use crate::toeplitz::RelPosCoefficients;

/// Effective Toeplitz operator of one layer at a given length.
#[derive(Debug, Clone)]
pub struct ToeplitzDump {
    /// Per-channel coefficients, decayed and masked.
    pub coeffs: RelPosCoefficients,
    /// `n x n` matrix of the channel-averaged coefficients.
    pub matrix: Array2<f64>,
}

/// Dumps the TNO of block `layer` at length `n`. With `unit_rpe` the RPE
/// output is replaced by ones, leaving the decay envelope and the mask.
pub fn dump_toeplitz(model: &TnnModel, layer: usize, n: usize, unit_rpe: bool) -> Result<ToeplitzDump> {
    let block = model.blocks.get(layer).ok_or_else(|| {
        Error::Range(format!("layer {layer} out of range, model has {}", model.blocks.len()))
    })?;
    if n == 0 {
        return Err(Error::dim("matrix size must be positive"));
    }
    let op = &block.gtu.tno;
    let coeffs = if unit_rpe {
        op.unit_rpe_coeffs(n)?
    } else {
        (*op.effective_coeffs(n)?).clone()
    };
    let mean: Array1<f64> = coeffs.values().mean_axis(Axis(1)).expect("at least one channel");
    let matrix = Array2::from_shape_fn((n, n), |(i, j)| mean[i + n - 1 - j]);
    Ok(ToeplitzDump { coeffs, matrix })
}

/// Header `row,0,1,...,n-1`, then one line per matrix row.
pub fn write_matrix_csv<W: Write>(matrix: &Array2<f64>, mut out: W) -> std::io::Result<()> {
    write!(out, "row")?;
    for j in 0..matrix.ncols() {
        write!(out, ",{j}")?;
    }
    writeln!(out)?;
    for (i, row) in matrix.outer_iter().enumerate() {
        write!(out, "{i}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn model(causal: bool) -> TnnModel {
        let mut c = ModelConfig::desk(11);
        c.causal = causal;
        c.layers = 2;
        TnnModel::new(c, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn causal_dump_is_lower_triangular_toeplitz() {
        let d = dump_toeplitz(&model(true), 1, 12, false).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if j > i {
                    assert_eq!(d.matrix[[i, j]], 0.0);
                }
                if i + 1 < 12 && j + 1 < 12 {
                    assert_eq!(d.matrix[[i, j]], d.matrix[[i + 1, j + 1]]);
                }
            }
        }
        assert!(d.matrix[[5, 0]] != 0.0);
    }

    #[test]
    fn unit_rpe_shows_decay_envelope() {
        let d = dump_toeplitz(&model(false), 0, 256, true).unwrap();
        let envelope = std::hint::black_box(0.99f64).powi(200);
        assert_eq!(d.matrix[[0, 0]], 1.0);
        assert!((d.matrix[[200, 0]] - envelope).abs() <= 1e-15 * envelope);
        assert_eq!(d.matrix[[200, 0]], d.matrix[[0, 200]]);
        for c in 0..d.coeffs.channels() {
            assert_eq!(d.coeffs.get(200, c), envelope);
            assert!(d.coeffs.get(200, c).abs() <= envelope * d.coeffs.get(0, c).abs());
        }
    }

    #[test]
    fn layer_out_of_range() {
        assert!(matches!(dump_toeplitz(&model(true), 2, 4, false), Err(Error::Range(_))));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_matrix_csv(&ndarray::array![[1.0, 0.0], [0.5, 1.0]], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row,0,1\n0,1,0\n1,0.5,1\n");
    }
}
