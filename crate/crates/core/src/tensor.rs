//! Small helpers shared by the numeric modules.
//!
//! Image batches are plain `candle_core::Tensor`s of shape
//! `(batch, channel, height, width)` with values in `[-1, 1]`.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Number of color channels in every image batch.
pub const CHANNELS: usize = 3;

/// Reads a single-element tensor of any float dtype as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::invalid(format!(
            "expected a single-element tensor, got shape {:?}",
            t.dims()
        ))),
    }
}

/// Copies any float tensor into a flat `Vec<f64>`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Fails with [`Error::NonFinite`] naming `term` if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, term: &str) -> Result<()> {
    // NaN and infinities both survive a sum.
    let total = scalar_f64(&t.to_dtype(DType::F64)?.sum_all()?)?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(term))
    }
}

pub fn ensure_same_shape(x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Checks the `(batch, channel, height, width)` layout with `batch >= 1`.
pub fn ensure_image_batch(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, c, h, w] if n >= 1 => Ok((n, c, h, w)),
        _ => Err(Error::invalid(format!(
            "{what}: expected a (batch, channel, height, width) array with batch >= 1, got {:?}",
            x.dims()
        ))),
    }
}
