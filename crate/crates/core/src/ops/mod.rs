//! Differentiable primitives. Each op checks shapes at its boundary, computes
//! its forward value eagerly, and records a backward rule on the tape.

pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod reduce;
pub mod shape;
pub mod softmax;

pub use conv::{bilinear_resize_tensor, conv2d_tensor, Conv2dSpec};
pub use loss::{argmax_rows, softmax_rows};
pub use norm::BatchNormStats;
pub use norm::{batch_norm, update_running, BatchNormOutput, BnMode, BN_MOMENTUM};
pub use shape::concat;

use crate::error::{Error, Result};

pub(crate) fn normalize_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let resolved = if axis < 0 { axis + rank as isize } else { axis };
    if resolved < 0 || resolved as usize >= rank {
        return Err(Error::InvalidAxis { op, axis: axis.unsigned_abs(), rank });
    }
    Ok(resolved as usize)
}
