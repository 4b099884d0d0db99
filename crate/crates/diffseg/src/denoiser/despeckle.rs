//! Isolated-point removal on probability maps.
//!
//! The map is binarized at 0.5 and each pixel's `kernel x kernel`
//! neighborhood count is taken under an all-ones window with zero
//! padding; pixels whose count falls below the threshold are zeroed in
//! the output, every other pixel keeps its original value.  A
//! summed-area table makes the window counts O(1) each.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::Real;

/// Zero out pixels whose binarized neighborhood count is below `threshold`.
pub fn despeckle<F: Real>(y: &Array2<F>, kernel: usize, threshold: f64) -> Result<Array2<F>> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::InvalidConfig(format!(
            "despeckle kernel must be odd and positive, got {kernel}"
        )));
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "despeckle threshold must be nonnegative, got {threshold}"
        )));
    }
    let (h, w) = y.dim();
    // Summed-area table of the binarized map, one extra row/column of zeros.
    let mut sat = vec![0i64; (h + 1) * (w + 1)];
    for iy in 0..h {
        for ix in 0..w {
            let b = i64::from(y[[iy, ix]].to_f64() >= 0.5);
            sat[(iy + 1) * (w + 1) + ix + 1] =
                b + sat[iy * (w + 1) + ix + 1] + sat[(iy + 1) * (w + 1) + ix] - sat[iy * (w + 1) + ix];
        }
    }
    let r = (kernel / 2) as isize;
    let mut out = y.clone();
    for iy in 0..h {
        let y0 = (iy as isize - r).max(0) as usize;
        let y1 = ((iy as isize + r + 1) as usize).min(h);
        for ix in 0..w {
            let x0 = (ix as isize - r).max(0) as usize;
            let x1 = ((ix as isize + r + 1) as usize).min(w);
            let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            if (sum as f64) < threshold {
                out[[iy, ix]] = F::zero();
            }
        }
    }
    Ok(out)
}
