//! Slice-level numeric kernels shared by the graph ops and the inference
//! paths. All buffers are dense row-major.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayD, ArrayView2, ArrayViewD, ArrayViewMut2, Axis};

/// Geometry of a square-kernel 2-d convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// True when the convolution is a plain per-pixel linear map.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `channels x height x width` image into a
/// `(channels*k*k) x (out_h*out_w)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let k = g.kernel;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image,
/// accumulating into `x`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            drow[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if a_trans {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if b_trans {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

/// Per-channel mean and population variance over every axis except axis 1.
pub fn channel_moments(x: &ArrayViewD<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let channels = x.shape()[1];
    let mut mean = Array1::zeros(channels);
    let mut var = Array1::zeros(channels);
    for c in 0..channels {
        let lane = x.index_axis(Axis(1), c);
        let count = lane.len() as f64;
        let m = lane.sum() / count;
        let v = lane.fold(0.0, |acc, &e| acc + (e - m) * (e - m)) / count;
        mean[c] = m;
        var[c] = v;
    }
    (mean, var)
}

/// Batch-norm affine transform with fixed statistics:
/// `y = (x - mean) * (gamma / sqrt(var + eps)) + beta`, channel axis 1.
///
/// Every inference-time normalization (frozen, adapted, baselines) goes
/// through this one routine, so equal statistics give bit-identical outputs.
pub fn bn_apply(
    x: &ArrayViewD<'_, f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut y = x.to_owned();
    for (c, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let scale = gamma[c] / (var[c] + eps).sqrt();
        let m = mean[c];
        let b = beta[c];
        lane.mapv_inplace(|e| (e - m) * scale + b);
    }
    y
}
