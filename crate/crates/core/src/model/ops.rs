//! Dense building blocks with hand-written backward passes.
//!
//! Every `*_backward` accumulates parameter gradients into a buffer of the
//! same structure (when `param_grads` is set) and returns the gradient with
//! respect to its input.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Conv1d, LayerNorm, Linear};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn linear(x: ArrayView2<f64>, p: &Linear) -> Array2<f64> {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

pub fn linear_backward(x: ArrayView2<f64>, dy: ArrayView2<f64>, p: &Linear, grad: Option<&mut Linear>) -> Array2<f64> {
    if let Some(g) = grad {
        g.w += &x.t().dot(&dy);
        g.b += &dy.sum_axis(Axis(0));
    }
    dy.dot(&p.w.t())
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>, p: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    let mut y = &xhat * &p.gain;
    y += &p.bias;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    p: &LayerNorm,
    grad: Option<&mut LayerNorm>,
) -> Array2<f64> {
    if let Some(g) = grad {
        g.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = &dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &is) in
        dx.rows_mut().into_iter().zip(dxhat.rows()).zip(cache.xhat.rows()).zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| *o = is * (gi - mean_g - xi * mean_gx));
    }
    dx
}

/// Rows of zero-padded, strided windows: `(out_len, kernel·c_in)`.
pub fn im2col(x: ArrayView2<f64>, conv: &Conv1d) -> Array2<f64> {
    let (t, c) = x.dim();
    let t_out = conv.out_len(t);
    let mut cols = Array2::zeros((t_out, conv.kernel * c));
    for o in 0..t_out {
        for k in 0..conv.kernel {
            let src = (o * conv.stride + k) as isize - conv.pad as isize;
            if src >= 0 && (src as usize) < t {
                cols.slice_mut(s![o, k * c..(k + 1) * c]).assign(&x.row(src as usize));
            }
        }
    }
    cols
}

fn col2im(dcols: ArrayView2<f64>, t: usize, c: usize, conv: &Conv1d) -> Array2<f64> {
    let mut dx = Array2::zeros((t, c));
    for o in 0..dcols.nrows() {
        for k in 0..conv.kernel {
            let src = (o * conv.stride + k) as isize - conv.pad as isize;
            if src >= 0 && (src as usize) < t {
                let mut row = dx.row_mut(src as usize);
                row += &dcols.slice(s![o, k * c..(k + 1) * c]);
            }
        }
    }
    dx
}

/// Returns the pre-activation output and the im2col buffer.
pub fn conv1d(x: ArrayView2<f64>, conv: &Conv1d) -> (Array2<f64>, Array2<f64>) {
    let cols = im2col(x, conv);
    let mut y = cols.dot(&conv.w);
    y += &conv.b;
    (y, cols)
}

pub fn conv1d_backward(
    dy: ArrayView2<f64>,
    cols: &Array2<f64>,
    in_len: usize,
    conv: &Conv1d,
    grad: Option<&mut Conv1d>,
) -> Array2<f64> {
    if let Some(g) = grad {
        g.w += &cols.t().dot(&dy);
        g.b += &dy.sum_axis(Axis(0));
    }
    let dcols = dy.dot(&conv.w.t());
    col2im(dcols.view(), in_len, conv.c_in(), conv)
}

/// Sinusoidal position code for `pos`, written into `out` (length d).
pub fn add_position(pos: usize, mut out: ndarray::ArrayViewMut1<f64>) {
    let d = out.len();
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        out[i] += angle.sin();
        if i + 1 < d {
            out[i + 1] += angle.cos();
        }
    }
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [0.5, -0.5, 2.0, 0.0]];
        let (y, _) = layer_norm(x.view(), &LayerNorm::new(4));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let conv = Conv1d {
            w: Array2::from_shape_fn((3 * 2, 1), |(i, _)| i as f64 + 1.0),
            b: array![0.5],
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = array![[1.0, 0.0], [2.0, 1.0], [3.0, -1.0], [4.0, 2.0]];
        let (y, _) = conv1d(x.view(), &conv);
        assert_eq!(y.nrows(), 2);
        // out0 taps: pad, x0, x1; weights rows: tap k, channel c -> 2k+c+1
        let direct0 = 0.5 + (3.0 * 1.0 + 4.0 * 0.0) + (5.0 * 2.0 + 6.0 * 1.0);
        assert_eq!(y[[0, 0]], direct0);
        let direct1 = 0.5 + (1.0 * 2.0 + 2.0 * 1.0) + (3.0 * 3.0 + -4.0) + (5.0 * 4.0 + 6.0 * 2.0);
        assert_eq!(y[[1, 0]], direct1);
    }

    #[test]
    fn softmax_sums_to_one() {
        let row = [1000.0, 999.0, -5.0];
        let mut out = [0.0; 3];
        softmax_into(&row, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_softmax_at(&row, 0) - out[0].ln()).abs() < 1e-12);
    }
}
