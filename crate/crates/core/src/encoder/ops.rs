//! Dense building blocks with their hand-derived gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Gradient of the logits given softmax output `a` and upstream `da`.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let dot = (a * da).sum_axis(Axis(1)).insert_axis(Axis(1));
    a * &(da - &dot)
}

/// Cached statistics of one layer-norm application.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Layer norm over the last axis; `gain` and `bias` are `1×d`.
pub fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates into `dgain`, `dbias`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let m1 = dxhat.sum_axis(Axis(1)) / d;
    let m2 = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &(&cache.xhat * &m2.insert_axis(Axis(1)));
    dx *= &cache.inv_std.view().insert_axis(Axis(1));
    dx
}

/// `x·w + b` with `b` a `1×m` row.
pub fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates the weight and bias gradients of [`affine`] and returns the
/// input gradient.
pub fn affine_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

pub fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.mapv(|x| (x - max).exp()).sum().ln()
}

/// `ln(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-6);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let s = array![[1000.0, 1000.0], [-1e9, 0.0]];
        let a = softmax_rows(&s);
        assert_eq!(a[[0, 0]], 0.5);
        assert_eq!(a[[1, 0]], 0.0);
        assert_eq!(a[[1, 1]], 1.0);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let (y, _) = layer_norm(&x, &Array2::ones((1, 4)), &Array2::zeros((1, 4)));
        assert!(y.sum().abs() < 1e-12);
        assert!((y.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
