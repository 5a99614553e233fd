//! Dense numeric primitives shared by the model: scalar trait, matrix
//! multiplication wrappers, layer normalization, GELU, softmax, and the
//! fused cross-entropy loss/gradient.
//!
//! Everything is generic over [`Scalar`] so the production path runs in
//! `f32` while gradient-check tests instantiate the exact same code in
//! `f64`. All reductions run in a fixed sequential order, so results are
//! bit-reproducible for a given build.

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Floating-point element type usable by the model (`f32` or `f64`).
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f64_lossy(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite float conversion")
    }
    /// Widening conversion to `f64` for loss accumulation.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand used throughout the numeric code for typed constants.
pub fn fs<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}

/// `a @ b`. Thin wrapper so call sites read uniformly; `ndarray` dispatches
/// to its blocked SIMD kernel for `f32`/`f64`.
pub fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    a.dot(&b)
}

/// `y += x @ w` into an existing buffer (avoids an allocation in hot paths).
pub fn matmul_acc<F: Scalar>(y: &mut Array2<F>, x: ArrayView2<F>, w: ArrayView2<F>) {
    ndarray::linalg::general_mat_mul(F::one(), &x, &w, F::one(), y);
}

/// Add a bias row vector to every row of `y`.
pub fn add_bias<F: Scalar>(y: &mut Array2<F>, b: &Array1<F>) {
    for mut row in y.rows_mut() {
        row += b;
    }
}

/// Gradient of a row-broadcast bias: column sums of `dy`.
pub fn bias_grad<F: Scalar>(dy: ArrayView2<F>) -> Array1<F> {
    dy.sum_axis(Axis(0))
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Layer normalization state cached by the forward pass for backward.
pub struct NormCache<F: Scalar> {
    /// Normalized inputs x_hat, shape of the input.
    pub xhat: Array2<F>,
    /// Reciprocal standard deviation per row.
    pub rstd: Array1<F>,
}

/// Forward layer norm: per row, `y = gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm<F: Scalar>(
    x: ArrayView2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
    eps: F,
) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let inv_d = F::one() / fs::<F>(d as f64);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[[i, j]] = xh;
            y[[i, j]] = gain[j] * xh + bias[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Backward layer norm. Returns `dx` and accumulates `dgain`/`dbias`.
pub fn layer_norm_backward<F: Scalar>(
    dy: ArrayView2<F>,
    gain: &Array1<F>,
    cache: &NormCache<F>,
    dgain: &mut Array1<F>,
    dbias: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / fs::<F>(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dy_row = dy.row(i);
        let xh_row = cache.xhat.row(i);
        // Accumulate parameter grads and the two row reductions in one pass.
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..d {
            let g = dy_row[j];
            dgain[j] += g * xh_row[j];
            dbias[j] += g;
            let dxh = g * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh_row[j];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dy_row[j] * gain[j];
            dx[[i, j]] = r * (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU activation (tanh approximation), elementwise.
pub fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let c = fs::<F>(GELU_C);
    let a = fs::<F>(GELU_A);
    let half = fs::<F>(0.5);
    x.mapv(|v| {
        let t = (c * (v + a * v * v * v)).tanh();
        half * v * (F::one() + t)
    })
}

/// GELU backward: `dx = dy * gelu'(x)` given the forward *input*.
pub fn gelu_backward<F: Scalar>(dy: &Array2<F>, x: &Array2<F>) -> Array2<F> {
    let c = fs::<F>(GELU_C);
    let a = fs::<F>(GELU_A);
    let half = fs::<F>(0.5);
    let three = fs::<F>(3.0);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let inner = c * (v + a * v * v * v);
        let t = inner.tanh();
        let sech2 = F::one() - t * t;
        let dinner = c * (F::one() + three * a * v * v);
        let deriv = half * (F::one() + t) + half * v * sech2 * dinner;
        *d *= deriv;
    });
    dx
}

/// Fused softmax cross-entropy over logits.
///
/// `targets[i]` is the class index for row `i`; rows with `mask[i] == false`
/// contribute nothing to loss or gradient. Returns the mean loss over
/// unmasked rows (f64 accumulation) and `dlogits` already scaled by
/// `1/count`, plus the unmasked row count.
pub fn cross_entropy<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[u32],
    mask: &[bool],
) -> (f64, Array2<F>, usize) {
    let (n, v) = logits.dim();
    assert_eq!(targets.len(), n, "target length mismatch");
    assert_eq!(mask.len(), n, "mask length mismatch");
    let count = mask.iter().filter(|&&m| m).count();
    let mut dlogits = Array2::zeros((n, v));
    if count == 0 {
        return (0.0, dlogits, 0);
    }
    let inv_count = fs::<F>(1.0 / count as f64);
    let mut loss_sum = 0.0f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let target = targets[i] as usize;
        debug_assert!(target < v, "target id out of vocab range");
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &x in row {
            sum += (x - max).exp();
        }
        let log_z = sum.ln() + max;
        loss_sum += (log_z - row[target]).to_f64_lossy();
        let inv_sum = F::one() / sum;
        let mut drow = dlogits.row_mut(i);
        for j in 0..v {
            let p = (row[j] - max).exp() * inv_sum;
            drow[j] = p * inv_count;
        }
        drow[target] -= inv_count;
    }
    (loss_sum / count as f64, dlogits, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn randn2(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut m = array![[1.0f64, 2.0, 3.0], [-1.0, 0.0, 1.0]];
        softmax_rows(&mut m);
        for row in m.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(m[[0, 2]] > m[[0, 1]] && m[[0, 1]] > m[[0, 0]]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (3, 5);
        let x = randn2(&mut rng, n, d);
        let gain = Array1::from_shape_fn(d, |_| rng.gen::<f64>() + 0.5);
        let bias = Array1::from_shape_fn(d, |_| rng.gen::<f64>() - 0.5);
        let dy = randn2(&mut rng, n, d);
        let eps = 1e-5;

        let loss = |x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>| -> f64 {
            let (y, _) = layer_norm(x.view(), gain, bias, eps);
            (&y * &dy).sum()
        };

        let (_, cache) = layer_norm(x.view(), &gain, &bias, eps);
        let mut dgain = Array1::zeros(d);
        let mut dbias = Array1::zeros(d);
        let dx = layer_norm_backward(dy.view(), &gain, &cache, &mut dgain, &mut dbias);

        let h = 1e-6;
        for i in 0..n {
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let num = (loss(&xp, &gain, &bias) - loss(&xm, &gain, &bias)) / (2.0 * h);
                assert!(
                    (num - dx[[i, j]]).abs() < 1e-6,
                    "dx[{i},{j}]: analytic {} vs numeric {num}",
                    dx[[i, j]]
                );
            }
        }
        for j in 0..d {
            let mut gp = gain.clone();
            let mut gm = gain.clone();
            gp[j] += h;
            gm[j] -= h;
            let num = (loss(&x, &gp, &bias) - loss(&x, &gm, &bias)) / (2.0 * h);
            assert!((num - dgain[j]).abs() < 1e-6, "dgain[{j}]");
            let mut bp = bias.clone();
            let mut bm = bias.clone();
            bp[j] += h;
            bm[j] -= h;
            let num = (loss(&x, &gain, &bp) - loss(&x, &gain, &bm)) / (2.0 * h);
            assert!((num - dbias[j]).abs() < 1e-6, "dbias[{j}]");
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn2(&mut rng, 4, 6) * 2.0;
        let dy = randn2(&mut rng, 4, 6);
        let dx = gelu_backward(&dy, &x);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let num = ((&gelu(&xp) * &dy).sum() - (&gelu(&xm) * &dy).sum()) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-6, "gelu dx[{i},{j}]");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = randn2(&mut rng, 5, 7);
        let targets = [2u32, 0, 6, 3, 1];
        let mask = [true, true, false, true, true];
        let (loss, dlogits, count) = cross_entropy(logits.view(), &targets, &mask);
        assert_eq!(count, 4);
        assert!(loss > 0.0);
        // Masked row contributes zero gradient.
        assert!(dlogits.row(2).iter().all(|&v| v == 0.0));
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..7 {
                let mut lp = logits.clone();
                let mut lm = logits.clone();
                lp[[i, j]] += h;
                lm[[i, j]] -= h;
                let (fp, _, _) = cross_entropy(lp.view(), &targets, &mask);
                let (fm, _, _) = cross_entropy(lm.view(), &targets, &mask);
                let num = (fp - fm) / (2.0 * h);
                assert!(
                    (num - dlogits[[i, j]]).abs() < 1e-5,
                    "dlogits[{i},{j}]: {} vs {num}",
                    dlogits[[i, j]]
                );
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        // Untrained-model sanity anchor: equal logits over V classes lose ln(V).
        let logits = Array2::<f64>::zeros((3, 11));
        let (loss, _, _) = cross_entropy(logits.view(), &[0, 5, 10], &[true; 3]);
        assert!((loss - (11.0f64).ln()).abs() < 1e-12);
    }
}
