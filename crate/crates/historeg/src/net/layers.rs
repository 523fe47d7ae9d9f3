//! Building blocks for the matching network: convolution via im2col,
//! batch normalization, a fully connected layer, and ReLU. Everything is
//! f64 and runs on the CPU; each layer caches what its backward pass needs
//! during a training-mode forward.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Kaiming-style init for a fan-in of `fan_in`: normal with std
/// sqrt(2 / fan_in), drawn from the given stream.
fn he_normal(rng: &mut ChaCha12Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let std = (2.0 / fan_in as f64).sqrt();
    move || {
        // Box-Muller from two uniform draws keeps us independent of
        // distribution helpers and stable across rand versions.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
    }
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2D convolution with bias. Forward lowers the input to a column matrix
/// (one column per output position, channel-major kernel taps) and
/// multiplies by the flattened weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let mut draw = he_normal(rng, fan_in);
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| draw());
        drop(draw);
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(Array1::zeros(out_ch).into_dyn()),
            stride,
            pad,
            cache: None,
        }
    }

    fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize)) {
        let (n, c, h, w) = x.dim();
        let k = self.kernel();
        let oh = conv_out_len(h, k, self.stride, self.pad);
        let ow = conv_out_len(w, k, self.stride, self.pad);
        let mut cols = Array2::zeros((c * k * k, n * oh * ow));
        for ni in 0..n {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let col_idx = ni * oh * ow + orow * ow + ocol;
                    let r0 = (orow * self.stride) as isize - self.pad as isize;
                    let c0 = (ocol * self.stride) as isize - self.pad as isize;
                    for ci in 0..c {
                        for kr in 0..k {
                            let ir = r0 + kr as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            for kc in 0..k {
                                let ic = c0 + kc as isize;
                                if ic < 0 || ic >= w as isize {
                                    continue;
                                }
                                cols[(ci * k * k + kr * k + kc, col_idx)] =
                                    x[(ni, ci, ir as usize, ic as usize)];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    fn forward_cols(&self, cols: &Array2<f64>, n: usize, oh: usize, ow: usize) -> Array4<f64> {
        let out_ch = self.weight.value.shape()[0];
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_ch, cols.nrows()))
            .expect("conv weight reshape");
        let mut y = w2.dot(cols);
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
            row += b;
        }
        // (out_ch, n*oh*ow) -> (n, out_ch, oh, ow)
        let mut out = Array4::zeros((n, out_ch, oh, ow));
        for co in 0..out_ch {
            for ni in 0..n {
                for r in 0..oh {
                    for c in 0..ow {
                        out[(ni, co, r, c)] = y[(co, ni * oh * ow + r * ow + c)];
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ..) = x.dim();
        let (cols, (oh, ow)) = self.im2col(x);
        let out = self.forward_cols(&cols, n, oh, ow);
        self.cache = Some(ConvCache {
            cols,
            in_shape: x.dim(),
            out_hw: (oh, ow),
        });
        out
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ..) = x.dim();
        let (cols, (oh, ow)) = self.im2col(x);
        self.forward_cols(&cols, n, oh, ow)
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("conv backward before forward");
        let (n, _, oh, ow) = dy.dim();
        assert_eq!((oh, ow), cache.out_hw, "conv backward shape");
        let out_ch = self.weight.value.shape()[0];
        let rows = cache.cols.nrows();

        // dy as (out_ch, n*oh*ow) in the same column order as cols.
        let mut dy_mat = Array2::zeros((out_ch, n * oh * ow));
        for co in 0..out_ch {
            for ni in 0..n {
                for r in 0..oh {
                    for c in 0..ow {
                        dy_mat[(co, ni * oh * ow + r * ow + c)] = dy[(ni, co, r, c)];
                    }
                }
            }
        }

        let dw = dy_mat.dot(&cache.cols.t());
        self.weight.grad += &dw
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("conv dw reshape");
        let db = dy_mat.sum_axis(Axis(1));
        self.bias.grad += &db.into_dyn();

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_ch, rows))
            .expect("conv weight reshape");
        let dcols = w2.t().dot(&dy_mat);

        // col2im: scatter-add the column gradients back onto the input.
        let (_, c, h, w) = cache.in_shape;
        let k = self.kernel();
        let mut dx = Array4::zeros(cache.in_shape);
        for ni in 0..n {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let col_idx = ni * oh * ow + orow * ow + ocol;
                    let r0 = (orow * self.stride) as isize - self.pad as isize;
                    let c0 = (ocol * self.stride) as isize - self.pad as isize;
                    for ci in 0..c {
                        for kr in 0..k {
                            let ir = r0 + kr as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            for kc in 0..k {
                                let ic = c0 + kc as isize;
                                if ic < 0 || ic >= w as isize {
                                    continue;
                                }
                                dx[(ni, ci, ir as usize, ic as usize)] +=
                                    dcols[(ci * k * k + kr * k + kc, col_idx)];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization over (N, H, W). Training uses batch
/// statistics and maintains running estimates (momentum 0.1, unbiased
/// variance in the running buffer); evaluation uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::new(Array1::zeros(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        let mut out = Array4::zeros(x.dim());
        for ci in 0..c {
            let mut mean = 0.0;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        mean += x[(ni, ci, r, cc)];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let d = x[(ni, ci, r, cc)] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let xh = (x[(ni, ci, r, cc)] - mean) * is;
                        xhat[(ni, ci, r, cc)] = xh;
                        out[(ni, ci, r, cc)] = gamma[ci] * xh + beta[ci];
                    }
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        out
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, c, ..) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = x.clone();
        for ci in 0..c {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            out.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| gamma[ci] * (v - mean) * is + beta[ci]);
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("bn backward before forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array4::zeros(dy.dim());
        for ci in 0..c {
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        dgamma += dy[(ni, ci, r, cc)] * cache.xhat[(ni, ci, r, cc)];
                        dbeta += dy[(ni, ci, r, cc)];
                    }
                }
            }
            let g = gamma[ci];
            let is = cache.inv_std[ci];
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let dxh = dy[(ni, ci, r, cc)] * g;
                        dx[(ni, ci, r, cc)] = is
                            * (dxh
                                - dbeta * g / m
                                - cache.xhat[(ni, ci, r, cc)] * dgamma * g / m);
                    }
                }
            }
            self.gamma.grad[[ci]] += dgamma;
            self.beta.grad[[ci]] += dbeta;
        }
        dx
    }
}

/// Fully connected layer, `y = x W^T + b` with `W` shaped (out, in).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        let mut draw = he_normal(rng, in_dim);
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| draw());
        drop(draw);
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(Array1::zeros(out_dim).into_dyn()),
            cache: None,
        }
    }

    /// All-zero weights and bias: the layer outputs zero for every input
    /// until training moves it, which anchors predictions at the identity
    /// transform.
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(Array2::<f64>::zeros((out_dim, in_dim)).into_dyn()),
            bias: Param::new(Array1::<f64>::zeros(out_dim).into_dyn()),
            cache: None,
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.apply(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.apply(x)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward before forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        self.weight.grad += &dy.t().dot(&x).into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&w)
    }
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given the forward input.
pub fn relu_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    ndarray::Zip::from(x)
        .and(dy)
        .map_collect(|&xi, &di| if xi > 0.0 { di } else { 0.0 })
}

/// Validates that a parameter tensor loaded from a checkpoint matches the
/// shape the model expects.
pub fn check_shape(name: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "parameter {name} has shape {got:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Ix4};
    use rand::SeedableRng;

    fn randn4(rng: &mut ChaCha12Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wd, k, stride, pad);
        let mut y = Array4::zeros((n, cout, oh, ow));
        for ni in 0..n {
            for co in 0..cout {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kr in 0..k {
                                for kc in 0..k {
                                    let ir = (r * stride + kr) as isize - pad as isize;
                                    let ic = (c * stride + kc) as isize - pad as isize;
                                    if ir >= 0 && ir < h as isize && ic >= 0 && ic < wd as isize {
                                        acc += x[(ni, ci, ir as usize, ic as usize)]
                                            * w[(co, ci, kr as usize, kc as usize)];
                                    }
                                }
                            }
                        }
                        y[(ni, co, r, c)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_a_naive_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(&mut rng, 3, 4, 3, 2, 1);
        let x = randn4(&mut rng, (2, 3, 7, 9));
        let y = conv.forward(&x);
        let w = conv.weight.value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let b = conv.bias.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let want = naive_conv(&x, &w, &b, 2, 1);
        assert_eq!(y.dim(), want.dim());
        for (a, e) in y.iter().zip(want.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    // Central-difference check of a scalar loss L = sum(y * probe) against
    // the analytic gradients, run over a few entries of each tensor.
    fn conv_loss(conv: &Conv2d, x: &Array4<f64>, probe: &Array4<f64>) -> f64 {
        let y = conv.forward_eval(x);
        (&y * probe).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(&mut rng, 2, 3, 3, 1, 1);
        let x = randn4(&mut rng, (2, 2, 5, 5));
        let probe = randn4(&mut rng, (2, 3, 5, 5));

        let _ = conv.forward(&x);
        let dx = conv.backward(&probe);

        let eps = 1e-6;
        // input gradient
        for &(ni, ci, r, c) in &[(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[(ni, ci, r, c)] += eps;
            let mut xm = x.clone();
            xm[(ni, ci, r, c)] -= eps;
            let fd = (conv_loss(&conv, &xp, &probe) - conv_loss(&conv, &xm, &probe)) / (2.0 * eps);
            assert!((dx[(ni, ci, r, c)] - fd).abs() < 1e-6, "dx at {ni},{ci},{r},{c}");
        }
        // weight gradient
        for flat in [0usize, 7, 23] {
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += eps;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (conv_loss(&cp, &x, &probe) - conv_loss(&cm, &x, &probe)) / (2.0 * eps);
            let got = conv.weight.grad.as_slice().unwrap()[flat];
            assert!((got - fd).abs() < 1e-6, "dw at {flat}");
        }
        // bias gradient
        let mut cp = conv.clone();
        cp.bias.value[[0]] += eps;
        let mut cm = conv.clone();
        cm.bias.value[[0]] -= eps;
        let fd = (conv_loss(&cp, &x, &probe) - conv_loss(&cm, &x, &probe)) / (2.0 * eps);
        assert!((conv.bias.grad[[0]] - fd).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_standardizes_each_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(3);
        let x = randn4(&mut rng, (4, 3, 5, 5)).mapv(|v| 3.0 * v + 2.0);
        let y = bn.forward_train(&x);
        for ci in 0..3 {
            let ch = y.index_axis(Axis(1), ci);
            let m = ch.mean().unwrap();
            let var = ch.mapv(|v| (v - m) * (v - m)).mean().unwrap();
            assert!(m.abs() < 1e-10, "channel {ci} mean {m}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(2);
        let x = randn4(&mut rng, (8, 2, 4, 4)).mapv(|v| 2.0 * v - 1.0);
        for _ in 0..200 {
            let _ = bn.forward_train(&x);
        }
        // After many updates on the same batch the running stats converge to
        // the batch stats, so eval output approaches train output.
        let y_train = bn.forward_train(&x);
        let y_eval = bn.forward_eval(&x);
        let max = y_train
            .iter()
            .zip(y_eval.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-2, "max train/eval gap {max}");
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value[[0]] = 1.3;
        bn.gamma.value[[1]] = 0.7;
        bn.beta.value[[0]] = 0.2;
        let x = randn4(&mut rng, (2, 2, 3, 3));
        let probe = randn4(&mut rng, (2, 2, 3, 3));

        let _ = bn.forward_train(&x);
        let dx = bn.backward(&probe);

        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| {
            let mut b = bn.clone();
            (&b.forward_train(x) * &probe).sum()
        };
        let eps = 1e-6;
        for &(ni, ci, r, c) in &[(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut xp = x.clone();
            xp[(ni, ci, r, c)] += eps;
            let mut xm = x.clone();
            xm[(ni, ci, r, c)] -= eps;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            assert!(
                (dx[(ni, ci, r, c)] - fd).abs() < 1e-5,
                "dx at {ni},{ci},{r},{c}: {} vs {fd}",
                dx[(ni, ci, r, c)]
            );
        }
        for ci in 0..2 {
            let mut bp = bn.clone();
            bp.gamma.value[[ci]] += eps;
            let mut bm = bn.clone();
            bm.gamma.value[[ci]] -= eps;
            let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps);
            assert!((bn.gamma.grad[[ci]] - fd).abs() < 1e-5, "dgamma {ci}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut lin = Linear::new(&mut rng, 5, 3);
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));

        let _ = lin.forward(&x);
        let dx = lin.backward(&probe);

        let loss =
            |l: &Linear, x: &Array2<f64>| (&l.forward_eval(x) * &probe).sum();
        let eps = 1e-6;
        for &(r, c) in &[(0, 0), (3, 4), (2, 2)] {
            let mut xp = x.clone();
            xp[(r, c)] += eps;
            let mut xm = x.clone();
            xm[(r, c)] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((dx[(r, c)] - fd).abs() < 1e-7);
        }
        for flat in [0usize, 7, 14] {
            let mut lp = lin.clone();
            lp.weight.value.as_slice_mut().unwrap()[flat] += eps;
            let mut lm = lin.clone();
            lm.weight.value.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((lin.weight.grad.as_slice().unwrap()[flat] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn zeroed_linear_outputs_zero() {
        let lin = Linear::new_zeroed(8, 4);
        let x = Array2::from_elem((3, 8), 5.0);
        assert!(lin.forward_eval(&x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_masks_gradients_where_input_was_negative() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, r, c)| {
            [[-1.0, 2.0], [0.0, 3.0]][r][c]
        });
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx[(0, 0, 0, 0)], 0.0);
        assert_eq!(dx[(0, 0, 0, 1)], 1.0);
        assert_eq!(dx[(0, 0, 1, 0)], 0.0);
        assert_eq!(dx[(0, 0, 1, 1)], 1.0);
    }
}
