//! Small dense building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

pub fn gaussian_vector(len: usize, std: f64, rng: &mut impl Rng) -> Array1<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(len, || n.sample(rng))
}

/// Exact GELU: `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|z| (z - m).exp());
    let s = e.sum();
    e / s
}

/// Backward through softmax given its output `p` and upstream gradient `g`.
pub fn softmax_backward(p: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> Array1<f64> {
    let dot = p.dot(&g);
    &p * &(&g - dot)
}

/// `log(sum(exp(z)))` with max shift. Empty input gives `-inf`.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(z: I) -> f64 {
    let m = z.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normed: Array1<f64>,
    pub inv_std: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> (Array1<f64>, LayerNormCache) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normed = x.mapv(|v| (v - mean) * inv_std);
        let y = &normed * &self.gamma + &self.beta;
        (y, LayerNormCache { normed, inv_std })
    }

    /// Returns the input gradient; accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &LayerNormCache, gy: ArrayView1<'_, f64>, grads: &mut LayerNorm) -> Array1<f64> {
        grads.gamma.scaled_add(1.0, &(&gy * &cache.normed));
        grads.beta.scaled_add(1.0, &gy);
        let gn = &gy * &self.gamma;
        let n = gn.len() as f64;
        let mean_g = gn.sum() / n;
        let mean_gn = gn.dot(&cache.normed) / n;
        (&gn - mean_g - &(&cache.normed * mean_gn)) * cache.inv_std
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }
}

/// `y = W x + b` with `W` stored (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: gaussian_matrix(out_dim, in_dim, INIT_STD, rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Row-wise forward over a (rows, in) matrix.
    pub fn forward_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<'_, f64>, gy: ArrayView1<'_, f64>, grads: &mut Linear) -> Array1<f64> {
        outer_add(&mut grads.weight, gy, x);
        grads.bias.scaled_add(1.0, &gy);
        self.weight.t().dot(&gy)
    }

    pub fn backward_rows(&self, x: ArrayView2<'_, f64>, gy: ArrayView2<'_, f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight.scaled_add(1.0, &gy.t().dot(&x));
        grads.bias.scaled_add(1.0, &gy.sum_axis(Axis(0)));
        gy.dot(&self.weight)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// `m += a b^T`
pub fn outer_add(m: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_matches_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x * Phi(x) with Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - central(gelu, x)).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_and_lse() {
        let p = softmax(array![1.0, 3.0].view());
        assert!((p[0] - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((log_sum_exp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        ln.gamma = gaussian_vector(5, 1.0, &mut rng);
        ln.beta = gaussian_vector(5, 1.0, &mut rng);
        let x = gaussian_vector(5, 1.0, &mut rng);
        let w = gaussian_vector(5, 1.0, &mut rng);
        let f = |x: &Array1<f64>| ln.forward(x.view()).0.dot(&w);
        let (_, cache) = ln.forward(x.view());
        let mut g = ln.zeros_like();
        let gx = ln.backward(&cache, w.view(), &mut g);
        for i in 0..5 {
            let num = central(
                |v| {
                    let mut xx = x.clone();
                    xx[i] = v;
                    f(&xx)
                },
                x[i],
            );
            assert!((gx[i] - num).abs() < 1e-7, "{i}: {} vs {num}", gx[i]);
        }
    }

    #[test]
    fn layer_norm_of_zero_is_finite() {
        let ln = LayerNorm::new(4);
        let (y, c) = ln.forward(Array1::zeros(4).view());
        assert!(y.iter().all(|v| *v == 0.0));
        assert!(c.inv_std.is_finite());
    }
}
