use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use super::{Embedding, ReprError};

/// `y = x + dropout(W2 gelu(W1 layernorm(x) + b1) + b2)`
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub ln: LayerNorm,
    /// (h, d)
    pub fc1: Linear,
    /// (d, h)
    pub fc2: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    ln: LayerNormCache,
    normed: Array1<f64>,
    u: Array1<f64>,
    a: Array1<f64>,
    mask: Option<Array1<f64>>,
}

impl ProjectorParams {
    pub fn init(d: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(d),
            fc1: Linear::init(hidden, d, rng),
            fc2: Linear::init(d, hidden, rng),
            dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln: self.ln.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            dropout: self.dropout,
        }
    }

    /// Inverted-dropout mask: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout_mask(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.dropout;
        let keep = 1.0 / (1.0 - p);
        Array1::from_shape_simple_fn(self.dim(), || if rng.random::<f64>() < p { 0.0 } else { keep })
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>, mask: Option<Array1<f64>>) -> (Array1<f64>, ProjectorCache) {
        let (normed, ln) = self.ln.forward(x);
        let u = self.fc1.forward(normed.view());
        let a = u.mapv(gelu);
        let mut f = self.fc2.forward(a.view());
        if let Some(m) = &mask {
            f *= m;
        }
        let y = &x + &f;
        (
            y,
            ProjectorCache {
                ln,
                normed,
                u,
                a,
                mask,
            },
        )
    }

    pub fn backward(&self, cache: &ProjectorCache, gy: ArrayView1<'_, f64>, grads: &mut ProjectorParams) -> Array1<f64> {
        let gf = match &cache.mask {
            Some(m) => &gy * m,
            None => gy.to_owned(),
        };
        let ga = self.fc2.backward(cache.a.view(), gf.view(), &mut grads.fc2);
        let gu = &ga * &cache.u.mapv(gelu_grad);
        let gn = self.fc1.backward(cache.normed.view(), gu.view(), &mut grads.fc1);
        &gy + &self.ln.backward(&cache.ln, gn.view(), &mut grads.ln)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &[f64])> {
        vec![
            (format!("{prefix}.ln.gamma"), self.ln.gamma.as_slice().expect("contiguous")),
            (format!("{prefix}.ln.beta"), self.ln.beta.as_slice().expect("contiguous")),
            (format!("{prefix}.fc1.weight"), self.fc1.weight.as_slice().expect("contiguous")),
            (format!("{prefix}.fc1.bias"), self.fc1.bias.as_slice().expect("contiguous")),
            (format!("{prefix}.fc2.weight"), self.fc2.weight.as_slice().expect("contiguous")),
            (format!("{prefix}.fc2.bias"), self.fc2.bias.as_slice().expect("contiguous")),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        vec![
            (format!("{prefix}.ln.gamma"), self.ln.gamma.as_slice_mut().expect("contiguous")),
            (format!("{prefix}.ln.beta"), self.ln.beta.as_slice_mut().expect("contiguous")),
            (format!("{prefix}.fc1.weight"), self.fc1.weight.as_slice_mut().expect("contiguous")),
            (format!("{prefix}.fc1.bias"), self.fc1.bias.as_slice_mut().expect("contiguous")),
            (format!("{prefix}.fc2.weight"), self.fc2.weight.as_slice_mut().expect("contiguous")),
            (format!("{prefix}.fc2.bias"), self.fc2.bias.as_slice_mut().expect("contiguous")),
        ]
    }
}

/// Dropout is applied only in `train_mode`, with a mask drawn from `seed`.
pub fn project(x: &Embedding, params: &ProjectorParams, train_mode: bool, seed: u64) -> Result<Embedding, ReprError> {
    if x.dim() != params.dim() {
        return Err(ReprError::ShapeMismatch {
            expected: params.dim(),
            actual: x.dim(),
        });
    }
    let mask = (train_mode && params.dropout > 0.0).then(|| params.dropout_mask(seed));
    let (y, _) = params.forward(x.values.view(), mask);
    Ok(Embedding::new(y))
}
