use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use super::nn::{gaussian_matrix, outer_add, INIT_STD};
use super::ReprError;

/// Low-rank update `B A` added to a frozen `d x k` linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// (r, k)
    pub a: Array2<f64>,
    /// (d, r)
    pub b: Array2<f64>,
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`: the adapted map starts equal to the base map.
    pub fn init(d: usize, k: usize, rank: usize, rng: &mut impl Rng) -> Result<Self, ReprError> {
        if rank == 0 || rank > d.min(k) {
            return Err(ReprError::InvalidAdapter(format!(
                "rank {rank} must lie in 1..={}",
                d.min(k)
            )));
        }
        Ok(Self {
            a: gaussian_matrix(rank, k, INIT_STD, rng),
            b: Array2::zeros((d, rank)),
        })
    }

    pub fn from_parts(a: Array2<f64>, b: Array2<f64>) -> Result<Self, ReprError> {
        let (r, k) = a.dim();
        let (d, rb) = b.dim();
        if r != rb {
            return Err(ReprError::ShapeMismatch {
                expected: r,
                actual: rb,
            });
        }
        if r == 0 || r > d.min(k) {
            return Err(ReprError::InvalidAdapter(format!("rank {r} for {d}x{k}")));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    /// `r * (d + k)`
    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `B (A x)`
    pub fn delta(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.b.dot(&self.a.dot(&x))
    }

    /// Accumulates gradients of `B A x` given upstream `g`.
    pub fn backward(&self, x: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>, grads: &mut LoraAdapter) {
        let ax = self.a.dot(&x);
        outer_add(&mut grads.b, g, ax.view());
        let btg = self.b.t().dot(&g);
        outer_add(&mut grads.a, btg.view(), x);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }
}

/// Applies `W' x = W x + B (A x)` without touching the base map.
pub fn lora_apply<F>(base: F, adapter: &LoraAdapter, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, ReprError>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    if x.len() != adapter.in_dim() {
        return Err(ReprError::ShapeMismatch {
            expected: adapter.in_dim(),
            actual: x.len(),
        });
    }
    let wx = base(x);
    if wx.len() != adapter.out_dim() {
        return Err(ReprError::ShapeMismatch {
            expected: adapter.out_dim(),
            actual: wx.len(),
        });
    }
    Ok(wx + adapter.delta(x))
}

/// Frozen dense map with a trainable low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    /// (d, k), never updated.
    pub base: Array2<f64>,
    pub adapter: LoraAdapter,
}

impl AdaptedLinear {
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, ReprError> {
        lora_apply(|v| self.base.dot(&v), &self.adapter, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_is_base_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gaussian_matrix(6, 5, 1.0, &mut rng);
        let ad = LoraAdapter::init(6, 5, 2, &mut rng).unwrap();
        let x = Array1::from(vec![0.3, -1.0, 2.0, 0.5, -0.25]);
        let y = lora_apply(|v| w.dot(&v), &ad, x.view()).unwrap();
        assert_eq!(y, w.dot(&x));
    }

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(LoraAdapter::init(4, 4, 1, &mut rng).unwrap().parameter_count(), 8);
        assert!(LoraAdapter::init(4, 4, 0, &mut rng).is_err());
        assert!(LoraAdapter::init(4, 3, 4, &mut rng).is_err());
    }

    #[test]
    fn hand_product() {
        let ad = LoraAdapter::from_parts(array![[1.0, 1.0, 1.0]], array![[1.0], [0.0], [0.0]]).unwrap();
        let y = lora_apply(|_| Array1::zeros(3), &ad, array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(y, array![3.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let ad = LoraAdapter::from_parts(array![[1.0, 1.0]], array![[1.0], [0.0]]).unwrap();
        assert!(matches!(
            lora_apply(|v| v.to_owned(), &ad, array![1.0, 2.0, 3.0].view()),
            Err(ReprError::ShapeMismatch { .. })
        ));
        assert!(LoraAdapter::from_parts(array![[1.0, 1.0]], array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ad = LoraAdapter::init(3, 4, 2, &mut rng).unwrap();
        ad.b = gaussian_matrix(3, 2, 1.0, &mut rng);
        let x = array![0.5, -1.0, 0.25, 2.0];
        let g = array![1.0, -2.0, 0.5];
        let mut grads = ad.zeros_like();
        ad.backward(x.view(), g.view(), &mut grads);
        let f = |a: &LoraAdapter| a.delta(x.view()).dot(&g);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = ad.clone();
                p.a[[i, j]] += h;
                let mut m = ad.clone();
                m.a[[i, j]] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                assert!((num - grads.a[[i, j]]).abs() < 1e-8);
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let mut p = ad.clone();
                p.b[[i, j]] += h;
                let mut m = ad.clone();
                m.b[[i, j]] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                assert!((num - grads.b[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
