//! Trainable dual-tower model on top of frozen features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{build_positive_sets, multipositive_loss_grad};
use super::TrainError;
use crate::parallel;
use crate::repr::{
    AggCache, AggregatorKind, AggregatorParams, LoraAdapter, ProjectorCache, ProjectorParams, ReprError, EMBED_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub vision_in: usize,
    pub text_in: usize,
    pub vision_rank: usize,
    pub text_rank: usize,
    pub aggregator: AggregatorKind,
    pub max_slices: usize,
    pub projector_hidden: usize,
    pub dropout: f64,
    pub text_projector: bool,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: EMBED_DIM,
            vision_in: EMBED_DIM,
            text_in: EMBED_DIM,
            vision_rank: 4,
            text_rank: 4,
            aggregator: AggregatorKind::Mean,
            max_slices: 28,
            projector_hidden: EMBED_DIM,
            dropout: 0.1,
            text_projector: false,
            tau_init: 0.07,
        }
    }
}

/// Frozen linear maps that the adapters attach to: `(dim, vision_in)` and
/// `(dim, text_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBases {
    pub vision: Array2<f64>,
    pub text: Array2<f64>,
}

impl FrozenBases {
    pub fn identity(d: usize) -> Self {
        Self {
            vision: Array2::eye(d),
            text: Array2::eye(d),
        }
    }
}

/// Frozen per-study inputs: one feature row per planned slice plus the
/// impression features.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFeatures {
    pub study_id: String,
    pub slices: Array2<f64>,
    pub text: Array1<f64>,
    pub impression: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vision_lora: LoraAdapter,
    pub text_lora: LoraAdapter,
    pub aggregator: AggregatorParams,
    pub projector: ProjectorParams,
    pub text_projector: Option<ProjectorParams>,
    pub log_tau: f64,
}

struct VisionCache {
    fa: Array2<f64>,
    agg: AggCache,
    proj: ProjectorCache,
    norm: f64,
    v: Array1<f64>,
}

struct TextCache {
    ga: Array1<f64>,
    proj: Option<ProjectorCache>,
    norm: f64,
    t: Array1<f64>,
}

fn unit(y: Array1<f64>) -> Result<(Array1<f64>, f64), ReprError> {
    let n = y.dot(&y).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(ReprError::ZeroVector);
    }
    Ok((y / n, n))
}

fn l2_backward(v: &Array1<f64>, norm: f64, gv: ArrayView1<'_, f64>) -> Array1<f64> {
    (&gv - &(v * v.dot(&gv))) / norm
}

/// Deterministic per-item seed derivation.
pub fn mix_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ReprError> {
        if cfg.aggregator == AggregatorKind::LiteTransformer && !cfg.dim.is_multiple_of(crate::repr::LITE_HEADS) {
            return Err(ReprError::InvalidAdapter(format!(
                "dim {} not divisible by {} heads",
                cfg.dim,
                crate::repr::LITE_HEADS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision_lora = LoraAdapter::init(cfg.dim, cfg.vision_in, cfg.vision_rank, &mut rng)?;
        let text_lora = LoraAdapter::init(cfg.dim, cfg.text_in, cfg.text_rank, &mut rng)?;
        let aggregator = AggregatorParams::init(cfg.aggregator, cfg.dim, cfg.max_slices, &mut rng);
        let projector = ProjectorParams::init(cfg.dim, cfg.projector_hidden, cfg.dropout, &mut rng);
        let text_projector = cfg
            .text_projector
            .then(|| ProjectorParams::init(cfg.dim, cfg.projector_hidden, cfg.dropout, &mut rng));
        Ok(Self {
            vision_lora,
            text_lora,
            aggregator,
            projector,
            text_projector,
            log_tau: cfg.tau_init.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vision_lora: self.vision_lora.zeros_like(),
            text_lora: self.text_lora.zeros_like(),
            aggregator: self.aggregator.zeros_like(),
            projector: self.projector.zeros_like(),
            text_projector: self.text_projector.as_ref().map(ProjectorParams::zeros_like),
            log_tau: 0.0,
        }
    }

    /// Every trainable tensor as a named flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("vision.lora.a".into(), self.vision_lora.a.as_slice().expect("contiguous")),
            ("vision.lora.b".into(), self.vision_lora.b.as_slice().expect("contiguous")),
            ("text.lora.a".into(), self.text_lora.a.as_slice().expect("contiguous")),
            ("text.lora.b".into(), self.text_lora.b.as_slice().expect("contiguous")),
        ];
        out.extend(self.aggregator.tensors());
        out.extend(self.projector.tensors("projector"));
        if let Some(p) = &self.text_projector {
            out.extend(p.tensors("text_projector"));
        }
        out.push(("log_tau".into(), std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("vision.lora.a".into(), self.vision_lora.a.as_slice_mut().expect("contiguous")),
            ("vision.lora.b".into(), self.vision_lora.b.as_slice_mut().expect("contiguous")),
            ("text.lora.a".into(), self.text_lora.a.as_slice_mut().expect("contiguous")),
            ("text.lora.b".into(), self.text_lora.b.as_slice_mut().expect("contiguous")),
        ];
        out.extend(self.aggregator.tensors_mut());
        out.extend(self.projector.tensors_mut("projector"));
        if let Some(p) = &mut self.text_projector {
            out.extend(p.tensors_mut("text_projector"));
        }
        out.push(("log_tau".into(), std::slice::from_mut(&mut self.log_tau)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn vision_forward(
        &self,
        bases: &FrozenBases,
        slices: ArrayView2<'_, f64>,
        mask: Option<Array1<f64>>,
    ) -> Result<VisionCache, ReprError> {
        if slices.ncols() != bases.vision.ncols() {
            return Err(ReprError::ShapeMismatch {
                expected: bases.vision.ncols(),
                actual: slices.ncols(),
            });
        }
        let fa = slices.dot(&self.vision_lora.a.t());
        let e = slices.dot(&bases.vision.t()) + fa.dot(&self.vision_lora.b.t());
        let (x, agg) = self.aggregator.forward(e.view())?;
        let (y, proj) = self.projector.forward(x.view(), mask);
        let (v, norm) = unit(y)?;
        Ok(VisionCache { fa, agg, proj, norm, v })
    }

    fn text_forward(
        &self,
        bases: &FrozenBases,
        text: ArrayView1<'_, f64>,
        mask: Option<Array1<f64>>,
    ) -> Result<TextCache, ReprError> {
        if text.len() != bases.text.ncols() {
            return Err(ReprError::ShapeMismatch {
                expected: bases.text.ncols(),
                actual: text.len(),
            });
        }
        let ga = self.text_lora.a.dot(&text);
        let t0 = bases.text.dot(&text) + self.text_lora.b.dot(&ga);
        let (y, proj) = match &self.text_projector {
            Some(p) => {
                let (y, c) = p.forward(t0.view(), mask);
                (y, Some(c))
            }
            None => (t0, None),
        };
        let (t, norm) = unit(y)?;
        Ok(TextCache { ga, proj, norm, t })
    }

    fn vision_backward(&self, slices: ArrayView2<'_, f64>, c: &VisionCache, gv: ArrayView1<'_, f64>, g: &mut ModelParams) {
        let gy = l2_backward(&c.v, c.norm, gv);
        let gx = self.projector.backward(&c.proj, gy.view(), &mut g.projector);
        let ge = self.aggregator.backward(&c.agg, gx.view(), &mut g.aggregator);
        g.vision_lora.b.scaled_add(1.0, &ge.t().dot(&c.fa));
        g.vision_lora.a.scaled_add(1.0, &ge.dot(&self.vision_lora.b).t().dot(&slices));
    }

    fn text_backward(&self, text: ArrayView1<'_, f64>, c: &TextCache, gt: ArrayView1<'_, f64>, g: &mut ModelParams) {
        let mut gy = l2_backward(&c.t, c.norm, gt);
        if let (Some(p), Some(pc), Some(gp)) = (&self.text_projector, &c.proj, &mut g.text_projector) {
            gy = p.backward(pc, gy.view(), gp);
        }
        crate::repr::nn::outer_add(&mut g.text_lora.b, gy.view(), c.ga.view());
        let btg = self.text_lora.b.t().dot(&gy);
        crate::repr::nn::outer_add(&mut g.text_lora.a, btg.view(), text);
    }

    /// Unit-norm volume embedding in evaluation mode.
    pub fn embed_volume(&self, bases: &FrozenBases, slices: ArrayView2<'_, f64>) -> Result<Array1<f64>, ReprError> {
        Ok(self.vision_forward(bases, slices, None)?.v)
    }

    /// Unit-norm text embedding in evaluation mode.
    pub fn embed_text(&self, bases: &FrozenBases, text: ArrayView1<'_, f64>) -> Result<Array1<f64>, ReprError> {
        Ok(self.text_forward(bases, text, None)?.t)
    }

    fn masks(&self, dropout_seed: Option<u64>, i: usize) -> (Option<Array1<f64>>, Option<Array1<f64>>) {
        match dropout_seed {
            Some(seed) => {
                let vm = (self.projector.dropout > 0.0).then(|| self.projector.dropout_mask(mix_seed(seed, 2 * i as u64)));
                let tm = self
                    .text_projector
                    .as_ref()
                    .filter(|p| p.dropout > 0.0)
                    .map(|p| p.dropout_mask(mix_seed(seed, 2 * i as u64 + 1)));
                (vm, tm)
            }
            None => (None, None),
        }
    }
}

/// Loss and (optionally) parameter gradients on one batch. Dropout is active
/// iff `dropout_seed` is set.
pub fn batch_loss_grad(
    params: &ModelParams,
    bases: &FrozenBases,
    batch: &[&StudyFeatures],
    dropout_seed: Option<u64>,
    with_grad: bool,
) -> Result<(f64, Option<ModelParams>), TrainError> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::EmptySplit("batch".into()));
    }
    let positives = build_positive_sets(&batch.iter().map(|b| b.impression.as_str()).collect::<Vec<_>>());
    let idx: Vec<usize> = (0..n).collect();
    let caches = parallel::try_map(&idx, |&i| {
        let (vm, tm) = params.masks(dropout_seed, i);
        let v = params.vision_forward(bases, batch[i].slices.view(), vm)?;
        let t = params.text_forward(bases, batch[i].text.view(), tm)?;
        Ok::<_, ReprError>((v, t))
    })?;
    let d = caches[0].0.v.len();
    let vm = Array2::from_shape_fn((n, d), |(i, j)| caches[i].0.v[j]);
    let tm = Array2::from_shape_fn((n, d), |(i, j)| caches[i].1.t[j]);
    let s = vm.dot(&tm.t());
    let lg = multipositive_loss_grad(s.view(), &positives, params.log_tau)?;
    if !with_grad {
        return Ok((lg.loss, None));
    }
    let gv = lg.grad_s.dot(&tm);
    let gt = lg.grad_s.t().dot(&vm);
    let partials = parallel::map(&idx, |&i| {
        let mut g = params.zeros_like();
        params.vision_backward(batch[i].slices.view(), &caches[i].0, gv.row(i), &mut g);
        params.text_backward(batch[i].text.view(), &caches[i].1, gt.row(i), &mut g);
        g
    });
    let mut grads = params.zeros_like();
    for p in &partials {
        grads.add_assign(p);
    }
    grads.log_tau = lg.grad_log_tau;
    if !grads.is_finite() {
        let bad = grads
            .tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
            .unwrap_or_default();
        return Err(TrainError::NonFiniteGradient(bad));
    }
    Ok((lg.loss, Some(grads)))
}
