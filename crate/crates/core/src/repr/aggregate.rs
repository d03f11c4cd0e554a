//! Slice aggregation geometries: mean pooling, learnable-query attention
//! pooling, and a single pre-norm transformer layer read out at a CLS token.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{gaussian_matrix, gaussian_vector, gelu, gelu_grad, softmax, softmax_backward, LayerNorm, LayerNormCache, Linear, INIT_STD};
use super::{Embedding, ReprError};

pub const LITE_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Attention,
    LiteTransformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams {
    pub query: Array1<f64>,
}

impl AttentionPoolParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: gaussian_vector(d, INIT_STD, rng),
        }
    }

    /// Softmax weights `q . e_i / sqrt(d)` over slices.
    pub fn weights(&self, e: ArrayView2<'_, f64>) -> Array1<f64> {
        let scale = (e.ncols() as f64).sqrt();
        softmax((e.dot(&self.query) / scale).view())
    }
}

/// Single encoder layer: multi-head self-attention and a GELU feed-forward
/// block, both pre-norm with residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct LiteTransformerParams {
    pub cls: Array1<f64>,
    /// (max_slices + 1, d); row 0 is the CLS position.
    pub pos: Array2<f64>,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl LiteTransformerParams {
    pub fn init(d: usize, max_slices: usize, rng: &mut impl Rng) -> Self {
        assert!(d.is_multiple_of(LITE_HEADS), "embedding width {d} not divisible by {LITE_HEADS} heads");
        Self {
            cls: gaussian_vector(d, INIT_STD, rng),
            pos: gaussian_matrix(max_slices + 1, d, INIT_STD, rng),
            ln1: LayerNorm::new(d),
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::init(4 * d, d, rng),
            ff2: Linear::init(d, 4 * d, rng),
            heads: LITE_HEADS,
        }
    }

    pub fn capacity(&self) -> usize {
        self.pos.nrows() - 1
    }

    fn zeros_like(&self) -> Self {
        Self {
            cls: Array1::zeros(self.cls.len()),
            pos: Array2::zeros(self.pos.raw_dim()),
            ln1: self.ln1.zeros_like(),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregatorParams {
    Mean,
    Attention(AttentionPoolParams),
    LiteTransformer(Box<LiteTransformerParams>),
}

/// Intermediate values of one aggregation, consumed by `backward`.
#[derive(Debug, Clone)]
pub enum AggCache {
    Mean { count: usize },
    Attention { e: Array2<f64>, alpha: Array1<f64> },
    Lite(Box<LiteCache>),
}

#[derive(Debug, Clone)]
pub struct LiteCache {
    n1: Array2<f64>,
    ln1: Vec<LayerNormCache>,
    q0: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    alpha: Vec<Array1<f64>>,
    o: Array1<f64>,
    n2: Array1<f64>,
    ln2: LayerNormCache,
    u: Array1<f64>,
    a: Array1<f64>,
}

impl AggregatorParams {
    pub fn init(kind: AggregatorKind, d: usize, max_slices: usize, rng: &mut impl Rng) -> Self {
        match kind {
            AggregatorKind::Mean => AggregatorParams::Mean,
            AggregatorKind::Attention => AggregatorParams::Attention(AttentionPoolParams::init(d, rng)),
            AggregatorKind::LiteTransformer => {
                AggregatorParams::LiteTransformer(Box::new(LiteTransformerParams::init(d, max_slices, rng)))
            }
        }
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            AggregatorParams::Mean => AggregatorKind::Mean,
            AggregatorParams::Attention(_) => AggregatorKind::Attention,
            AggregatorParams::LiteTransformer(_) => AggregatorKind::LiteTransformer,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            AggregatorParams::Mean => AggregatorParams::Mean,
            AggregatorParams::Attention(p) => AggregatorParams::Attention(AttentionPoolParams {
                query: Array1::zeros(p.query.len()),
            }),
            AggregatorParams::LiteTransformer(p) => AggregatorParams::LiteTransformer(Box::new(p.zeros_like())),
        }
    }

    /// Named flat views of every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        match self {
            AggregatorParams::Mean => {}
            AggregatorParams::Attention(p) => out.push(("agg.query".into(), flat(&p.query))),
            AggregatorParams::LiteTransformer(p) => {
                out.push(("agg.cls".into(), flat(&p.cls)));
                out.push(("agg.pos".into(), flat2(&p.pos)));
                for (name, ln) in [("ln1", &p.ln1), ("ln2", &p.ln2)] {
                    out.push((format!("agg.{name}.gamma"), flat(&ln.gamma)));
                    out.push((format!("agg.{name}.beta"), flat(&ln.beta)));
                }
                for (name, l) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &p.wo), ("ff1", &p.ff1), ("ff2", &p.ff2)] {
                    out.push((format!("agg.{name}.weight"), flat2(&l.weight)));
                    out.push((format!("agg.{name}.bias"), flat(&l.bias)));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        match self {
            AggregatorParams::Mean => {}
            AggregatorParams::Attention(p) => out.push(("agg.query".into(), flat_mut(&mut p.query))),
            AggregatorParams::LiteTransformer(p) => {
                let p = &mut **p;
                out.push(("agg.cls".into(), flat_mut(&mut p.cls)));
                out.push(("agg.pos".into(), flat2_mut(&mut p.pos)));
                for (name, ln) in [("ln1", &mut p.ln1), ("ln2", &mut p.ln2)] {
                    out.push((format!("agg.{name}.gamma"), flat_mut(&mut ln.gamma)));
                    out.push((format!("agg.{name}.beta"), flat_mut(&mut ln.beta)));
                }
                for (name, l) in [
                    ("wq", &mut p.wq),
                    ("wk", &mut p.wk),
                    ("wv", &mut p.wv),
                    ("wo", &mut p.wo),
                    ("ff1", &mut p.ff1),
                    ("ff2", &mut p.ff2),
                ] {
                    out.push((format!("agg.{name}.weight"), flat2_mut(&mut l.weight)));
                    out.push((format!("agg.{name}.bias"), flat_mut(&mut l.bias)));
                }
            }
        }
        out
    }

    /// Aggregates the (slices, d) matrix `e`.
    pub fn forward(&self, e: ArrayView2<'_, f64>) -> Result<(Array1<f64>, AggCache), ReprError> {
        let count = e.nrows();
        if count == 0 {
            return Err(ReprError::EmptyInput);
        }
        match self {
            AggregatorParams::Mean => Ok((sorted_column_mean(e), AggCache::Mean { count })),
            AggregatorParams::Attention(p) => {
                if p.query.len() != e.ncols() {
                    return Err(ReprError::ShapeMismatch {
                        expected: p.query.len(),
                        actual: e.ncols(),
                    });
                }
                let alpha = p.weights(e);
                let out = alpha.dot(&e);
                Ok((
                    out,
                    AggCache::Attention {
                        e: e.to_owned(),
                        alpha,
                    },
                ))
            }
            AggregatorParams::LiteTransformer(p) => lite_forward(p, e),
        }
    }

    /// Returns the gradient with respect to `e`; accumulates parameter
    /// gradients into `grads` (which must have the same variant).
    pub fn backward(&self, cache: &AggCache, g: ArrayView1<'_, f64>, grads: &mut AggregatorParams) -> Array2<f64> {
        match (self, cache, grads) {
            (AggregatorParams::Mean, AggCache::Mean { count }, _) => {
                let row = g.to_owned() / *count as f64;
                Array2::from_shape_fn((*count, g.len()), |(_, j)| row[j])
            }
            (AggregatorParams::Attention(p), AggCache::Attention { e, alpha }, AggregatorParams::Attention(gp)) => {
                let scale = (e.ncols() as f64).sqrt();
                let galpha = e.dot(&g);
                let gs = softmax_backward(alpha.view(), galpha.view()) / scale;
                gp.query.scaled_add(1.0, &gs.dot(e));
                let mut ge = Array2::zeros(e.raw_dim());
                for (i, mut row) in ge.rows_mut().into_iter().enumerate() {
                    row.scaled_add(alpha[i], &g);
                    row.scaled_add(gs[i], &p.query);
                }
                ge
            }
            (AggregatorParams::LiteTransformer(p), AggCache::Lite(c), AggregatorParams::LiteTransformer(gp)) => {
                lite_backward(p, c, g, gp)
            }
            _ => panic!("aggregator cache/gradient variant mismatch"),
        }
    }
}

fn flat(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn flat2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn flat_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn flat2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn lite_forward(p: &LiteTransformerParams, e: ArrayView2<'_, f64>) -> Result<(Array1<f64>, AggCache), ReprError> {
    let (count, d) = e.dim();
    if count > p.capacity() {
        return Err(ReprError::TooManySlices {
            count,
            capacity: p.capacity(),
        });
    }
    if d != p.cls.len() {
        return Err(ReprError::ShapeMismatch {
            expected: p.cls.len(),
            actual: d,
        });
    }
    let t = count + 1;
    let mut x0 = p.pos.slice(s![..t, ..]).to_owned();
    x0.row_mut(0).scaled_add(1.0, &p.cls);
    x0.slice_mut(s![1.., ..]).scaled_add(1.0, &e);

    let mut n1 = Array2::zeros((t, d));
    let mut ln1 = Vec::with_capacity(t);
    for (i, row) in x0.rows().into_iter().enumerate() {
        let (y, c) = p.ln1.forward(row);
        n1.row_mut(i).assign(&y);
        ln1.push(c);
    }
    // Only the CLS output is read, so only its query is needed.
    let q0 = p.wq.forward(n1.row(0));
    let k = p.wk.forward_rows(n1.view());
    let v = p.wv.forward_rows(n1.view());
    let dh = d / p.heads;
    let scale = (dh as f64).sqrt();
    let mut o = Array1::zeros(d);
    let mut alpha = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q0.slice(s![h * dh..(h + 1) * dh]);
        let scores = k.slice(cols).dot(&qh) / scale;
        let a = softmax(scores.view());
        o.slice_mut(s![h * dh..(h + 1) * dh]).assign(&a.dot(&v.slice(cols)));
        alpha.push(a);
    }
    let h0 = &x0.row(0) + &p.wo.forward(o.view());
    let (n2, ln2) = p.ln2.forward(h0.view());
    let u = p.ff1.forward(n2.view());
    let a = u.mapv(gelu);
    let y = &h0 + &p.ff2.forward(a.view());
    let cache = LiteCache {
        n1,
        ln1,
        q0,
        k,
        v,
        alpha,
        o,
        n2,
        ln2,
        u,
        a,
    };
    Ok((y, AggCache::Lite(Box::new(cache))))
}

fn lite_backward(p: &LiteTransformerParams, c: &LiteCache, gy: ArrayView1<'_, f64>, g: &mut LiteTransformerParams) -> Array2<f64> {
    let (t, d) = c.n1.dim();
    let dh = d / p.heads;
    let scale = (dh as f64).sqrt();

    let ga = p.ff2.backward(c.a.view(), gy, &mut g.ff2);
    let gu = &ga * &c.u.mapv(gelu_grad);
    let gn2 = p.ff1.backward(c.n2.view(), gu.view(), &mut g.ff1);
    let gh0 = &gy + &p.ln2.backward(&c.ln2, gn2.view(), &mut g.ln2);

    let mut gx0 = Array2::<f64>::zeros((t, d));
    gx0.row_mut(0).scaled_add(1.0, &gh0);
    let go = p.wo.backward(c.o.view(), gh0.view(), &mut g.wo);

    let mut gq0 = Array1::<f64>::zeros(d);
    let mut gk = Array2::<f64>::zeros((t, d));
    let mut gv = Array2::<f64>::zeros((t, d));
    for h in 0..p.heads {
        let r = h * dh..(h + 1) * dh;
        let cols = s![.., r.start..r.end];
        let goh = go.slice(s![r.start..r.end]);
        let alpha = &c.alpha[h];
        let galpha = c.v.slice(cols).dot(&goh);
        for (i, mut row) in gv.slice_mut(cols).rows_mut().into_iter().enumerate() {
            row.scaled_add(alpha[i], &goh);
        }
        let gs = softmax_backward(alpha.view(), galpha.view()) / scale;
        gq0.slice_mut(s![r.start..r.end]).scaled_add(1.0, &gs.dot(&c.k.slice(cols)));
        let qh = c.q0.slice(s![r.start..r.end]);
        for (i, mut row) in gk.slice_mut(cols).rows_mut().into_iter().enumerate() {
            row.scaled_add(gs[i], &qh);
        }
    }
    let mut gn1 = p.wk.backward_rows(c.n1.view(), gk.view(), &mut g.wk);
    gn1 += &p.wv.backward_rows(c.n1.view(), gv.view(), &mut g.wv);
    let gq_in = p.wq.backward(c.n1.row(0), gq0.view(), &mut g.wq);
    gn1.row_mut(0).scaled_add(1.0, &gq_in);
    for i in 0..t {
        let gx = p.ln1.backward(&c.ln1[i], gn1.row(i), &mut g.ln1);
        gx0.row_mut(i).scaled_add(1.0, &gx);
    }
    g.cls.scaled_add(1.0, &gx0.row(0));
    g.pos.slice_mut(s![..t, ..]).scaled_add(1.0, &gx0);
    gx0.slice(s![1.., ..]).to_owned()
}

fn stack(embeddings: &[Embedding]) -> Result<Array2<f64>, ReprError> {
    let first = embeddings.first().ok_or(ReprError::EmptyInput)?;
    let d = first.dim();
    let mut m = Array2::zeros((embeddings.len(), d));
    for (i, e) in embeddings.iter().enumerate() {
        if e.dim() != d {
            return Err(ReprError::ShapeMismatch {
                expected: d,
                actual: e.dim(),
            });
        }
        m.row_mut(i).assign(&e.values);
    }
    Ok(m)
}

/// Column means summed in sorted order, so any row permutation gives the
/// same bits.
fn sorted_column_mean(e: ArrayView2<'_, f64>) -> Array1<f64> {
    let n = e.nrows() as f64;
    let mut buf = Vec::with_capacity(e.nrows());
    e.columns()
        .into_iter()
        .map(|c| {
            buf.clear();
            buf.extend(c.iter().copied());
            buf.sort_unstable_by(f64::total_cmp);
            buf.iter().sum::<f64>() / n
        })
        .collect()
}

pub fn aggregate_mean(embeddings: &[Embedding]) -> Result<Embedding, ReprError> {
    let m = stack(embeddings)?;
    let (out, _) = AggregatorParams::Mean.forward(m.view())?;
    Ok(Embedding::new(out))
}

pub fn aggregate_attention(embeddings: &[Embedding], params: &AttentionPoolParams) -> Result<Embedding, ReprError> {
    let m = stack(embeddings)?;
    let (out, _) = AggregatorParams::Attention(params.clone()).forward(m.view())?;
    Ok(Embedding::new(out))
}

pub fn aggregate_lite_transformer(embeddings: &[Embedding], params: &LiteTransformerParams) -> Result<Embedding, ReprError> {
    let m = stack(embeddings)?;
    let (out, _) = lite_forward(params, m.view())?;
    Ok(Embedding::new(out))
}
