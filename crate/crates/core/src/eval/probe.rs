//! Class-weighted multinomial logistic regression on frozen embeddings.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::labeler::ActivityLabel;

pub const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-6,
            max_iter: 5000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// (3, d)
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub c: f64,
    pub class_weights: [f64; CLASSES],
    /// Objective value after each accepted iteration, starting at zero init.
    pub trace: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

/// `N / (3 n_c)` per class.
pub fn balanced_class_weights(labels: &[ActivityLabel]) -> Result<[f64; CLASSES], EvalError> {
    let mut counts = [0usize; CLASSES];
    for l in labels {
        counts[l.ordinal()] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(EvalError::DegenerateLabels(ActivityLabel::ALL[c]));
    }
    let n = labels.len() as f64;
    Ok(counts.map(|c| n / (CLASSES as f64 * c as f64)))
}

struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    y: Vec<usize>,
    sample_w: Array1<f64>,
    c: f64,
    d: usize,
}

impl Problem<'_> {
    /// Packed parameters: 3*d weights (row-major) then 3 biases.
    fn unpack(&self, theta: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let k = CLASSES * self.d;
        let w = theta.slice(ndarray::s![..k]).to_owned().into_shape_with_order((CLASSES, self.d)).expect("shape");
        (w, theta.slice(ndarray::s![k..]).to_owned())
    }

    fn line(&self, theta: &Array1<f64>, dir: &Array1<f64>) -> LineSearch {
        let (w, b) = self.unpack(theta);
        let (dw, db) = self.unpack(dir);
        let mut probs = self.x.dot(&w.t()) + &b;
        for mut row in probs.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        LineSearch {
            probs,
            dz: self.x.dot(&dw.t()) + &db,
            y: self.y.clone(),
            sample_w: self.sample_w.clone(),
            reg_lin: (&w * &dw).sum() / self.c,
            reg_quad: 0.5 * dw.iter().map(|v| v * v).sum::<f64>() / self.c,
        }
    }

    fn objective(&self, theta: &Array1<f64>) -> (f64, Array1<f64>) {
        let (w, b) = self.unpack(theta);
        let logits = self.x.dot(&w.t()) + &b;
        let mut f = 0.5 * w.iter().map(|v| v * v).sum::<f64>() / self.c;
        let mut gl = Array2::<f64>::zeros(logits.raw_dim());
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let sw = self.sample_w[i];
            f += sw * (lse - row[self.y[i]]);
            for k in 0..CLASSES {
                gl[[i, k]] = sw * ((row[k] - lse).exp() - if k == self.y[i] { 1.0 } else { 0.0 });
            }
        }
        let gw = gl.t().dot(&self.x) + &(&w / self.c);
        let gb = gl.sum_axis(Axis(0));
        let mut g = Array1::zeros(theta.len());
        g.slice_mut(ndarray::s![..CLASSES * self.d]).assign(&Array1::from_iter(gw.iter().copied()));
        g.slice_mut(ndarray::s![CLASSES * self.d..]).assign(&gb);
        (f, g)
    }
}

/// Objective change along a fixed direction, evaluated without forming the
/// objective itself so that changes far below its rounding stay resolvable.
struct LineSearch {
    probs: Array2<f64>,
    dz: Array2<f64>,
    y: Vec<usize>,
    sample_w: Array1<f64>,
    /// `W . D / C` and `|D|^2 / (2C)` over the weight block.
    reg_lin: f64,
    reg_quad: f64,
}

impl LineSearch {
    fn delta(&self, step: f64) -> f64 {
        let mut total = (step * self.reg_lin + step * step * self.reg_quad, 0.0);
        let mut add = |v: f64| {
            // Neumaier summation
            let t = total.0 + v;
            total.1 += if total.0.abs() >= v.abs() { (total.0 - t) + v } else { (v - t) + total.0 };
            total.0 = t;
        };
        for (i, (p, dz)) in self.probs.outer_iter().zip(self.dz.outer_iter()).enumerate() {
            let shift = dz.mapv(|v| v * step);
            let big = shift.iter().any(|v| v.abs() > 1.0);
            let dlse = if big {
                let m = shift.iter().zip(p).fold(f64::NEG_INFINITY, |a, (&s, &q)| a.max(s + q.ln()));
                m + shift.iter().zip(p).map(|(&s, &q)| (s + q.ln() - m).exp()).sum::<f64>().ln()
            } else {
                shift.iter().zip(p).map(|(&s, &q)| q * s.exp_m1()).sum::<f64>().ln_1p()
            };
            add(self.sample_w[i] * (dlse - shift[self.y[i]]));
        }
        total.0 + total.1
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Minimizes `sum_i w_{y_i} CE_i + |W|^2 / (2C)` from zero with L-BFGS and
/// an Armijo backtracking line search. Bias is not penalized.
pub fn probe_fit(
    embeddings: ArrayView2<'_, f64>,
    labels: &[ActivityLabel],
    cfg: &ProbeConfig,
) -> Result<ProbeModel, EvalError> {
    let (n, d) = embeddings.dim();
    if n != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if d == 0 {
        return Err(EvalError::ShapeMismatch("zero-dimensional embeddings".into()));
    }
    let class_weights = balanced_class_weights(labels)?;
    let y: Vec<usize> = labels.iter().map(|l| l.ordinal()).collect();
    let problem = Problem {
        x: embeddings,
        sample_w: y.iter().map(|&c| class_weights[c]).collect(),
        y,
        c: cfg.c,
        d,
    };
    let mut theta = Array1::<f64>::zeros(CLASSES * d + CLASSES);
    let (mut f, mut g) = problem.objective(&theta);
    let mut trace = vec![f];
    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut converged = norm(&g) <= cfg.tolerance;
    for _ in 0..cfg.max_iter {
        if converged {
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q.scaled_add(-a, yv);
            alphas.push(a);
        }
        if let Some((s, yv, _)) = history.back() {
            q *= s.dot(yv) / yv.dot(yv);
        } else {
            q /= norm(&g).max(1.0);
        }
        for ((s, yv, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * yv.dot(&q);
            q.scaled_add(a - b, s);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -g.clone();
            slope = -g.dot(&g);
        }
        let line = problem.line(&theta, &dir);
        let mut step = 1.0;
        let accepted = loop {
            let delta = line.delta(step);
            if delta <= 1e-4 * step * slope {
                let cand = &theta + &(&dir * step);
                let (_, gc) = problem.objective(&cand);
                break Some((cand, f + delta, gc));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let s = &cand - &theta;
        let yv = &gc - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            history.push_back((s, yv, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        theta = cand;
        f = fc;
        g = gc;
        trace.push(f);
        converged = norm(&g) <= cfg.tolerance;
    }
    let (weights, bias) = problem.unpack(&theta);
    Ok(ProbeModel {
        weights,
        bias,
        c: cfg.c,
        class_weights,
        trace,
        grad_norm: norm(&g),
        converged,
    })
}

impl ProbeModel {
    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> ActivityLabel {
        let l = self.logits(x);
        let best = (0..CLASSES).fold(0, |b, k| if l[k] > l[b] { k } else { b });
        ActivityLabel::ALL[best]
    }

    pub fn predict_all(&self, x: ArrayView2<'_, f64>) -> Vec<ActivityLabel> {
        x.rows().into_iter().map(|r| self.predict(r)).collect()
    }
}
