use super::model::ModelParams;

/// Adam moments with decoupled weight decay. Decay skips biases,
/// normalization parameters and the temperature.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub fn decays(name: &str) -> bool {
    !(name == "log_tau" || name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let grads = grads.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        for (k, ((name, p), (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let decay = if decays(&name) { self.lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= decay * p[i] + self.lr * update;
            }
        }
    }
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::model::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            dim: 4,
            vision_in: 4,
            text_in: 4,
            vision_rank: 1,
            text_rank: 1,
            projector_hidden: 4,
            ..Default::default()
        };
        ModelParams::init(&cfg, 1).unwrap()
    }

    #[test]
    fn clipping() {
        let p = tiny();
        let mut g = p.zeros_like();
        g.log_tau = 3.0;
        g.vision_lora.b[[0, 0]] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = p.zeros_like();
        small.log_tau = 0.5;
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.log_tau, 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.log_tau = 0.25;
        g.projector.fc1.bias[0] = -2.0;
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut p, &g);
        assert!((before.log_tau - p.log_tau - 1e-3).abs() < 1e-9);
        assert!((p.projector.fc1.bias[0] - 1e-3).abs() < 1e-9);
        assert_eq!(p.vision_lora.a, before.vision_lora.a);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, &g);
        assert!((p.vision_lora.a[[0, 0]] - before.vision_lora.a[[0, 0]] * 0.95).abs() < 1e-15);
        assert_eq!(p.log_tau, before.log_tau);
        assert_eq!(p.projector.ln.gamma, before.projector.ln.gamma);
    }
}
