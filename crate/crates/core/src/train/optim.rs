use super::TrainConfig;
use crate::model::Param;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Adam with decoupled weight decay. Parameters whose gradient is `None`
/// are left untouched, weight decay included.
#[derive(Debug, Clone)]
pub struct AdamW {
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Option<Vec<f32>>], lr: f64) {
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for ((param, grad), state) in params.iter_mut().zip(grads).zip(&mut self.state) {
            let Some(grad) = grad else { continue };
            let n = grad.len();
            let s = state.get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            s.t += 1;
            let c1 = 1.0 - self.beta1.powi(s.t);
            let c2 = 1.0 - self.beta2.powi(s.t);
            let step = (lr / c1) as f32;
            let c2_sqrt = c2.sqrt() as f32;
            let eps = self.eps as f32;
            let decay = (1.0 - lr * self.weight_decay) as f32;
            let data = param.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
                data[i] = data[i] * decay - step * s.m[i] / (s.v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}
