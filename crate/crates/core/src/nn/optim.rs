use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;
pub const SGD_MOMENTUM: f32 = 0.9;

/// Per-parameter optimizer state for one flat parameter array.
///
/// Adam keeps first and second moments; SGD with momentum uses only `first`
/// as its velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam => vec![0.0; len],
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self { kind, step: 0, first: vec![0.0; len], second }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - (ADAM_BETA1 as f64).powi(t);
                let c2 = 1.0 - (ADAM_BETA2 as f64).powi(t);
                let step_size = (lr as f64 * c2.sqrt() / c1) as f32;
                let eps_hat = (ADAM_EPSILON as f64 * c2.sqrt()) as f32;
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps_hat);
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = SGD_MOMENTUM * *v - lr * g;
                    *p += *v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_adam_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut s = OptimizerState::new(OptimizerKind::Adam, 3);
        s.step(&mut p, &[0.0; 3], 1e-3);
        assert_eq!(p, before);
    }

    #[test]
    fn first_sgd_step_is_plain_descent() {
        let mut p = vec![1.0f32, 2.0];
        let mut s = OptimizerState::new(OptimizerKind::SgdMomentum, 2);
        s.step(&mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = [0.3f32, -0.7, 1.2, 0.05];
        let mut w = vec![0.0f32; 4];
        let mut s = OptimizerState::new(OptimizerKind::Adam, 4);
        for i in 0..200 {
            let g: Vec<f32> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            let lr = if i < 100 { 0.05 } else { 0.005 };
            s.step(&mut w, &g, lr);
        }
        for (a, b) in w.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
