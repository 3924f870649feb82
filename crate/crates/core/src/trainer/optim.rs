use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer over a fixed list of parameter slices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. `params` and `grads` must keep the same order and
    /// lengths across calls.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step);
                let bc2 = 1.0 - self.beta2.powi(self.step);
                for (slot, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                    for i in 0..p.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0];
        opt.update(vec![&mut p], vec![&[4.0, -0.5]]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn both_kinds_minimize_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.05, 0.9, 0.999, 1e-8);
            let mut p = vec![3.0];
            for _ in 0..2000 {
                let g = [2.0 * p[0]];
                opt.update(vec![&mut p], vec![&g]);
            }
            assert!(p[0].abs() < 1e-2, "{kind:?}: {}", p[0]);
        }
    }
}
