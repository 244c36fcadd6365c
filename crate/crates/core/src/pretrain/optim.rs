//! Adam with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use ndarray::Array2;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warmup to `base`, then linear decay to zero at `total` steps.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate at a zero-based step index.
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total > self.warmup {
            let remaining = self.total.saturating_sub(step) as f64;
            return self.base * remaining / (self.total - self.warmup) as f64;
        }
        self.base
    }
}

/// Adam state across a fixed, ordered parameter list.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update over every parameter; `params` and `grads` must follow the
    /// construction order.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.dim(), grad.dim(), "gradient shape");
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * *p);
            }
        }
    }
}
