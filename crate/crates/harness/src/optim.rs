//! First-order optimizers over a [`ParamStore`] whose gradient accumulators are filled.

use std::fmt;
use std::str::FromStr;

use efnet_core::nn::ParamStore;

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(HarnessError::Config {
                field: "optimizer".into(),
                msg: format!("expected adamw or sgd, got `{s}`"),
            }),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

pub trait Optimizer {
    /// Applies one update from the accumulated gradients. Parameters without a
    /// gradient accumulator are left alone.
    fn step(&mut self, params: &mut ParamStore<f32>);
}

pub fn make_optimizer(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::AdamW => Box::new(AdamW::new(lr, weight_decay)),
        OptimizerKind::Sgd => Box::new(Sgd::new(lr, 0.9, weight_decay)),
    }
}

/// Adam with decoupled weight decay: `p -= lr·wd·p` first, then the Adam step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut ParamStore<f32>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mut x = *p as f64;
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *p = x as f32;
            }
        }
    }
}

/// Heavy-ball SGD with coupled L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore<f32>) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else { continue };
            let vel = &mut self.velocity[i];
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64 + self.weight_decay * *p as f64;
                vel[j] = self.momentum * vel[j] + g;
                *p = (*p as f64 - self.lr * vel[j]) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use efnet_core::Tensor;

    use super::*;

    fn scalar_store(value: f32, grad: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value)).unwrap();
        s.iter_mut().for_each(|(_, t)| t.accumulate_grad(&[grad]));
        s
    }

    #[test]
    fn adamw_first_step_by_hand() {
        // first step: m̂ = g, v̂ = g², so the Adam part is lr·g/(|g|+eps)
        let mut s = scalar_store(1.0, 1.0);
        AdamW::new(0.1, 0.01).step(&mut s);
        let expected = 1.0 - 0.1 * 0.01 - 0.1 / (1.0 + 1e-8);
        assert!((s.by_name("p").unwrap().item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn adamw_second_step_by_hand() {
        let mut s = scalar_store(0.5, 2.0);
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut s);
        s.zero_grads();
        s.iter_mut().for_each(|(_, t)| t.accumulate_grad(&[-1.0]));
        opt.step(&mut s);
        let m = 0.1 * 2.0 * 0.9 + -0.1;
        let v = 0.001 * 4.0 * 0.999 + 0.001 * 1.0;
        let step2 = 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = 0.5 - 0.01 - step2;
        assert!((s.by_name("p").unwrap().item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn sgd_by_hand() {
        let mut s = scalar_store(2.0, 0.5);
        Sgd::new(0.1, 0.9, 0.0).step(&mut s);
        assert!((s.by_name("p").unwrap().item() - 1.95).abs() < 1e-6);
    }

    #[test]
    fn kind_round_trips() {
        for k in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
            assert_eq!(k.to_string().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!("adam".parse::<OptimizerKind>().is_err());
    }
}
