//! Mini-batch training and evaluation of a [`Model`] on labeled samples.

use efnet_core::pipeline::Model;
use efnet_core::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{HarnessError, Result};
use crate::loss::cross_entropy_graph;
use crate::metrics::{Confusion, MetricReport};
use crate::optim::{make_optimizer, OptimizerKind};

pub const TRAIN_KEYS: &[&str] = &["steps", "batch", "lr", "weight_decay", "optimizer", "seed", "holdout"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Seeds parameter initialization and the batch order.
    pub seed: u64,
    /// Fraction of samples, taken from the end, held out for evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 4,
            lr: 6e-4,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            holdout: 0.2,
        }
    }
}

fn field(key: &str, value: &str, expected: &str) -> HarnessError {
    HarnessError::Config {
        field: key.into(),
        msg: format!("expected {expected}, got `{value}`"),
    }
}

impl TrainConfig {
    /// Sets one field from text. `Ok(false)` means the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "steps" => self.steps = v.parse().map_err(|_| field(key, v, "a step count"))?,
            "batch" => self.batch = v.parse().map_err(|_| field(key, v, "a batch size"))?,
            "lr" => self.lr = v.parse().map_err(|_| field(key, v, "a learning rate"))?,
            "weight_decay" => self.weight_decay = v.parse().map_err(|_| field(key, v, "a decay factor"))?,
            "optimizer" => self.optimizer = v.parse()?,
            "seed" => self.seed = v.parse().map_err(|_| field(key, v, "an unsigned seed"))?,
            "holdout" => self.holdout = v.parse().map_err(|_| field(key, v, "a fraction"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, msg: &str| {
            Err(HarnessError::Config {
                field: f.into(),
                msg: msg.into(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        // zero is allowed: it freezes the parameters
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "steps = {}\nbatch = {}\nlr = {}\nweight_decay = {}\noptimizer = {}\nseed = {}\nholdout = {}\n",
            self.steps, self.batch, self.lr, self.weight_decay, self.optimizer, self.seed, self.holdout
        )
    }
}

fn check_sample(model: &Model, s: &Sample) -> Result<()> {
    let cfg = &model.config;
    if (s.height(), s.width()) != (cfg.height, cfg.width) {
        return Err(HarnessError::contract(format!(
            "sample is {}x{} but the model expects {}x{}",
            s.height(),
            s.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

/// Runs `tc.steps` optimizer steps and returns the per-step mean batch loss.
///
/// Batches walk a shuffled order of `data`, reshuffled every epoch. `on_step`
/// sees each step index and loss as it is recorded.
pub fn train(model: &mut Model, data: &[Sample], tc: &TrainConfig, mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(HarnessError::contract("no training samples"));
    }
    for s in data {
        check_sample(model, s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = make_optimizer(tc.optimizer, tc.lr, tc.weight_decay);
    let mut curve = Vec::with_capacity(tc.steps);
    let weight = 1.0 / tc.batch as f64;

    for step in 0..tc.steps {
        model.params.zero_grads();
        let mut total = 0.0;
        for _ in 0..tc.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &data[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let out = model.forward_graph(&mut g, &b, &s.rgb, &s.thermal)?;
            let loss = cross_entropy_graph(&mut g, out.full_probs, &s.labels)?;
            total += g.value(loss).item() as f64;
            let scaled = g.scale(loss, weight);
            g.backward(scaled)?;
            model.params.accumulate_grads(&g, &b);
        }
        let mean = total * weight;
        if !mean.is_finite() {
            return Err(HarnessError::Diverged { step, loss: mean });
        }
        opt.step(&mut model.params);
        curve.push(mean);
        on_step(step, mean);
    }
    model.params.zero_grads();
    Ok(curve)
}

/// Per-pixel predicted classes at input resolution.
pub fn predict_labels(model: &Model, s: &Sample) -> Result<Vec<usize>> {
    check_sample(model, s)?;
    Ok(model.forward(&s.rgb, &s.thermal)?.labels())
}

/// Metrics over `samples`, optionally restricted per sample by `mask`.
pub fn evaluate_masked(model: &Model, samples: &[Sample], mask: impl Fn(&Sample) -> Option<Vec<bool>>) -> Result<MetricReport> {
    let mut cm = Confusion::new(model.config.classes);
    for s in samples {
        let pred = predict_labels(model, s)?;
        cm.add(&pred, &s.labels, mask(s).as_deref())?;
    }
    Ok(cm.report())
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    evaluate_masked(model, samples, |_| None)
}

/// Splits off the last `holdout` fraction (at least one sample when positive).
pub fn split_holdout(data: &[Sample], holdout: f64) -> (&[Sample], &[Sample]) {
    let n_test = if holdout > 0.0 { ((data.len() as f64 * holdout).round() as usize).clamp(1, data.len().saturating_sub(1)) } else { 0 };
    data.split_at(data.len() - n_test)
}

/// Trains on the leading samples and evaluates on the held-out tail.
pub fn train_toy(model: &mut Model, data: &[Sample], tc: &TrainConfig) -> Result<MetricReport> {
    tc.validate()?;
    let (train_set, test_set) = split_holdout(data, tc.holdout);
    if test_set.is_empty() {
        return Err(HarnessError::contract("holdout split left no evaluation samples"));
    }
    let curve = train(model, train_set, tc, |_, _| {})?;
    let mut report = evaluate(model, test_set)?;
    report.loss_curve = curve;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use efnet_core::pipeline::{build_model, ModelConfig};

    use super::*;
    use crate::data::gen_synthetic;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: [8, 8, 8, 8],
            height: 16,
            width: 16,
            window: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_set_and_validate() {
        let mut tc = TrainConfig::default();
        assert!(tc.set("lr", "0.01").unwrap());
        assert!(tc.set("optimizer", "sgd").unwrap());
        assert!(!tc.set("channels", "1").unwrap());
        assert_eq!((tc.lr, tc.optimizer), (0.01, OptimizerKind::Sgd));
        match tc.set("batch", "x") {
            Err(HarnessError::Config { field, .. }) => assert_eq!(field, "batch"),
            e => panic!("{e:?}"),
        }
        tc.batch = 0;
        assert!(matches!(tc.validate(), Err(HarnessError::Config { field, .. }) if field == "batch"));
        let neg = TrainConfig { lr: -1.0, ..TrainConfig::default() };
        assert!(matches!(neg.validate(), Err(HarnessError::Config { field, .. }) if field == "lr"));
        let none = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(matches!(none.validate(), Err(HarnessError::Config { field, .. }) if field == "steps"));
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let data = gen_synthetic(6, 16, 16, 3, 1).unwrap();
        let tc = TrainConfig { steps: 12, batch: 2, lr: 3e-3, ..TrainConfig::default() };
        let run = || {
            let mut m = build_model::<f32>(&tiny(), 5).unwrap();
            let curve = train(&mut m, &data, &tc, |_, _| {}).unwrap();
            (curve, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|l| l.is_finite()));
        let head: f64 = a[..3].iter().sum();
        let tail: f64 = a[a.len() - 3..].iter().sum();
        assert!(tail < head, "{a:?}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = gen_synthetic(1, 16, 16, 3, 2).unwrap();
        let mut m = build_model::<f32>(&tiny(), 5).unwrap();
        let before = m.params.clone();
        let tc = TrainConfig { steps: 5, batch: 1, lr: 0.0, ..TrainConfig::default() };
        let curve = train(&mut m, &data, &tc, |_, _| {}).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(curve.iter().all(|&l| l == curve[0]), "{curve:?}");
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let data = gen_synthetic(2, 16, 16, 3, 1).unwrap();
        let mut m = build_model::<f32>(&tiny(), 5).unwrap();
        m.params.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = f32::NAN));
        let tc = TrainConfig { steps: 3, batch: 1, ..TrainConfig::default() };
        let r = train(&mut m, &data, &tc, |_, _| {});
        assert!(matches!(r, Err(HarnessError::Diverged { step: 0, .. })), "{r:?}");
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let data = gen_synthetic(2, 32, 32, 3, 1).unwrap();
        let mut m = build_model::<f32>(&tiny(), 5).unwrap();
        assert!(matches!(train(&mut m, &data, &TrainConfig::default(), |_, _| {}), Err(HarnessError::Contract(_))));
    }

    #[test]
    fn holdout_split_takes_the_tail() {
        let data = gen_synthetic(10, 8, 8, 2, 1).unwrap();
        let (a, b) = split_holdout(&data, 0.2);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(b[0], data[8]);
        assert_eq!(split_holdout(&data, 0.0).1.len(), 0);
    }
}
