//! Confusion-matrix segmentation metrics accumulated over a whole dataset.

use std::fmt;

use crate::data::IGNORE;
use crate::error::{HarnessError, Result};

/// `counts[truth * k + predicted]` over labeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { k, counts: vec![0; k * k] }
    }

    /// Adds one image; pixels outside `mask` (when given) are skipped.
    pub fn add(&mut self, pred: &[usize], labels: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != labels.len() || mask.is_some_and(|m| m.len() != labels.len()) {
            return Err(HarnessError::contract(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        for (p, (&pr, &l)) in pred.iter().zip(labels).enumerate() {
            if l == IGNORE || mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let (t, pr) = (l as usize, pr);
            if t >= self.k || pr >= self.k {
                return Err(HarnessError::contract(format!("class out of range at pixel {p}")));
            }
            self.counts[t * self.k + pr] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let k = self.k;
        let at = |t: usize, p: usize| self.counts[t * k + p] as f64;
        let mut iou = Vec::with_capacity(k);
        let mut acc = Vec::with_capacity(k);
        for c in 0..k {
            let tp = at(c, c);
            let truth: f64 = (0..k).map(|p| at(c, p)).sum();
            let predicted: f64 = (0..k).map(|t| at(t, c)).sum();
            let union = truth + predicted - tp;
            iou.push((union > 0.0).then(|| tp / union));
            acc.push((truth > 0.0).then(|| tp / truth));
        }
        MetricReport {
            miou: mean_present(&iou),
            macc: mean_present(&acc),
            iou,
            acc,
            loss_curve: Vec::new(),
        }
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Per-class and mean scores. `None` marks a class excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// IoU per class; `None` when the class is absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Pixel accuracy per class; `None` when the class is absent from the truth.
    pub acc: Vec<Option<f64>>,
    pub macc: f64,
    pub loss_curve: Vec<f64>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  iou     acc")?;
        let show = |v: Option<f64>| v.map_or("  -   ".to_string(), |x| format!("{x:.4}"));
        for (c, (i, a)) in self.iou.iter().zip(&self.acc).enumerate() {
            writeln!(f, "{c:<5}  {}  {}", show(*i), show(*a))?;
        }
        write!(f, "mIoU {:.4}  mAcc {:.4}", self.miou, self.macc)?;
        if let (Some(first), Some(last)) = (self.loss_curve.first(), self.loss_curve.last()) {
            write!(f, "  loss {first:.4} -> {last:.4} over {} steps", self.loss_curve.len())?;
        }
        Ok(())
    }
}

/// Accumulates every image into one confusion matrix.
pub fn eval_miou(preds: &[Vec<usize>], labels: &[Vec<u8>], k: usize) -> Result<MetricReport> {
    if preds.len() != labels.len() {
        return Err(HarnessError::contract(format!("{} predictions for {} label maps", preds.len(), labels.len())));
    }
    let mut cm = Confusion::new(k);
    for (p, l) in preds.iter().zip(labels) {
        cm.add(p, l, None)?;
    }
    Ok(cm.report())
}
