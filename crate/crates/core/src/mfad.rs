//! Multi-scale aggregation decoder.
//!
//! Stage maps are upsampled to the first stage's resolution and stacked along
//! channels. Each pixel is then classified by its Euclidean distance to one
//! learnable anchor per class, with `softmax(−D)` as the class probabilities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Binding, ParamId, ParamStore};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of backbone stages feeding the decoder.
pub const STAGES: usize = 4;
pub const DISTANCE_EPS: f64 = 1e-12;
pub const CLASS_TOKEN_STD: f64 = 0.02;

/// One learnable `[K×C_f]` anchor row per class.
#[derive(Debug, Clone)]
pub struct ClassTokens {
    pub tokens: ParamId,
    pub classes: usize,
    pub width: usize,
}

impl ClassTokens {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        classes: usize,
        width: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("classes", format!("need at least 2, got {classes}")));
        }
        let tokens = store.add(format!("{name}.tokens"), Tensor::randn(&[classes, width], CLASS_TOKEN_STD, rng))?;
        Ok(ClassTokens { tokens, classes, width })
    }
}

/// Class probabilities and distances on the decoder grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction<T: Real = f32> {
    /// `[K×H×W]`, summing to one over the class axis.
    pub probs: Tensor<T>,
    /// `[K×H×W]` distance of every pixel to every class anchor.
    pub distances: Tensor<T>,
}

impl<T: Real> SegPrediction<T> {
    /// Most probable class per pixel, lowest index on ties.
    pub fn labels(&self) -> Vec<usize> {
        argmax_axis0(&self.probs)
    }
}

/// Row-major per-pixel argmax over the leading axis of `[K×H×W]`.
pub fn argmax_axis0<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.shape()[0];
    let plane = t.numel() / k;
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if t.data()[c * plane + p] > t.data()[best * plane + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Upsamples each stage map to `h×w` and concatenates along channels.
pub fn aggregate_multiscale_graph<T: Real>(g: &mut Graph<T>, maps: &[Var], h: usize, w: usize) -> Result<Var> {
    if maps.len() != STAGES {
        return Err(Error::contract(
            "aggregate_multiscale",
            format!("expected {STAGES} stage maps, got {}", maps.len()),
        ));
    }
    let mut up = Vec::with_capacity(STAGES);
    for &m in maps {
        up.push(g.upsample_bilinear(m, h, w)?);
    }
    g.concat(&up, 0)
}

pub fn aggregate_multiscale<T: Real>(maps: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
    let out = aggregate_multiscale_graph(&mut g, &vars, h, w)?;
    Ok(g.value(out).clone())
}

/// `[K×H×W]` distances from every pixel of `xf: [C_f×H×W]` to every row of `anchors: [K×C_f]`.
pub fn class_distance_graph<T: Real>(g: &mut Graph<T>, xf: Var, anchors: Var) -> Result<Var> {
    let (c, h, w) = ops::chw("class_distance", g.shape(xf))?;
    let [k, ca] = *g.shape(anchors) else {
        return Err(Error::dim("class_distance", "class tokens must be K×C"));
    };
    if ca != c {
        return Err(Error::dim("class_distance", format!("feature width {c} vs class token width {ca}")));
    }
    let flat = g.reshape(xf, &[c, h * w])?;
    let pixels = g.transpose(flat)?;
    let d = g.pairwise_distance(anchors, pixels, DISTANCE_EPS)?;
    g.reshape(d, &[k, h, w])
}

pub fn class_distance<T: Real>(xf: &Tensor<T>, anchors: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, a) = (g.constant(xf.clone()), g.constant(anchors.clone()));
    let d = class_distance_graph(&mut g, x, a)?;
    Ok(g.value(d).clone())
}

/// Per-pixel `softmax(−D)` over the class axis of `[K×H×W]`.
pub fn predict_graph<T: Real>(g: &mut Graph<T>, dists: Var) -> Result<Var> {
    let shape = g.shape(dists).to_vec();
    let k = shape[0];
    let plane = shape[1..].iter().product();
    let neg = g.scale(dists, -1.0);
    let flat = g.reshape(neg, &[k, plane])?;
    let cols = g.transpose(flat)?;
    let probs = g.softmax_rows(cols);
    let back = g.transpose(probs)?;
    g.reshape(back, &shape)
}

pub fn predict<T: Real>(dists: &Tensor<T>) -> Result<SegPrediction<T>> {
    let mut g = Graph::new();
    let d = g.constant(dists.clone());
    let p = predict_graph(&mut g, d)?;
    Ok(SegPrediction {
        probs: g.value(p).clone(),
        distances: dists.clone(),
    })
}

/// Euclidean class-token head over an aggregated feature map.
pub fn decode_graph<T: Real>(g: &mut Graph<T>, b: &Binding, xf: Var, ct: &ClassTokens) -> Result<(Var, Var)> {
    let d = class_distance_graph(g, xf, b[ct.tokens])?;
    let p = predict_graph(g, d)?;
    Ok((d, p))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn aggregate_examples() {
        let maps: Vec<Tensor<f64>> = (1..=4).map(|i| randn(&[i, 3, 3], i as u64)).collect();
        let out = aggregate_multiscale(&maps, 3, 3).unwrap();
        let refs: Vec<&Tensor<f64>> = maps.iter().collect();
        assert_eq!(out, ops::concat(&refs, 0).unwrap());

        let consts: Vec<Tensor<f64>> = [(1.0, 4), (2.0, 2), (3.0, 1), (4.0, 1)]
            .iter()
            .map(|&(v, s)| Tensor::full(&[1, s, s], v))
            .collect();
        let out = aggregate_multiscale(&consts, 4, 4).unwrap();
        for p in 0..16 {
            let feats: Vec<f64> = (0..4).map(|c| out.data()[c * 16 + p]).collect();
            assert_eq!(feats, vec![1.0, 2.0, 3.0, 4.0]);
        }

        assert!(matches!(aggregate_multiscale(&maps[..3], 3, 3), Err(Error::Contract { .. })));
    }

    #[test]
    fn aggregate_matches_loop_composition() {
        let maps = [randn(&[2, 8, 8], 1), randn(&[3, 4, 4], 2), randn(&[1, 2, 2], 3), randn(&[2, 1, 1], 4)];
        let out = aggregate_multiscale(&maps, 8, 8).unwrap();
        assert_eq!(out.shape(), &[8, 8, 8]);
        // corner-aligned bilinear sampling written out directly
        let sample = |m: &Tensor<f64>, ch: usize, y: usize, x: usize| {
            let (h, w) = (m.shape()[1], m.shape()[2]);
            let pos = |o: usize, src: usize| if src == 1 { 0.0 } else { o as f64 * (src - 1) as f64 / 7.0 };
            let (fy, fx) = (pos(y, h), pos(x, w));
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
            let v = |r: usize, c: usize| m.get(&[ch, r, c]);
            (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1)) + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1))
        };
        let mut row = 0;
        for m in &maps {
            for ch in 0..m.shape()[0] {
                for y in 0..8 {
                    for x in 0..8 {
                        assert!((out.get(&[row, y, x]) - sample(m, ch, y, x)).abs() < 1e-6);
                    }
                }
                row += 1;
            }
        }
    }

    #[test]
    fn distance_examples() {
        let xf = Tensor::<f64>::from_f64(&[1, 1, 1], &[1.0]).unwrap();
        let anchors = Tensor::from_f64(&[2, 1], &[0.0, 3.0]).unwrap();
        let d = class_distance(&xf, &anchors).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-9 && (d.data()[1] - 2.0).abs() < 1e-9);

        let same = Tensor::<f64>::from_f64(&[2, 1, 1], &[0.5, -1.0]).unwrap();
        let d = class_distance(&same, &Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap()).unwrap();
        assert!(d.data()[0] < 1e-5);

        assert!(matches!(
            class_distance(&same, &Tensor::zeros(&[2, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn distance_matches_loop_oracle() {
        let xf = randn(&[5, 3, 4], 7);
        let anchors = randn(&[3, 5], 8);
        let d = class_distance(&xf, &anchors).unwrap();
        for k in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let s: f64 = (0..5).map(|c| (anchors.get(&[k, c]) - xf.get(&[c, y, x])).powi(2)).sum();
                    assert!((d.get(&[k, y, x]) - s.sqrt()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn predict_examples() {
        let d = Tensor::<f64>::from_f64(&[2, 1, 1], &[0.0, 3f64.ln()]).unwrap();
        let p = predict(&d).unwrap();
        assert!((p.probs.data()[0] - 0.75).abs() < 1e-12 && (p.probs.data()[1] - 0.25).abs() < 1e-12);

        let p = predict(&Tensor::<f64>::full(&[4, 2, 2], 1.7)).unwrap();
        assert!(p.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn argmax_is_argmin_and_probs_sum_to_one(seed in 0u64..10_000, k in 2usize..6, shift in -5.0f64..5.0) {
            let d = randn(&[k, 3, 3], seed).map(f64::abs);
            let p = predict(&d).unwrap();
            let neg = d.map(|v| -v);
            prop_assert_eq!(p.labels(), argmax_axis0(&neg));
            for px in 0..9 {
                let s: f64 = (0..k).map(|c| p.probs.data()[c * 9 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            let shifted = predict(&d.map(|v| v + shift)).unwrap();
            prop_assert!(shifted.probs.max_abs_diff(&p.probs) < 1e-9);
        }

        #[test]
        fn translating_everything_keeps_distances(seed in 0u64..10_000) {
            let xf = randn(&[3, 2, 2], seed);
            let anchors = randn(&[2, 3], seed + 1);
            let t = randn(&[3], seed + 2);
            let moved_x = ops::add_broadcast(&xf, &t, 0).unwrap();
            let moved_a = ops::add_broadcast(&anchors, &t, 1).unwrap();
            let a = class_distance(&xf, &anchors).unwrap();
            let b = class_distance(&moved_x, &moved_a).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
