//! Pixel-wise cross-entropy on class probabilities.

use efnet_core::{Graph, Real, Tensor, Var};

use crate::data::IGNORE;
use crate::error::{HarnessError, Result};

/// Probabilities are clamped here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Flat indices of `p[label, pixel]` for every labeled pixel.
fn picks(shape: &[usize], labels: &[u8]) -> Result<Vec<Option<usize>>> {
    let k = shape[0];
    let plane: usize = shape[1..].iter().product();
    if labels.len() != plane {
        return Err(HarnessError::contract(format!("{} labels for {plane} pixels", labels.len())));
    }
    let mut out = Vec::with_capacity(plane);
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= k {
            return Err(HarnessError::contract(format!("label {l} at pixel {p} outside {k} classes")));
        }
        out.push(Some(l as usize * plane + p));
    }
    if out.is_empty() {
        return Err(HarnessError::contract("every pixel is ignored"));
    }
    Ok(out)
}

/// Mean over labeled pixels of `−ln max(p[true class], 1e-12)` for `probs: [K×H×W]`.
pub fn cross_entropy_graph<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let idx = picks(g.shape(probs), labels)?;
    let n = idx.len();
    let picked = g.index_select(probs, idx, &[n])?;
    let logp = g.ln(picked, LOG_FLOOR);
    let mean = g.mean(logp);
    Ok(g.scale(mean, -1.0))
}

pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = cross_entropy_graph(&mut g, p, labels)?;
    Ok(g.value(loss).item().as_f64())
}

#[cfg(test)]
mod tests {
    use efnet_core::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn examples() {
        let half = Tensor::<f64>::full(&[2, 2, 2], 0.5);
        assert!((cross_entropy(&half, &[0, 1, 1, IGNORE]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let onehot = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(cross_entropy(&onehot, &[0, 1]).unwrap().abs() < 1e-12);
        let wrong = cross_entropy(&onehot, &[1, 0]).unwrap();
        assert!((wrong - (-LOG_FLOOR.ln())).abs() < 1e-9);

        assert!(matches!(cross_entropy(&half, &[IGNORE; 4]), Err(HarnessError::Contract(_))));
        assert!(matches!(cross_entropy(&half, &[2, 0, 0, 0]), Err(HarnessError::Contract(_))));
        assert!(matches!(cross_entropy(&half, &[0; 3]), Err(HarnessError::Contract(_))));
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::<f64>::uniform(&[3, 4, 4], 0.01, 1.0, &mut rng);
        let probs = efnet_core::ops::normalize_axis0(&raw);
        let labels: Vec<u8> = (0..16).map(|p| if p % 5 == 0 { IGNORE } else { (p % 3) as u8 }).collect();
        let mut total = 0.0;
        let mut n = 0.0;
        for (p, &l) in labels.iter().enumerate() {
            if l != IGNORE {
                total -= probs.data()[l as usize * 16 + p].ln();
                n += 1.0;
            }
        }
        assert!((cross_entropy(&probs, &labels).unwrap() - total / n).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Tensor::<f64>::uniform(&[3, 2, 3], 0.2, 1.0, &mut rng);
        let labels = [0u8, 2, IGNORE, 1, 1, 0];
        let report = grad_check(
            |g, v| {
                let p = g.normalize_axis0(v[0]);
                cross_entropy_graph(g, p, &labels).map_err(|e| efnet_core::Error::config("loss", e.to_string()))
            },
            &[raw],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
