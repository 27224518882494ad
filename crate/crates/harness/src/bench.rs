//! Clustering versus pooling downsampling cost across token counts.

use std::fmt;
use std::time::Instant;

use efnet_core::dbtc::{encode_positions, grid_coords, DbtcLayer, PixelCoordEncoding, TokenSet};
use efnet_core::nn::ParamStore;
use efnet_core::pipeline::{DownsampleMode, ModelConfig};
use efnet_core::{ops, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: DownsampleMode,
    pub tokens: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Best wall-clock time over the repetitions, in seconds.
    pub seconds: f64,
    /// Analytic multiply-add count of the downsampling step.
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub tau: f64,
    pub k: usize,
    pub ratio: f64,
    pub channels: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

/// Multiply-adds of one clustering downsample of `n` tokens with `c` channels:
/// pairwise distances, k-nearest densities, separation scan, assignment,
/// merging, and the refinement projections plus attention.
pub fn dbtc_ops(n: usize, c: usize, k: usize, ratio: f64) -> u64 {
    let (n, c, k) = (n as u64, c as u64, k.min(n.saturating_sub(1)).max(1) as u64);
    let m = ((ratio * n as f64).ceil() as u64).clamp(1, n);
    let distance = n * (n - 1) / 2 * (c + 2);
    let density = n * (n - 1 + k);
    let separation = n * (n - 1) / 2;
    let assign = n * m;
    let merge = n * (c + 1);
    let refine = n * c + 3 * n * c * c + m * c * c + 2 * m * n * c;
    distance + density + separation + assign + merge + refine
}

/// Multiply-adds of a 2×2 mean pool of an `h×w` map with `c` channels.
pub fn pool_ops(h: usize, w: usize, c: usize) -> u64 {
    (h * w * c + h.div_ceil(2) * w.div_ceil(2) * c) as u64
}

/// Grid of about `n` cells: `h = ⌊√n⌋`, `w = ⌈n/h⌉`.
fn grid_for(n: usize) -> (usize, usize) {
    let h = (n as f64).sqrt().floor().max(1.0) as usize;
    (h, n.div_ceil(h))
}

fn best_of(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times stage-1 style downsampling (τ, k and ratio from the first clustering
/// stage of `cfg`) on random tokens of width `cfg.channels[0]`.
///
/// With `timed == false` every `seconds` field is zero, which makes the report
/// fully deterministic.
pub fn bench(cfg: &ModelConfig, sizes: &[usize], repeats: usize, timed: bool) -> Result<BenchReport> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(HarnessError::contract("sizes must be positive"));
    }
    let c = cfg.channels[0];
    let dcfg = cfg.dbtc(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let layer = DbtcLayer::new(&mut store, &mut rng, "bench", c)?;
    let repeats = repeats.max(1);
    let mut rows = Vec::new();
    for &n in sizes {
        let (h, w) = grid_for(n);
        let tokens = h * w;
        let x = Tensor::<f32>::randn(&[tokens, c], 1.0, &mut rng);
        let map = ops::transpose(&x)?.reshape(&[c, h, w])?;

        let ts = TokenSet::from_grid(x.clone(), h, w)?;
        let spatial = encode_positions(&ts.coords, cfg.position, &PixelCoordEncoding::default());
        let coords: Tensor<f32> = grid_coords(h, w);
        let dbtc_secs = if timed {
            best_of(repeats, || {
                let mut g = Graph::new();
                let b = store.bind(&mut g);
                let xv = g.constant(x.clone());
                layer.forward(&mut g, &b, xv, &coords, &spatial, &dcfg)?;
                Ok(())
            })?
        } else {
            0.0
        };
        let pool_secs = if timed {
            best_of(repeats, || {
                ops::mean_pool2x2(&map)?;
                Ok(())
            })?
        } else {
            0.0
        };
        let row = |mode, seconds, ops| BenchRow {
            mode,
            tokens,
            height: h,
            width: w,
            channels: c,
            seconds,
            ops,
        };
        rows.push(row(DownsampleMode::Dbtc, dbtc_secs, dbtc_ops(tokens, c, dcfg.k, dcfg.ratio)));
        rows.push(row(DownsampleMode::Pool, pool_secs, pool_ops(h, w, c)));
    }
    Ok(BenchReport {
        tau: dcfg.tau,
        k: dcfg.k,
        ratio: dcfg.ratio,
        channels: c,
        repeats,
        rows,
    })
}

impl BenchReport {
    pub fn rows_for(&self, mode: DownsampleMode) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    /// Machine-readable rows, one CSV line each after a header.
    pub fn csv(&self) -> String {
        let mut out = String::from("mode,tokens,height,width,channels,tau,k,ratio,ops,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.9}\n",
                r.mode, r.tokens, r.height, r.width, r.channels, self.tau, self.k, self.ratio, r.ops, r.seconds
            ));
        }
        out
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# config: tau = {}, k = {}, ratio = {}, channels = {}, repeats = {}",
            self.tau, self.k, self.ratio, self.channels, self.repeats
        )?;
        writeln!(f, "{:<6} {:>7} {:>9} {:>14} {:>12} {:>12}", "mode", "tokens", "grid", "ops", "seconds", "us/token")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:>7} {:>9} {:>14} {:>12.6} {:>12.4}",
                r.mode.to_string(),
                r.tokens,
                format!("{}x{}", r.height, r.width),
                r.ops,
                r.seconds,
                r.seconds * 1e6 / r.tokens as f64
            )?;
        }
        write!(f, "\n{}", self.csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_mode_is_deterministic_and_echoes_config() {
        let cfg = ModelConfig::default();
        let a = bench(&cfg, &[16, 64, 100], 1, false).unwrap();
        let b = bench(&cfg, &[16, 64, 100], 1, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), b.to_string());
        let text = a.to_string();
        assert!(text.contains("tau = 0.3") && text.contains("k = 5") && text.contains("ratio = 0.25"), "{text}");
        assert_eq!(a.csv().lines().count(), 1 + 6);
    }

    #[test]
    fn clustering_ops_grow_quadratically_and_pooling_linearly() {
        let per_token = |o: u64, n: usize| o as f64 / n as f64;
        let mut prev: Option<(f64, f64)> = None;
        for n in [64, 256, 1024, 4096] {
            let (d, p) = (per_token(dbtc_ops(n, 16, 5, 0.25), n), per_token(pool_ops(grid_for(n).0, grid_for(n).1, 16), n));
            if let Some((pd, pp)) = prev {
                assert!(d > 1.5 * pd);
                assert!((p - pp).abs() < 1e-9);
            }
            prev = Some((d, p));
        }
    }

    #[test]
    fn wall_clock_dbtc_per_token_cost_grows() {
        let r = bench(&ModelConfig::default(), &[64, 1024], 3, true).unwrap();
        let d: Vec<f64> = r.rows_for(DownsampleMode::Dbtc).map(|r| r.seconds / r.tokens as f64).collect();
        assert!(d[1] > d[0], "{r}");
        assert!(r.rows.iter().all(|r| r.seconds > 0.0));
    }

    #[test]
    fn non_square_sizes_use_a_near_square_grid() {
        let r = bench(&ModelConfig::default(), &[10], 1, false).unwrap();
        assert_eq!((r.rows[0].height, r.rows[0].width, r.rows[0].tokens), (3, 4, 12));
        assert!(bench(&ModelConfig::default(), &[0], 1, false).is_err());
    }
}
