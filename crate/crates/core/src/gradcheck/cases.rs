//! Catalog of gradient checks covering every differentiable primitive and the
//! composed model paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dbtc::importance_attention_graph;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::mfad;
use crate::mif::Mif;
use crate::nn::{Binding, ParamStore};
use crate::tensor::Tensor;

use super::{grad_check, GradCheckReport};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + Send + Sync>;
type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// One named scalar function of random inputs.
pub struct GradCase {
    pub name: &'static str,
    inputs: Inputs,
    body: Body,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + Send + Sync + 'static,
        body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name,
            inputs: Box::new(inputs),
            body: Box::new(body),
        }
    }

    /// Checks the case on inputs drawn from `seed`.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (self.inputs)(&mut rng);
        grad_check(|g, v| (self.body)(g, v), &inputs, STEP)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Strictly positive entries in `[0.5, 2]`.
fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Entries at least 0.1 away from zero, so kinks stay out of the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| v + 0.1 * v.signum())
}

/// Fixed non-uniform weighted sum, so every output entry matters differently.
pub fn project(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| (1.3 * i as f64 + 0.7).sin());
    let w = g.constant(w);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

macro_rules! unary {
    ($name:literal, $gen:ident, $shape:expr, |$g:ident, $x:ident| $e:expr) => {
        GradCase::new(
            $name,
            |rng| vec![$gen(rng, &$shape)],
            |$g, v| {
                let $x = v[0];
                let out = $e;
                project($g, out)
            },
        )
    };
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("add", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o)
        }),
        GradCase::new("sub", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o)
        }),
        GradCase::new("mul", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o)
        }),
        unary!("scale", randn, [3, 4], |g, x| g.scale(x, -1.7)),
        unary!("add_scalar", randn, [5], |g, x| g.add_scalar(x, 2.5)),
        GradCase::new("add_broadcast", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[3])], |g, v| {
            let o = g.add_broadcast(v[0], v[1], 1)?;
            project(g, o)
        }),
        GradCase::new("mul_broadcast", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2])], |g, v| {
            let o = g.mul_broadcast(v[0], v[1], 0)?;
            project(g, o)
        }),
        GradCase::new("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o)
        }),
        GradCase::new("matmul_batched", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o)
        }),
        GradCase::new(
            "affine",
            |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])],
            |g, v| {
                let o = g.affine(v[0], v[1], Some(v[2]))?;
                project(g, o)
            },
        ),
        unary!("reshape_transpose", randn, [2, 3, 4], |g, x| {
            let r = g.reshape(x, &[6, 4])?;
            g.transpose(r)?
        }),
        unary!("index_select", randn, [3, 4], |g, x| {
            let idx = vec![Some(5), None, Some(0), Some(5), Some(11), None];
            g.index_select(x, idx, &[2, 3])?
        }),
        unary!("gather_rows", randn, [4, 3], |g, x| g.gather_rows(x, &[3, 0, 3, 1])?),
        GradCase::new("concat", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            project(g, o)
        }),
        unary!("sigmoid", randn, [3, 4], |g, x| g.sigmoid(x)),
        unary!("relu", off_zero, [3, 4], |g, x| g.relu(x)),
        unary!("exp", randn, [3, 4], |g, x| g.exp(x)),
        unary!("ln", positive, [3, 4], |g, x| g.ln(x, 1e-12)),
        unary!("softmax_rows", randn, [3, 5], |g, x| g.softmax_rows(x)),
        GradCase::new(
            "layer_norm",
            |r| vec![randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])],
            |g, v| {
                let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, o)
            },
        ),
        unary!("mean_pool2x2", randn, [2, 5, 3], |g, x| g.mean_pool2x2(x)?),
        unary!("channel_stats", randn, [3, 4, 4], |g, x| g.channel_stats(x)?),
        unary!("upsample_bilinear", randn, [2, 3, 4], |g, x| g.upsample_bilinear(x, 5, 7)?),
        GradCase::new("segment_merge", |r| vec![randn(r, &[6, 3]), randn(r, &[6])], |g, v| {
            let o = g.segment_merge(v[0], v[1], &[0, 1, 0, 2, 1, 0], 3)?;
            project(g, o)
        }),
        GradCase::new(
            "pairwise_distance",
            |r| vec![randn(r, &[3, 4]), randn(r, &[5, 4])],
            |g, v| {
                let o = g.pairwise_distance(v[0], v[1], 1e-12)?;
                project(g, o)
            },
        ),
        unary!("normalize_axis0", positive, [3, 2, 2], |g, x| g.normalize_axis0(x)),
        GradCase::new("sum", |r| vec![randn(r, &[3, 4])], |g, v| Ok(g.sum(v[0]))),
        GradCase::new("mean", |r| vec![randn(r, &[3, 4])], |g, v| Ok(g.mean(v[0]))),
    ]
}

/// Gate with random (nonzero) output weights so every path carries gradient.
fn gate_fixture(channels: usize, window: usize) -> (Mif, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let mif = Mif::new(&mut store, &mut rng, "mif", channels, window).expect("valid gate");
    let hidden = (channels / 2).max(1);
    *store.get_mut(mif.gate.output.weight) = Tensor::randn(&[hidden, channels], 1.0, &mut rng);
    (mif, store)
}

/// Composed paths: merging, importance attention, fusion and the decoder.
pub fn composed_cases() -> Vec<GradCase> {
    let (mif, store) = gate_fixture(3, 2);
    let params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let n_params = params.len();
    vec![
        GradCase::new("merge_tokens", |r| vec![randn(r, &[8, 3]), randn(r, &[8])], |g, v| {
            let o = g.segment_merge(v[0], v[1], &[1, 1, 0, 2, 0, 3, 2, 1], 4)?;
            project(g, o)
        }),
        GradCase::new(
            "importance_attention",
            |r| vec![randn(r, &[3, 4]), randn(r, &[5, 4]), randn(r, &[5, 2]), randn(r, &[5])],
            |g, v| {
                let o = importance_attention_graph(g, v[0], v[1], v[2], v[3])?;
                project(g, o)
            },
        ),
        GradCase::new(
            "mif_fuse",
            move |r| {
                let mut v = vec![randn(r, &[3, 3, 4]), randn(r, &[3, 3, 4])];
                for p in &params {
                    let jitter = Tensor::<f64>::uniform(p.shape(), -0.1, 0.1, r);
                    v.push(Tensor::from_fn(p.shape(), |i| p.data()[i] + jitter.data()[i]));
                }
                v
            },
            move |g, v| {
                let b = Binding::from_vars(v[2..2 + n_params].to_vec());
                let o = mif.forward(g, &b, v[0], v[1])?;
                project(g, o)
            },
        ),
        GradCase::new(
            "class_distance_predict_nll",
            |r| vec![randn(r, &[4, 3, 3]), randn(r, &[3, 4])],
            |g, v| {
                let d = mfad::class_distance_graph(g, v[0], v[1])?;
                let p = mfad::predict_graph(g, d)?;
                let labels: Vec<Option<usize>> = (0..9).map(|px| Some((px % 3) * 9 + px)).collect();
                let picked = g.index_select(p, labels, &[9])?;
                let logp = g.ln(picked, 1e-12);
                let m = g.mean(logp);
                Ok(g.scale(m, -1.0))
            },
        ),
    ]
}
