//! Four-stage segmentation model: per-modality stage-1 blocks, fusion,
//! clustering (or pooling) downsamplers, stage bridges and the decoder head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dbtc::{encode_positions, grid_coords, DbtcLayer, PixelCoordEncoding, PositionMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mfad::{self, ClassTokens, SegPrediction, STAGES};
use crate::mif::Mif;
use crate::nn::{Affine, Binding, Init, LayerNorm, ParamId, ParamStore, TransformerBlock};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

use super::config::{DecoderMode, DownsampleMode, FusionMode, ModelConfig};

/// Side of the square stage-1 patches.
pub const PATCH: usize = 4;
const PATCH_DIM: usize = 3 * PATCH * PATCH;

#[derive(Debug, Clone)]
enum Fusion {
    Mif(Mif),
    Add,
    Cat(Affine),
}

#[derive(Debug, Clone)]
enum Downsample {
    Dbtc {
        layer: DbtcLayer,
        /// `[2]` scale and `[2]` offset of the learnable coordinate encoding.
        pce: Option<(ParamId, ParamId)>,
    },
    Pool,
}

/// Projection into the next stage's width followed by a downsampler.
#[derive(Debug, Clone)]
struct Transition {
    proj: Affine,
    norm: LayerNorm,
    down: Downsample,
}

#[derive(Debug, Clone)]
enum Head {
    Euclid(ClassTokens),
    Mlp(Affine, Affine),
}

#[derive(Debug, Clone)]
struct Layers {
    embed: [Affine; 2],
    stage1: [Vec<TransformerBlock>; 2],
    fusion: Fusion,
    transitions: Vec<Transition>,
    /// Bridges into stages 3 and 4.
    bridges: Vec<Affine>,
    /// Blocks of stages 2, 3 and 4.
    blocks: Vec<Vec<TransformerBlock>>,
    head: Head,
}

/// A built model: configuration, named parameters and the layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[K×H/4×W/4]`; for the perceptron head these are negated logits.
    pub distances: Var,
    pub probs: Var,
    /// `[K×H×W]` probabilities at input resolution.
    pub full_probs: Var,
    /// Token count of each stage.
    pub stage_tokens: [usize; STAGES],
}

/// Plain-tensor result of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T: Real = f32> {
    pub prediction: SegPrediction<T>,
    pub full_probs: Tensor<T>,
    pub stage_tokens: [usize; STAGES],
}

impl<T: Real> Output<T> {
    /// Per-pixel class at input resolution.
    pub fn labels(&self) -> Vec<usize> {
        mfad::argmax_axis0(&self.full_probs)
    }
}

/// Builds a model with parameters drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let [c1, ..] = cfg.channels;

    let mut embed = Vec::new();
    let mut stage1 = Vec::new();
    for modality in ["rgb", "thermal"] {
        embed.push(Affine::new(&mut store, &mut rng, &format!("stage1.{modality}.embed"), PATCH_DIM, c1, true, Init::Uniform)?);
        let blocks = (0..cfg.depths[0])
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("stage1.{modality}.block{i}"), c1, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        stage1.push(blocks);
    }

    let fusion = match cfg.fusion {
        FusionMode::Mif => Fusion::Mif(Mif::new(&mut store, &mut rng, "fusion.mif", c1, cfg.window)?),
        FusionMode::Add => Fusion::Add,
        FusionMode::Cat => Fusion::Cat(Affine::new(&mut store, &mut rng, "fusion.cat", 2 * c1, c1, true, Init::Uniform)?),
    };

    let mut transitions = Vec::new();
    let mut bridges = Vec::new();
    let mut blocks = Vec::new();
    for n in 1..STAGES {
        let (cin, cout) = (cfg.channels[n - 1], cfg.channels[n]);
        let name = format!("stage{}", n + 1);
        let proj = Affine::new(&mut store, &mut rng, &format!("{name}.proj"), cin, cout, true, Init::Uniform)?;
        let norm = LayerNorm::new(&mut store, &format!("{name}.norm"), cout)?;
        let down = match cfg.downsample {
            DownsampleMode::Dbtc => {
                let layer = DbtcLayer::new(&mut store, &mut rng, &format!("{name}.dbtc"), cout)?;
                let pce = if cfg.position == PositionMode::Learnable {
                    Some((
                        store.add(format!("{name}.pce.scale"), Tensor::ones(&[2]))?,
                        store.add(format!("{name}.pce.offset"), Tensor::zeros(&[2]))?,
                    ))
                } else {
                    None
                };
                Downsample::Dbtc { layer, pce }
            }
            DownsampleMode::Pool => Downsample::Pool,
        };
        transitions.push(Transition { proj, norm, down });
        if n >= 2 {
            bridges.push(Affine::new(&mut store, &mut rng, &format!("{name}.bridge"), cin, cout, true, Init::Identity)?);
        }
        blocks.push(
            (0..cfg.depths[n])
                .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("{name}.block{i}"), cout, cfg.heads))
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let width: usize = cfg.channels.iter().sum();
    let head = match cfg.decoder {
        DecoderMode::Euclid => Head::Euclid(ClassTokens::new(&mut store, &mut rng, "head.class", cfg.classes, width)?),
        DecoderMode::Mlp => Head::Mlp(
            Affine::new(&mut store, &mut rng, "head.fc1", width, width, true, Init::Uniform)?,
            Affine::new(&mut store, &mut rng, "head.fc2", width, cfg.classes, true, Init::Uniform)?,
        ),
    };

    let [e0, e1]: [Affine; 2] = embed.try_into().expect("two modalities");
    let [s0, s1]: [Vec<TransformerBlock>; 2] = stage1.try_into().expect("two modalities");
    Ok(Model {
        config: cfg.clone(),
        params: store,
        layers: Layers {
            embed: [e0, e1],
            stage1: [s0, s1],
            fusion,
            transitions,
            bridges,
            blocks,
            head,
        },
    })
}

/// Number of learnable scalars.
pub fn count_params<T: Real>(m: &Model<T>) -> usize {
    m.params.count()
}

/// `[N×C]` row-major grid tokens to a `C×h×w` map.
pub fn tokens_to_map<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[c, h, w])
}

/// `C×h×w` map to `[hw×C]` row-major grid tokens.
pub fn map_to_tokens<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    let (c, h, w) = ops::chw("map_to_tokens", g.shape(m))?;
    let flat = g.reshape(m, &[c, h * w])?;
    g.transpose(flat)
}

/// Pooled and projected previous-stage map, shaped like the current stage.
pub fn bridge_delta<T: Real>(g: &mut Graph<T>, b: &Binding, prev: Var, proj: &Affine, hc: usize, wc: usize) -> Result<Var> {
    let (_, hp, wp) = ops::chw("stage_bridge", g.shape(prev))?;
    if hp.div_ceil(2) != hc || wp.div_ceil(2) != wc {
        return Err(Error::dim(
            "stage_bridge",
            format!("previous {hp}×{wp} does not halve to current {hc}×{wc}"),
        ));
    }
    let pooled = g.mean_pool2x2(prev)?;
    let cells = map_to_tokens(g, pooled)?;
    let projected = proj.forward(g, b, cells)?;
    tokens_to_map(g, projected, hc, wc)
}

/// `cur + proj(pool2x2(prev))`.
pub fn stage_bridge_graph<T: Real>(g: &mut Graph<T>, b: &Binding, prev: Var, cur: Var, proj: &Affine) -> Result<Var> {
    let (cc, hc, wc) = ops::chw("stage_bridge", g.shape(cur))?;
    if cc != proj.fan_out || g.shape(prev)[0] != proj.fan_in {
        return Err(Error::dim("stage_bridge", "projection does not match the channel widths"));
    }
    let delta = bridge_delta(g, b, prev, proj, hc, wc)?;
    g.add(cur, delta)
}

pub fn stage_bridge<T: Real>(prev: &Tensor<T>, cur: &Tensor<T>, proj: &Affine, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let (p, c) = (g.constant(prev.clone()), g.constant(cur.clone()));
    let out = stage_bridge_graph(&mut g, &b, p, c, proj)?;
    Ok(g.value(out).clone())
}

/// Index map from a `3×H×W` image to `[(H/4)(W/4) × 48]` patch rows.
fn patch_index(h: usize, w: usize) -> Vec<Option<usize>> {
    let (ph, pw) = (h / PATCH, w / PATCH);
    let mut idx = Vec::with_capacity(ph * pw * PATCH_DIM);
    for pr in 0..ph {
        for pc in 0..pw {
            for ch in 0..3 {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        idx.push(Some((ch * h + pr * PATCH + dy) * w + pc * PATCH + dx));
                    }
                }
            }
        }
    }
    idx
}

/// Grid cell containing each `[N×2]` coordinate.
fn cells_of<T: Real>(coords: &Tensor<T>, h: usize, w: usize) -> Vec<usize> {
    (0..coords.shape()[0])
        .map(|i| {
            let r = ((coords.data()[2 * i].as_f64() * h as f64) as usize).min(h - 1);
            let c = ((coords.data()[2 * i + 1].as_f64() * w as f64) as usize).min(w - 1);
            r * w + c
        })
        .collect()
}

/// Parameter names that provably receive no gradient, with the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadParam {
    pub name: String,
    pub reason: &'static str,
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn check_inputs(&self, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<()> {
        let (h, w) = (self.config.height, self.config.width);
        if rgb.shape() != [3, h, w] {
            return Err(Error::dim("forward", format!("rgb {:?}, expected [3, {h}, {w}]", rgb.shape())));
        }
        if thermal.shape() != [1, h, w] {
            return Err(Error::dim("forward", format!("thermal {:?}, expected [1, {h}, {w}]", thermal.shape())));
        }
        Ok(())
    }

    /// Tokens of one stage re-gridded onto its nominal `h×w` grid: each cell
    /// takes the token owning the stage-1 cell under its center.
    fn regrid(&self, g: &mut Graph<T>, tokens: Var, owner: &[usize], stage: usize) -> Result<Var> {
        let (h1, w1) = self.config.stage_grid(0);
        let (h, w) = self.config.stage_grid(stage);
        let s = 1usize << stage;
        let rows: Vec<usize> = (0..h * w)
            .map(|cell| {
                let r = ((cell / w) * s + s / 2).min(h1 - 1);
                let c = ((cell % w) * s + s / 2).min(w1 - 1);
                owner[r * w1 + c]
            })
            .collect();
        let gathered = g.gather_rows(tokens, &rows)?;
        tokens_to_map(g, gathered, h, w)
    }

    fn pce(&self, ids: Option<(ParamId, ParamId)>) -> PixelCoordEncoding {
        match ids {
            None => PixelCoordEncoding::identity(),
            Some((scale, offset)) => {
                let (s, o) = (self.params.get(scale).data(), self.params.get(offset).data());
                PixelCoordEncoding {
                    scale: [s[0].as_f64(), s[1].as_f64()],
                    offset: [o[0].as_f64(), o[1].as_f64()],
                }
            }
        }
    }

    /// Records the full forward pass on `g`, with parameters bound in `b`.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &Binding, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<ForwardVars> {
        self.check_inputs(rgb, thermal)?;
        let cfg = &self.config;
        let l = &self.layers;
        let (h, w) = (cfg.height, cfg.width);
        let (h1, w1) = cfg.stage_grid(0);

        // stage 1: separate patch embeds and blocks per modality
        let thermal3 = ops::concat(&[thermal, thermal, thermal], 0)?;
        let mut streams = Vec::with_capacity(2);
        for (m, image) in [rgb, &thermal3].into_iter().enumerate() {
            let x = g.constant(image.clone());
            let patches = g.index_select(x, patch_index(h, w), &[h1 * w1, PATCH_DIM])?;
            let mut t = l.embed[m].forward(g, b, patches)?;
            for block in &l.stage1[m] {
                t = block.forward(g, b, t)?;
            }
            streams.push(t);
        }
        let tokens = match &l.fusion {
            Fusion::Mif(mif) => {
                let fr = tokens_to_map(g, streams[0], h1, w1)?;
                let ft = tokens_to_map(g, streams[1], h1, w1)?;
                let fused = mif.forward(g, b, fr, ft)?;
                map_to_tokens(g, fused)?
            }
            Fusion::Add => g.add(streams[0], streams[1])?,
            Fusion::Cat(proj) => {
                let both = g.concat(&streams, 1)?;
                proj.forward(g, b, both)?
            }
        };

        let mut stage_out = vec![tokens];
        let mut owners: Vec<Vec<usize>> = vec![(0..h1 * w1).collect()];
        let mut coords: Tensor<T> = grid_coords(h1, w1);
        let mut stage_tokens = [h1 * w1, 0, 0, 0];
        for n in 1..STAGES {
            let tr = &l.transitions[n - 1];
            let prev = stage_out[n - 1];
            let x = tr.proj.forward(g, b, prev)?;
            let x = tr.norm.forward(g, b, x)?;
            let owner_prev = &owners[n - 1];
            let (mut x, owner) = match &tr.down {
                Downsample::Dbtc { layer, pce } => {
                    let spatial = encode_positions(&coords, cfg.position, &self.pce(*pce));
                    let down = layer.forward(g, b, x, &coords, &spatial, &cfg.dbtc(n - 1))?;
                    coords = down.coords;
                    let owner: Vec<usize> = owner_prev.iter().map(|&o| down.clusters.assignment[o]).collect();
                    (down.tokens, owner)
                }
                Downsample::Pool => {
                    let (hp, wp) = cfg.stage_grid(n - 1);
                    let (hc, wc) = cfg.stage_grid(n);
                    let map = tokens_to_map(g, x, hp, wp)?;
                    let pooled = g.mean_pool2x2(map)?;
                    coords = grid_coords(hc, wc);
                    let owner = owner_prev.iter().map(|&o| (o / wp / 2) * wc + (o % wp) / 2).collect();
                    (map_to_tokens(g, pooled)?, owner)
                }
            };
            if n >= 2 {
                let (hc, wc) = cfg.stage_grid(n);
                let prev_map = self.regrid(g, prev, owner_prev, n - 1)?;
                let delta = bridge_delta(g, b, prev_map, &l.bridges[n - 2], hc, wc)?;
                let cells = map_to_tokens(g, delta)?;
                let per_token = g.gather_rows(cells, &cells_of(&coords, hc, wc))?;
                x = g.add(x, per_token)?;
            }
            for block in &l.blocks[n - 1] {
                x = block.forward(g, b, x)?;
            }
            stage_tokens[n] = g.shape(x)[0];
            stage_out.push(x);
            owners.push(owner);
        }

        let mut maps = Vec::with_capacity(STAGES);
        for (n, (&t, owner)) in stage_out.iter().zip(&owners).enumerate() {
            maps.push(if n == 0 { tokens_to_map(g, t, h1, w1)? } else { self.regrid(g, t, owner, n)? });
        }
        let xf = mfad::aggregate_multiscale_graph(g, &maps, h1, w1)?;
        let (distances, probs) = match &l.head {
            Head::Euclid(ct) => mfad::decode_graph(g, b, xf, ct)?,
            Head::Mlp(fc1, fc2) => {
                let px = map_to_tokens(g, xf)?;
                let hdn = fc1.forward(g, b, px)?;
                let hdn = g.relu(hdn);
                let logits = fc2.forward(g, b, hdn)?;
                let logits = tokens_to_map(g, logits, h1, w1)?;
                let d = g.scale(logits, -1.0);
                (d, mfad::predict_graph(g, d)?)
            }
        };
        let up = g.upsample_bilinear(probs, h, w)?;
        let full_probs = g.normalize_axis0(up);
        Ok(ForwardVars {
            distances,
            probs,
            full_probs,
            stage_tokens,
        })
    }

    /// Inference on one image pair.
    pub fn forward(&self, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<Output<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward_graph(&mut g, &b, rgb, thermal)?;
        Ok(Output {
            prediction: SegPrediction {
                probs: g.value(out.probs).clone(),
                distances: g.value(out.distances).clone(),
            },
            full_probs: g.value(out.full_probs).clone(),
            stage_tokens: out.stage_tokens,
        })
    }

    /// Parameters that get an all-zero gradient on every input under this
    /// configuration, or at initialization.
    pub fn dead_parameters(&self) -> Vec<DeadParam> {
        let single_token_stages: Vec<usize> = (0..STAGES)
            .filter(|&n| self.expected_tokens(n) == 1)
            .map(|n| n + 1)
            .collect();
        let mut out = Vec::new();
        for (name, _) in self.params.iter() {
            let reason = if name.contains(".pce.") {
                Some("coordinates feed only the discrete cluster assignment")
            } else if name.ends_with(".key.bias") {
                Some("adds the same logit to every key of a query; softmax cancels it")
            } else if name.ends_with(".dbtc.importance.bias") {
                Some("shifts every importance score equally; both softmaxes cancel it")
            } else if name.starts_with("fusion.mif.gate.hidden.") {
                Some("zero-initialized gate output layer blocks the gradient at initialization")
            } else if single_token_stages.iter().any(|s| {
                name.starts_with(&format!("stage{s}.block")) && (name.contains(".query.") || name.contains(".key."))
            }) {
                Some("attention over a single token is constant in its logits")
            } else {
                None
            };
            if let Some(reason) = reason {
                out.push(DeadParam {
                    name: name.to_string(),
                    reason,
                });
            }
        }
        out
    }

    /// Token count of stage `n` (0-based) implied by the configuration.
    pub fn expected_tokens(&self, n: usize) -> usize {
        let (h1, w1) = self.config.stage_grid(0);
        let mut count = h1 * w1;
        for s in 1..=n {
            count = match self.config.downsample {
                DownsampleMode::Dbtc => self.config.dbtc(s - 1).centers_for(count),
                DownsampleMode::Pool => {
                    let (h, w) = self.config.stage_grid(s);
                    h * w
                }
            };
        }
        count
    }

    /// Bridge projection into stage `stage` (1-based, 3 or 4).
    pub fn bridge(&self, stage: usize) -> Option<&Affine> {
        stage.checked_sub(3).and_then(|i| self.layers.bridges.get(i))
    }
}
