//! Dual-distance balanced token clustering.
//!
//! Tokens are ranked with density peaks over a distance that mixes feature
//! distance and spatial distance:
//!
//! ```text
//! d(i, j)  = ‖x_i − x_j‖ + (1 − τ)·‖y_i − y_j‖
//! ρ_i      = exp(−(1/k)·Σ_{j ∈ kNN(i)} d(i, j)²)
//! δ_i      = min { d(i, j) : j denser than i }   (max_j d(i, j) for the densest token)
//! score_i  = ρ_i·δ_i
//! ```
//!
//! The `m` highest-scoring tokens become centers, every token joins its
//! nearest center, and each cluster collapses to the `e^p`-weighted mean of
//! its members. Ties are always broken toward the lower token index, so the
//! discrete outputs are fully deterministic.

pub mod oracle;

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, Affine, Binding, Init, ParamStore};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

pub use oracle::brute_force_oracle;

/// A stage's tokens with their spatial coordinates and importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T: Real = f32> {
    /// `[N×C]` semantic features.
    pub tokens: Tensor<T>,
    /// `[N×2]` normalized `(row, col)` locations in `[0, 1]`.
    pub coords: Tensor<T>,
    /// `[N]` importance scores.
    pub importance: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Real> TokenSet<T> {
    pub fn new(
        tokens: Tensor<T>,
        coords: Tensor<T>,
        importance: Tensor<T>,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let [n, _] = *tokens.shape() else {
            return Err(Error::dim("token_set", format!("tokens must be N×C, got {:?}", tokens.shape())));
        };
        if coords.shape() != [n, 2] {
            return Err(Error::shape("token_set", tokens.shape(), coords.shape()));
        }
        if importance.numel() != n {
            return Err(Error::shape("token_set", tokens.shape(), importance.shape()));
        }
        if coords.data().iter().any(|&c| c < T::zero() || c > T::one()) {
            return Err(Error::contract("token_set", "coordinates must lie in [0, 1]"));
        }
        if !importance.is_finite() {
            return Err(Error::contract("token_set", "importance must be finite"));
        }
        Ok(TokenSet {
            tokens,
            coords,
            importance,
            grid_h,
            grid_w,
        })
    }

    /// Tokens laid out row-major on an `h×w` grid, with cell-center coordinates
    /// and zero importance.
    pub fn from_grid(tokens: Tensor<T>, h: usize, w: usize) -> Result<Self> {
        let n = tokens.shape()[0];
        if n != h * w {
            return Err(Error::dim("token_set", format!("{n} tokens for a {h}×{w} grid")));
        }
        let coords = grid_coords(h, w);
        TokenSet::new(tokens, coords, Tensor::zeros(&[n]), h, w)
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cell-center coordinates `((r + ½)/h, (c + ½)/w)` for a row-major grid.
pub fn grid_coords<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            data.push(T::lit((r as f64 + 0.5) / h as f64));
            data.push(T::lit((c as f64 + 0.5) / w as f64));
        }
    }
    Tensor::from_parts(vec![h * w, 2], data)
}

/// Everything one clustering step computes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult<T: Real = f32> {
    pub distance: Tensor<T>,
    pub density: Tensor<T>,
    pub separation: Tensor<T>,
    pub score: Tensor<T>,
    /// Center token indices, ascending.
    pub centers: Vec<usize>,
    /// Cluster of each token, in `[0, centers.len())`.
    pub assignment: Vec<usize>,
    pub merged: Tensor<T>,
}

impl<T: Real> ClusterResult<T> {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// How τ enters the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// `‖Δx‖ + (1 − τ)‖Δy‖`.
    #[default]
    Printed,
    /// `τ‖Δx‖ + (1 − τ)‖Δy‖`.
    Symmetric,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract("dual_distance", format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}

fn row_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| (u - v) * (u - v))
        .sum::<T>()
        .sqrt()
}

/// Pairwise token distance with the printed τ weighting.
pub fn dual_distance<T: Real>(ts: &TokenSet<T>, tau: f64) -> Result<Tensor<T>> {
    dual_distance_with(&ts.tokens, &ts.coords, tau, DistanceMode::Printed)
}

/// Pairwise distance between rows of `x: [N×C]` combined with rows of the
/// spatial encoding `y: [N×D]`.
pub fn dual_distance_with<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    tau: f64,
    mode: DistanceMode,
) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let n = x.shape()[0];
    if x.ndim() != 2 || y.ndim() != 2 || y.shape()[0] != n {
        return Err(Error::shape("dual_distance", x.shape(), y.shape()));
    }
    let sem = T::lit(match mode {
        DistanceMode::Printed => 1.0,
        DistanceMode::Symmetric => tau,
    });
    let spa = T::lit(1.0 - tau);
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sem * row_distance(x.row(i), x.row(j)) + spa * row_distance(y.row(i), y.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], d))
}

fn square_n<T: Real>(op: &'static str, d: &Tensor<T>) -> Result<usize> {
    match *d.shape() {
        [a, b] if a == b => Ok(a),
        _ => Err(Error::dim(op, format!("distance matrix must be square, got {:?}", d.shape()))),
    }
}

/// Order on `(distance, index)` pairs used for every nearest-first ranking.
fn nearest_first<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// `ρ_i = exp(−mean of squared distances to the k nearest other tokens)`.
///
/// Ties at the k-th distance go to the lower index. The squared distances are
/// summed nearest first.
pub fn local_density<T: Real>(d: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let n = square_n("local_density", d)?;
    if k == 0 || k >= n {
        return Err(Error::contract("local_density", format!("k = {k} needs 1 <= k <= N-1 with N = {n}")));
    }
    let kf = T::lit(k as f64);
    let mut rho = Vec::with_capacity(n);
    let mut buf: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        buf.clear();
        buf.extend(d.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &v)| (v, j)));
        if k < buf.len() {
            buf.select_nth_unstable_by(k - 1, nearest_first);
        }
        let nearest = &mut buf[..k];
        nearest.sort_unstable_by(nearest_first);
        let total = nearest.iter().fold(T::zero(), |acc, &(v, _)| acc + v * v);
        rho.push((-(total / kf)).exp());
    }
    Ok(Tensor::from_parts(vec![n], rho))
}

/// Tokens ordered densest first; equal densities put the lower index first.
pub fn density_order<T: Real>(rho: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| {
        rho[b]
            .partial_cmp(&rho[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Distance to the nearest denser token; the densest token takes its largest
/// distance instead (0 when it is alone).
pub fn separation_delta<T: Real>(d: &Tensor<T>, rho: &Tensor<T>) -> Result<Tensor<T>> {
    let n = square_n("separation_delta", d)?;
    if rho.numel() != n {
        return Err(Error::shape("separation_delta", d.shape(), rho.shape()));
    }
    let order = density_order(rho.data());
    let mut delta = vec![T::zero(); n];
    let top = order[0];
    delta[top] = d
        .row(top)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &v)| v)
        .fold(T::zero(), T::max);
    for (rank, &i) in order.iter().enumerate().skip(1) {
        let row = d.row(i);
        delta[i] = order[..rank]
            .iter()
            .map(|&j| row[j])
            .fold(T::infinity(), T::min);
    }
    Ok(Tensor::from_parts(vec![n], delta))
}

/// Elementwise `ρ·δ`.
pub fn center_score<T: Real>(rho: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mul(rho, delta)
}

/// Indices of the `m` largest scores (ties to the lower index), ascending.
pub fn select_centers<T: Real>(score: &Tensor<T>, m: usize) -> Result<Vec<usize>> {
    let n = score.numel();
    if m == 0 || m > n {
        return Err(Error::contract("select_centers", format!("m = {m} needs 1 <= m <= N = {n}")));
    }
    let s = score.data();
    let mut idx: Vec<usize> = (0..n).collect();
    let by_score = |&a: &usize, &b: &usize| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b));
    if m < n {
        idx.select_nth_unstable_by(m - 1, by_score);
    }
    let mut centers = idx[..m].to_vec();
    centers.sort_unstable();
    Ok(centers)
}

/// Nearest center for every token (ties to the lower center); centers own themselves.
pub fn assign_clusters<T: Real>(d: &Tensor<T>, centers: &[usize]) -> Result<Vec<usize>> {
    let n = square_n("assign_clusters", d)?;
    if centers.is_empty() {
        return Err(Error::contract("assign_clusters", "empty center list"));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::contract("assign_clusters", format!("center {bad} out of range for N = {n}")));
    }
    let mut assignment = Vec::with_capacity(n);
    for i in 0..n {
        let row = d.row(i);
        let mut best = 0;
        for (ci, &c) in centers.iter().enumerate().skip(1) {
            if row[c] < row[centers[best]] {
                best = ci;
            }
        }
        assignment.push(best);
    }
    for (ci, &c) in centers.iter().enumerate() {
        assignment[c] = ci;
    }
    Ok(assignment)
}

fn cluster_count(assignment: &[usize]) -> usize {
    assignment.iter().copied().max().map_or(0, |m| m + 1)
}

/// `X*_c = Σ_{j∈c} x_j e^{p_j} / Σ_{j∈c} e^{p_j}` for every cluster.
pub fn merge_tokens<T: Real>(tokens: &Tensor<T>, assignment: &[usize], p: &Tensor<T>) -> Result<Tensor<T>> {
    ops::segment_merge(tokens, p, assignment, cluster_count(assignment))
}

/// `softmax(Q·Kᵀ/√d_c + P)·V` where `p_j` raises key `j` for every query.
pub fn importance_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (q, k, v, p) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
        g.constant(p.clone()),
    );
    let out = importance_attention_graph(&mut g, q, k, v, p)?;
    Ok(g.value(out).clone())
}

pub fn importance_attention_graph<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, p: Var) -> Result<Var> {
    if g.shape(q).len() != 2 || g.shape(k).len() != 2 || g.shape(v).len() != 2 {
        return Err(Error::shape("importance_attention", g.shape(q), g.shape(k)));
    }
    if g.value(p).numel() != g.shape(k)[0] {
        return Err(Error::shape("importance_attention", g.shape(k), g.shape(p)));
    }
    attention(g, q, k, v, Some(p))
}

/// Hyperparameters of one downsampling step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbtcConfig {
    pub tau: f64,
    /// Neighbors for the density; clipped to `N − 1`.
    pub k: usize,
    /// Fraction of tokens kept as centers.
    pub ratio: f64,
    pub mode: DistanceMode,
}

impl Default for DbtcConfig {
    fn default() -> Self {
        DbtcConfig {
            tau: 1.0,
            k: 5,
            ratio: 0.25,
            mode: DistanceMode::Printed,
        }
    }
}

impl DbtcConfig {
    pub fn centers_for(&self, n: usize) -> usize {
        ((self.ratio * n as f64).ceil() as usize).clamp(1, n)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config("ratio", format!("{} outside (0, 1]", self.ratio)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        Ok(())
    }
}

/// Runs the non-learned part of clustering: distances through assignment,
/// then merges with `ts.importance` as the weights `p`.
pub fn cluster<T: Real>(ts: &TokenSet<T>, spatial: &Tensor<T>, cfg: &DbtcConfig) -> Result<ClusterResult<T>> {
    cfg.validate()?;
    let n = ts.len();
    let distance = dual_distance_with(&ts.tokens, spatial, cfg.tau, cfg.mode)?;
    let (density, separation) = if n == 1 {
        (Tensor::ones(&[1]), Tensor::zeros(&[1]))
    } else {
        let rho = local_density(&distance, cfg.k.min(n - 1))?;
        let delta = separation_delta(&distance, &rho)?;
        (rho, delta)
    };
    let score = center_score(&density, &separation)?;
    let centers = select_centers(&score, cfg.centers_for(n))?;
    let assignment = assign_clusters(&distance, &centers)?;
    let merged = merge_tokens(&ts.tokens, &assignment, &ts.importance)?;
    Ok(ClusterResult {
        distance,
        density,
        separation,
        score,
        centers,
        assignment,
        merged,
    })
}

/// Source of the spatial term `y` in the clustering distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionMode {
    /// No spatial term.
    None,
    /// Fixed sinusoidal features of the coordinates.
    Sinusoidal,
    /// Learnable per-axis scale and offset on the coordinates.
    #[default]
    Learnable,
}

pub const SINUSOID_BANDS: usize = 3;

/// Learnable per-axis affine map of normalized `(row, col)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoordEncoding {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl Default for PixelCoordEncoding {
    fn default() -> Self {
        Self::identity()
    }
}

impl PixelCoordEncoding {
    pub fn identity() -> Self {
        PixelCoordEncoding {
            scale: [1.0, 1.0],
            offset: [0.0, 0.0],
        }
    }

    pub fn apply<T: Real>(&self, coords: &Tensor<T>) -> Tensor<T> {
        Tensor::from_fn(coords.shape(), |i| {
            let axis = i % 2;
            coords.data()[i] * T::lit(self.scale[axis]) + T::lit(self.offset[axis])
        })
    }
}

/// Spatial features used by the clustering distance for `[N×2]` coordinates.
pub fn encode_positions<T: Real>(coords: &Tensor<T>, mode: PositionMode, pce: &PixelCoordEncoding) -> Tensor<T> {
    let n = coords.shape()[0];
    match mode {
        PositionMode::None => Tensor::zeros(&[n, 1]),
        PositionMode::Learnable => pce.apply(coords),
        PositionMode::Sinusoidal => {
            let width = 4 * SINUSOID_BANDS;
            let mut data = Vec::with_capacity(n * width);
            for i in 0..n {
                for axis in 0..2 {
                    let v = coords.data()[i * 2 + axis].as_f64();
                    for band in 0..SINUSOID_BANDS {
                        let arg = std::f64::consts::PI * (1 << band) as f64 * v;
                        data.push(T::lit(arg.sin()));
                        data.push(T::lit(arg.cos()));
                    }
                }
            }
            Tensor::from_parts(vec![n, width], data)
        }
    }
}

/// Learned maps of one clustering downsampler: the importance projection and
/// the query/key/value maps of the refining attention.
#[derive(Debug, Clone)]
pub struct DbtcLayer {
    pub importance: Affine,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
}

/// Output of [`DbtcLayer::forward`].
#[derive(Debug, Clone)]
pub struct Downsampled<T: Real> {
    /// `[M×C]` tokens for the next stage.
    pub tokens: Var,
    pub coords: Tensor<T>,
    pub importance: Tensor<T>,
    pub clusters: ClusterResult<T>,
}

impl DbtcLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(DbtcLayer {
            importance: Affine::new(store, rng, &format!("{name}.importance"), dim, 1, true, Init::Zeros)?,
            query: Affine::new(store, rng, &format!("{name}.query"), dim, dim, true, Init::Uniform)?,
            key: Affine::new(store, rng, &format!("{name}.key"), dim, dim, true, Init::Uniform)?,
            value: Affine::new(store, rng, &format!("{name}.value"), dim, dim, true, Init::Uniform)?,
        })
    }

    /// Clusters `tokens` (`[N×C]` at `coords`) down to `ceil(ratio·N)` tokens.
    ///
    /// `spatial` is the encoded position of each token used by the distance.
    /// The result is `merged + x[center]`, refined by importance-biased
    /// attention from the merged tokens onto the original ones.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        tokens: Var,
        coords: &Tensor<T>,
        spatial: &Tensor<T>,
        cfg: &DbtcConfig,
    ) -> Result<Downsampled<T>> {
        let n = g.shape(tokens)[0];
        let p = self.importance.forward(g, b, tokens)?;
        let p = g.reshape(p, &[n])?;
        let mut ts = TokenSet {
            tokens: g.value(tokens).clone(),
            coords: coords.clone(),
            importance: g.value(p).clone(),
            grid_h: 0,
            grid_w: 0,
        };
        ts.tokens.set_requires_grad(false);
        ts.importance.set_requires_grad(false);
        let clusters = cluster(&ts, spatial, cfg)?;
        let m = clusters.centers.len();

        let merged = g.segment_merge(tokens, p, &clusters.assignment, m)?;
        let at_centers = g.gather_rows(tokens, &clusters.centers)?;
        let out = g.add(merged, at_centers)?;
        let q = self.query.forward(g, b, out)?;
        let k = self.key.forward(g, b, tokens)?;
        let v = self.value.forward(g, b, tokens)?;
        let refined = importance_attention_graph(g, q, k, v, p)?;
        let out = g.add(out, refined)?;

        let new_coords = ops::segment_merge(coords, &ts.importance, &clusters.assignment, m)?;
        let new_importance = ops::gather_rows(&ts.importance, &clusters.centers)?;
        Ok(Downsampled {
            tokens: out,
            coords: new_coords,
            importance: new_importance,
            clusters,
        })
    }
}

/// Standalone downsampling of a token set with a parameter store holding `layer`.
pub fn cluster_downsample<T: Real>(
    ts: &TokenSet<T>,
    cfg: &DbtcConfig,
    position: PositionMode,
    pce: &PixelCoordEncoding,
    layer: &DbtcLayer,
    store: &ParamStore<T>,
) -> Result<(TokenSet<T>, ClusterResult<T>)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.constant(ts.tokens.clone());
    let spatial = encode_positions(&ts.coords, position, pce);
    let out = layer.forward(&mut g, &b, x, &ts.coords, &spatial, cfg)?;
    let next = TokenSet {
        tokens: g.value(out.tokens).clone(),
        coords: out.coords,
        importance: out.importance,
        grid_h: ts.grid_h.div_ceil(2),
        grid_w: ts.grid_w.div_ceil(2),
    };
    Ok((next, out.clusters))
}
