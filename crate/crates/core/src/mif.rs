//! Multimodal feature interaction and fusion.
//!
//! Both modality maps are tiled into `w×w` windows. Inside each window every
//! pixel of one modality attends over the pixels of the other modality. The
//! interaction maps are merged back to full resolution, reweighted per
//! channel by a gate driven by global channel statistics, and added to the
//! two input maps:
//!
//! ```text
//! out = (F_R + F_T) + (s ⊙ I_R + s ⊙ I_T)
//! ```
//!
//! The formula is symmetric in the two modalities, including the summation
//! order, so swapping them gives a bitwise-identical result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, Affine, Binding, Init, ParamStore};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Geometry of a window tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl WindowLayout {
    pub fn new(shape: &[usize], window: usize) -> Result<Self> {
        let (c, h, w) = ops::chw("window_partition", shape)?;
        if window == 0 || window > h || window > w {
            return Err(Error::contract(
                "window_partition",
                format!("window {window} does not fit a {h}×{w} map"),
            ));
        }
        Ok(WindowLayout {
            channels: c,
            height: h,
            width: w,
            window,
        })
    }

    pub fn padded(&self) -> (usize, usize) {
        (
            self.height.div_ceil(self.window) * self.window,
            self.width.div_ceil(self.window) * self.window,
        )
    }

    pub fn windows(&self) -> usize {
        let (ph, pw) = self.padded();
        (ph / self.window) * (pw / self.window)
    }

    fn tiled_shape(&self) -> [usize; 3] {
        [self.windows(), self.window * self.window, self.channels]
    }

    /// For each tiled element, the map element it reads (`None` for padding).
    fn partition_index(&self) -> Vec<Option<usize>> {
        let (_, pw) = self.padded();
        let tiles_w = pw / self.window;
        let ws = self.window;
        let mut idx = Vec::with_capacity(self.windows() * ws * ws * self.channels);
        for tile in 0..self.windows() {
            let (tr, tc) = (tile / tiles_w, tile % tiles_w);
            for pix in 0..ws * ws {
                let (r, c) = (tr * ws + pix / ws, tc * ws + pix % ws);
                for ch in 0..self.channels {
                    idx.push((r < self.height && c < self.width).then(|| (ch * self.height + r) * self.width + c));
                }
            }
        }
        idx
    }

    /// For each map element, the tiled element holding it.
    fn merge_index(&self) -> Vec<Option<usize>> {
        let (_, pw) = self.padded();
        let tiles_w = pw / self.window;
        let ws = self.window;
        let mut idx = Vec::with_capacity(self.channels * self.height * self.width);
        for ch in 0..self.channels {
            for r in 0..self.height {
                for c in 0..self.width {
                    let tile = (r / ws) * tiles_w + c / ws;
                    let pix = (r % ws) * ws + c % ws;
                    idx.push(Some((tile * ws * ws + pix) * self.channels + ch));
                }
            }
        }
        idx
    }
}

/// Non-overlapping windows of a `C×H×W` map, zero-padded to multiples of `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid<T: Real = f32> {
    /// `[n × w² × C]`, windows in row-major tile order, pixels row-major within a window.
    pub windows: Tensor<T>,
    pub layout: WindowLayout,
}

pub fn window_partition<T: Real>(f: &Tensor<T>, window: usize) -> Result<WindowGrid<T>> {
    let layout = WindowLayout::new(f.shape(), window)?;
    let windows = ops::index_select(f, &layout.partition_index(), &layout.tiled_shape())?;
    Ok(WindowGrid { windows, layout })
}

pub fn window_merge<T: Real>(grid: &WindowGrid<T>) -> Result<Tensor<T>> {
    let l = grid.layout;
    if grid.windows.shape() != l.tiled_shape() {
        return Err(Error::contract(
            "window_merge",
            format!("windows {:?} inconsistent with layout {:?}", grid.windows.shape(), l),
        ));
    }
    ops::index_select(&grid.windows, &l.merge_index(), &[l.channels, l.height, l.width])
}

pub fn window_partition_graph<T: Real>(g: &mut Graph<T>, f: Var, window: usize) -> Result<(Var, WindowLayout)> {
    let layout = WindowLayout::new(g.shape(f), window)?;
    let v = g.index_select(f, layout.partition_index(), &layout.tiled_shape())?;
    Ok((v, layout))
}

pub fn window_merge_graph<T: Real>(g: &mut Graph<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    if g.shape(windows) != layout.tiled_shape() {
        return Err(Error::contract("window_merge", "windows inconsistent with layout"));
    }
    g.index_select(
        windows,
        layout.merge_index(),
        &[layout.channels, layout.height, layout.width],
    )
}

/// Per-window cross attention: each modality queries the other.
pub fn cross_window_interaction_graph<T: Real>(g: &mut Graph<T>, wr: Var, wt: Var) -> Result<(Var, Var)> {
    if g.shape(wr) != g.shape(wt) {
        return Err(Error::shape("cross_window_interaction", g.shape(wr), g.shape(wt)));
    }
    let ir = attention(g, wr, wt, wt, None)?;
    let it = attention(g, wt, wr, wr, None)?;
    Ok((ir, it))
}

pub fn cross_window_interaction<T: Real>(wr: &Tensor<T>, wt: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let (r, t) = (g.constant(wr.clone()), g.constant(wt.clone()));
    let (ir, it) = cross_window_interaction_graph(&mut g, r, t)?;
    Ok((g.value(ir).clone(), g.value(it).clone()))
}

/// Two-layer perceptron from per-channel `(mean, max, variance)` to a sigmoid gate.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub hidden: Affine,
    pub output: Affine,
}

impl ChannelGate {
    /// `3C → max(1, C/2) → C`, with a zero-initialized output layer.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(ChannelGate {
            hidden: Affine::new(store, rng, &format!("{name}.hidden"), 3 * channels, hidden, true, Init::Uniform)?,
            output: Affine::new(store, rng, &format!("{name}.output"), hidden, channels, true, Init::Zeros)?,
        })
    }

    /// Gate values `[C]` from the statistics of `f_r + f_t`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, fr: Var, ft: Var) -> Result<Var> {
        if g.shape(fr) != g.shape(ft) {
            return Err(Error::shape("channel_gate", g.shape(fr), g.shape(ft)));
        }
        let c = g.shape(fr)[0];
        let both = g.add(fr, ft)?;
        let stats = g.channel_stats(both)?;
        let flat = g.reshape(stats, &[1, 3 * c])?;
        let h = self.hidden.forward(g, b, flat)?;
        let h = g.relu(h);
        let s = self.output.forward(g, b, h)?;
        let s = g.sigmoid(s);
        g.reshape(s, &[c])
    }
}

/// Learned part of the fusion module.
#[derive(Debug, Clone)]
pub struct Mif {
    pub gate: ChannelGate,
    pub window: usize,
}

impl Mif {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        window: usize,
    ) -> Result<Self> {
        Ok(Mif {
            gate: ChannelGate::new(store, rng, &format!("{name}.gate"), channels)?,
            window,
        })
    }

    /// Fuses two `C×H×W` maps into one.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, fr: Var, ft: Var) -> Result<Var> {
        if g.shape(fr) != g.shape(ft) {
            return Err(Error::shape("mif_fuse", g.shape(fr), g.shape(ft)));
        }
        let (wr, layout) = window_partition_graph(g, fr, self.window)?;
        let (wt, _) = window_partition_graph(g, ft, self.window)?;
        let (ir, it) = cross_window_interaction_graph(g, wr, wt)?;
        let ir = window_merge_graph(g, ir, &layout)?;
        let it = window_merge_graph(g, it, &layout)?;
        let s = self.gate.forward(g, b, fr, ft)?;
        let base = g.add(fr, ft)?;
        let gr = g.mul_broadcast(ir, s, 0)?;
        let gt = g.mul_broadcast(it, s, 0)?;
        let inter = g.add(gr, gt)?;
        g.add(base, inter)
    }
}

/// Gate values for plain tensors.
pub fn channel_gate<T: Real>(fr: &Tensor<T>, ft: &Tensor<T>, gate: &ChannelGate, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let (r, t) = (g.constant(fr.clone()), g.constant(ft.clone()));
    let s = gate.forward(&mut g, &b, r, t)?;
    Ok(g.value(s).clone())
}

/// Fused map for plain tensors.
pub fn mif_fuse<T: Real>(fr: &Tensor<T>, ft: &Tensor<T>, mif: &Mif, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let (r, t) = (g.constant(fr.clone()), g.constant(ft.clone()));
    let out = mif.forward(&mut g, &b, r, t)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randmap(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn build(c: usize, window: usize, seed: u64) -> (Mif, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mif = Mif::new(&mut store, &mut rng, "mif", c, window).unwrap();
        (mif, store)
    }

    /// Loop-level reference for one modality's interaction within one window.
    fn loop_interaction(q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let c = q[0].len();
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = kv
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..c).map(|ch| kv.iter().zip(&e).map(|(kj, ej)| ej / z * kj[ch]).sum()).collect()
            })
            .collect()
    }

    #[test]
    fn partition_examples() {
        let f = randmap(2, 4, 4, 0);
        let grid = window_partition(&f, 2).unwrap();
        assert_eq!(grid.windows.shape(), &[4, 4, 2]);
        // window 1 is the top-right tile; its first pixel is (0, 2)
        assert_eq!(grid.windows.get(&[1, 0, 1]), f.get(&[1, 0, 2]));
        assert_eq!(grid.windows.get(&[2, 3, 0]), f.get(&[0, 3, 1]));

        let whole = window_partition(&f, 4).unwrap();
        assert_eq!(whole.windows.shape(), &[1, 16, 2]);
        for p in 0..16 {
            for ch in 0..2 {
                assert_eq!(whole.windows.get(&[0, p, ch]), f.get(&[ch, p / 4, p % 4]));
            }
        }

        let odd = randmap(1, 5, 5, 1);
        let grid = window_partition(&odd, 4).unwrap();
        assert_eq!(grid.layout.padded(), (8, 8));
        assert_eq!(grid.windows.shape(), &[4, 16, 1]);
        assert_eq!(grid.windows.get(&[3, 15, 0]), 0.0);
        assert_eq!(window_merge(&grid).unwrap(), odd);
    }

    #[test]
    fn partition_rejects_bad_windows() {
        let f = randmap(1, 4, 4, 0);
        assert!(matches!(window_partition(&f, 0), Err(Error::Contract { .. })));
        assert!(matches!(window_partition(&f, 5), Err(Error::Contract { .. })));
    }

    #[test]
    fn merge_rejects_inconsistent_grid() {
        let mut grid = window_partition(&randmap(1, 4, 4, 0), 2).unwrap();
        grid.layout.height = 6;
        assert!(window_merge(&grid).is_err());
    }

    #[test]
    fn interaction_examples() {
        let v = Tensor::<f64>::from_f64(&[1, 1, 3], &[0.5, -2.0, 1.0]).unwrap();
        let (ir, it) = cross_window_interaction(&v, &v).unwrap();
        assert!(ir.max_abs_diff(&v) < 1e-15 && it.max_abs_diff(&v) < 1e-15);

        let wr = randmap(1, 4, 3, 3).reshape(&[1, 4, 3]).unwrap();
        let wt = Tensor::from_f64(&[1, 4, 3], &[0.2, 0.4, -1.0].repeat(4)).unwrap();
        let (ir, _) = cross_window_interaction(&wr, &wt).unwrap();
        for p in 0..4 {
            for ch in 0..3 {
                assert!((ir.get(&[0, p, ch]) - wt.get(&[0, 0, ch])).abs() < 1e-12);
            }
        }

        let bad = Tensor::<f64>::zeros(&[1, 3, 3]);
        assert!(cross_window_interaction(&wr, &bad).is_err());
    }

    #[test]
    fn interaction_matches_loop_reference() {
        let wr = randmap(1, 9, 4, 10).reshape(&[1, 9, 4]).unwrap();
        let wt = randmap(1, 9, 4, 11).reshape(&[1, 9, 4]).unwrap();
        let (ir, it) = cross_window_interaction(&wr, &wt).unwrap();
        let rows = |t: &Tensor<f64>| (0..9).map(|p| (0..4).map(|c| t.get(&[0, p, c])).collect()).collect::<Vec<Vec<f64>>>();
        let (r, t) = (rows(&wr), rows(&wt));
        let want_r = loop_interaction(&r, &t);
        let want_t = loop_interaction(&t, &r);
        for p in 0..9 {
            for c in 0..4 {
                assert!((ir.get(&[0, p, c]) - want_r[p][c]).abs() < 1e-6);
                assert!((it.get(&[0, p, c]) - want_t[p][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_initialized_gate_is_one_half() {
        let (mif, store) = build(4, 2, 0);
        let s = channel_gate(&randmap(4, 4, 4, 1), &randmap(4, 4, 4, 2), &mif.gate, &store).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_thermal_adds_half_the_window_mean() {
        // I_R draws values from the zero map, but I_T attends uniformly over F_R
        let (mif, store) = build(3, 2, 0);
        let fr = randmap(3, 4, 4, 5);
        let out = mif_fuse(&fr, &Tensor::zeros(&[3, 4, 4]), &mif, &store).unwrap();
        let mut want = fr.clone();
        for ch in 0..3 {
            for r in 0..4 {
                for c in 0..4 {
                    let (r0, c0) = (r / 2 * 2, c / 2 * 2);
                    let mean = (fr.get(&[ch, r0, c0]) + fr.get(&[ch, r0, c0 + 1]) + fr.get(&[ch, r0 + 1, c0]) + fr.get(&[ch, r0 + 1, c0 + 1])) / 4.0;
                    want.set(&[ch, r, c], fr.get(&[ch, r, c]) + 0.5 * mean);
                }
            }
        }
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_modalities_double_plus_self_attention() {
        let (mif, store) = build(3, 2, 0);
        let f = randmap(3, 4, 4, 6);
        let out = mif_fuse(&f, &f, &mif, &store).unwrap();
        let grid = window_partition(&f, 2).unwrap();
        let (self_att, _) = cross_window_interaction(&grid.windows, &grid.windows).unwrap();
        let fprime = window_merge(&WindowGrid { windows: self_att, layout: grid.layout }).unwrap();
        let want = Tensor::from_fn(f.shape(), |i| 2.0 * f.data()[i] + 2.0 * 0.5 * fprime.data()[i]);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fuse_matches_composition_oracle_with_trained_gate() {
        let (mif, mut store) = build(2, 2, 1);
        // give the gate nonzero output weights so the reweighting matters
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        *store.get_mut(mif.gate.output.weight) = Tensor::randn(&[1, 2], 1.0, &mut rng);
        let fr = randmap(2, 3, 3, 7);
        let ft = randmap(2, 3, 3, 8);
        let out = mif_fuse(&fr, &ft, &mif, &store).unwrap();

        // gate: stats of the sum through the perceptron
        let sum = ops::add(&fr, &ft).unwrap();
        let stats = ops::channel_stats(&sum).unwrap();
        let w1 = store.get(mif.gate.hidden.weight);
        let b1 = store.get(mif.gate.hidden.bias.unwrap());
        let w2 = store.get(mif.gate.output.weight);
        let b2 = store.get(mif.gate.output.bias.unwrap());
        let h = (w1.data()[0..6].iter().zip(stats.data()).map(|(a, b)| a * b).sum::<f64>() + b1.data()[0]).max(0.0);
        let s: Vec<f64> = (0..2).map(|c| 1.0 / (1.0 + (-(h * w2.data()[c] + b2.data()[c])).exp())).collect();

        // interaction window by window with explicit loops
        let mut want = ops::add(&fr, &ft).unwrap();
        for tr in 0..2 {
            for tc in 0..2 {
                let mut pix = Vec::new();
                for pr in 0..2 {
                    for pc in 0..2 {
                        pix.push((tr * 2 + pr, tc * 2 + pc));
                    }
                }
                let fetch = |f: &Tensor<f64>| -> Vec<Vec<f64>> {
                    pix.iter()
                        .map(|&(r, c)| (0..2).map(|ch| if r < 3 && c < 3 { f.get(&[ch, r, c]) } else { 0.0 }).collect())
                        .collect()
                };
                let (r, t) = (fetch(&fr), fetch(&ft));
                let (ir, it) = (loop_interaction(&r, &t), loop_interaction(&t, &r));
                for (p, &(row, col)) in pix.iter().enumerate() {
                    if row < 3 && col < 3 {
                        for ch in 0..2 {
                            let v = want.get(&[ch, row, col]) + s[ch] * ir[p][ch] + s[ch] * it[p][ch];
                            want.set(&[ch, row, col], v);
                        }
                    }
                }
            }
        }
        assert!(out.max_abs_diff(&want) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_is_exact(seed in 0u64..1000, c in 1usize..4, h in 1usize..12, w in 1usize..12, win in 1usize..6) {
            prop_assume!(win <= h && win <= w);
            let f = randmap(c, h, w, seed);
            let grid = window_partition(&f, win).unwrap();
            prop_assert_eq!(grid.windows.shape()[0], grid.layout.windows());
            prop_assert_eq!(window_merge(&grid).unwrap(), f);
        }

        #[test]
        fn fusion_is_symmetric_and_gates_bounded(seed in 0u64..1000, scale in 0.1f64..4.0) {
            let (mif, mut store) = build(4, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            *store.get_mut(mif.gate.output.weight) = Tensor::randn(&[2, 4], 0.5, &mut rng);
            let fr = randmap(4, 5, 6, seed + 1).map(|v| v * scale);
            let ft = randmap(4, 5, 6, seed + 2).map(|v| v * scale);
            let a = mif_fuse(&fr, &ft, &mif, &store).unwrap();
            let b = mif_fuse(&ft, &fr, &mif, &store).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_finite());
            let s = channel_gate(&fr, &ft, &mif.gate, &store).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn interaction_stays_in_the_hull_of_the_other_modality(seed in 0u64..1000) {
            let wr = randmap(2, 4, 3, seed).reshape(&[2, 4, 3]).unwrap();
            let wt = randmap(2, 4, 3, seed + 9).reshape(&[2, 4, 3]).unwrap();
            let (ir, _) = cross_window_interaction(&wr, &wt).unwrap();
            for win in 0..2 {
                for ch in 0..3 {
                    let vals: Vec<f64> = (0..4).map(|p| wt.get(&[win, p, ch])).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for p in 0..4 {
                        let v = ir.get(&[win, p, ch]);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
