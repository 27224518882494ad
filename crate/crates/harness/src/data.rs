//! Samples, the synthetic shape generator and dataset directories.

use std::path::{Path, PathBuf};

use efnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};
use crate::netpbm::{read_image, write_image, Image};

/// Label value excluded from loss and metrics.
pub const IGNORE: u8 = 255;

/// Ground-truth facts about one generated shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeInfo {
    pub class: u8,
    /// Drawn into the thermal image only.
    pub thermal_only: bool,
}

/// One aligned RGB, thermal and label triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3×H×W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1×H×W]` in `[0, 1]`.
    pub thermal: Tensor<f32>,
    /// Row-major class ids, [`IGNORE`] for unlabeled pixels.
    pub labels: Vec<u8>,
    /// Shapes drawn by the generator; empty for loaded samples.
    pub shapes: Vec<ShapeInfo>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    /// Pixels labeled with the class of a thermal-only shape.
    pub fn thermal_only_mask(&self) -> Vec<bool> {
        let hidden: Vec<u8> = self.shapes.iter().filter(|s| s.thermal_only).map(|s| s.class).collect();
        self.labels.iter().map(|l| hidden.contains(l)).collect()
    }
}

/// Generator settings beyond the sample count, extent, class count and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    /// Probability that a shape is invisible in RGB.
    pub thermal_only: f64,
    pub rgb_noise: f64,
    pub thermal_noise: f64,
    /// Multiplies every shape extent.
    pub shape_scale: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            thermal_only: 0.3,
            rgb_noise: 0.04,
            thermal_noise: 0.04,
            shape_scale: 1.0,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saturated color of class `c` out of `k`, hues evenly spaced.
fn class_color(c: usize, k: usize) -> [f64; 3] {
    let hue = (c - 1) as f64 / (k - 1) as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let [r, g, b] = match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

const PLACEMENT_TRIES: usize = 20;

/// Rectangle for odd classes, disc for even ones, sized relative to `s`.
fn shape_mask(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, s: f64) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    if c % 2 == 1 {
        let rh = (rng.random_range(0.3 * s..0.55 * s).round() as usize).clamp(1, h);
        let rw = (rng.random_range(0.3 * s..0.55 * s).round() as usize).clamp(1, w);
        let r0 = rng.random_range(0..=h - rh);
        let c0 = rng.random_range(0..=w - rw);
        for y in r0..r0 + rh {
            mask[y * w + c0..y * w + c0 + rw].iter_mut().for_each(|m| *m = true);
        }
    } else {
        let rad = rng.random_range(0.15 * s..0.28 * s).min(h.min(w) as f64 / 2.0);
        let cy = rng.random_range(rad..=h as f64 - rad);
        let cx = rng.random_range(rad..=w as f64 - rad);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                mask[y * w + x] = dy * dy + dx * dx <= rad * rad;
            }
        }
    }
    mask
}

fn class_temperature(c: usize, k: usize) -> f64 {
    0.35 + 0.6 * c as f64 / (k - 1) as f64
}

/// `n` samples of `h×w` with `k − 1` shapes each (rectangles for odd
/// classes, discs for even ones) on background class 0.
pub fn gen_synthetic(n: usize, h: usize, w: usize, k: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_synthetic_with(n, h, w, k, seed, &GenOptions::default())
}

pub fn gen_synthetic_with(n: usize, h: usize, w: usize, k: usize, seed: u64, opt: &GenOptions) -> Result<Vec<Sample>> {
    if !(2..=IGNORE as usize).contains(&k) {
        return Err(HarnessError::contract(format!("class count {k} outside [2, 255]")));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(HarnessError::contract(format!("extent {h}×{w} is not a positive multiple of 4")));
    }
    if !(0.0..=1.0).contains(&opt.thermal_only) {
        return Err(HarnessError::contract("thermal-only probability outside [0, 1]"));
    }
    let rgb_noise = Normal::new(0.0, opt.rgb_noise).map_err(|e| HarnessError::contract(e.to_string()))?;
    let th_noise = Normal::new(0.0, opt.thermal_noise).map_err(|e| HarnessError::contract(e.to_string()))?;
    let s = h.min(w) as f64 * opt.shape_scale;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let bg = 0.25 + rng.random_range(-0.05..0.05);
        let mut labels = vec![0u8; h * w];
        let mut color = vec![[bg; 3]; h * w];
        let mut temp = vec![0.15; h * w];
        let mut shapes = Vec::with_capacity(k - 1);
        for c in 1..k {
            let thermal_only = rng.random_bool(opt.thermal_only);
            // a few placements are tried and the one overlapping earlier shapes least wins
            let mut best: Option<(usize, Vec<bool>)> = None;
            for _ in 0..PLACEMENT_TRIES {
                let mask = shape_mask(&mut rng, c, h, w, s);
                let overlap = mask.iter().zip(&labels).filter(|(&m, &l)| m && l != 0).count();
                if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                    best = Some((overlap, mask));
                }
                if overlap == 0 {
                    break;
                }
            }
            let mask = best.expect("at least one placement").1;
            let inside = |y: usize, x: usize| mask[y * w + x];
            for y in 0..h {
                for x in 0..w {
                    if inside(y, x) {
                        let p = y * w + x;
                        labels[p] = c as u8;
                        temp[p] = class_temperature(c, k);
                        // an RGB-invisible shape still occludes what lies behind it
                        color[p] = if thermal_only { [bg; 3] } else { class_color(c, k) };
                    }
                }
            }
            shapes.push(ShapeInfo {
                class: c as u8,
                thermal_only,
            });
        }
        let mut rgb = vec![0u8; 3 * h * w];
        for ch in 0..3 {
            for p in 0..h * w {
                rgb[ch * h * w + p] = quantize(color[p][ch] + rgb_noise.sample(&mut rng));
            }
        }
        let thermal: Vec<u8> = temp.iter().map(|t| quantize(t + th_noise.sample(&mut rng))).collect();
        out.push(Sample {
            rgb: planar_to_tensor(&rgb, 3, h, w),
            thermal: planar_to_tensor(&thermal, 1, h, w),
            labels,
            shapes,
        });
    }
    Ok(out)
}

fn planar_to_tensor(bytes: &[u8], c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[c, h, w], bytes.iter().map(|&b| b as f32 / 255.0).collect()).expect("extent checked")
}

fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().map(|&v| quantize(v as f64)).collect()
}

/// Interleaved RGB raster from a planar `[3×H×W]` tensor.
pub fn rgb_image(t: &Tensor<f32>) -> Result<Image> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let planar = tensor_to_bytes(t);
    let data = (0..h * w).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| planar[c * h * w + p]).collect();
    Image::new(w, h, 3, data)
}

pub fn gray_image(bytes: Vec<u8>, h: usize, w: usize) -> Result<Image> {
    Image::new(w, h, 1, bytes)
}

/// Reads an RGB PPM, a thermal PGM and a label PGM into one sample.
pub fn load_pair(rgb_path: &Path, thermal_path: &Path, label_path: &Path) -> Result<Sample> {
    let (rgb, thermal) = load_inputs(rgb_path, thermal_path)?;
    let labels = read_image(label_path)?;
    if labels.channels != 1 {
        return Err(HarnessError::format(label_path, 0, "labels must be a P5 graymap"));
    }
    if (labels.height, labels.width) != (rgb.shape()[1], rgb.shape()[2]) {
        return Err(HarnessError::format(
            label_path,
            0,
            format!("labels are {}×{}, rgb is {}×{}", labels.height, labels.width, rgb.shape()[1], rgb.shape()[2]),
        ));
    }
    Ok(Sample {
        rgb,
        thermal,
        labels: labels.data,
        shapes: Vec::new(),
    })
}

/// Reads the two input images of a pair without labels.
pub fn load_inputs(rgb_path: &Path, thermal_path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let rgb = read_image(rgb_path)?;
    if rgb.channels != 3 {
        return Err(HarnessError::format(rgb_path, 0, "rgb must be a P6 pixmap"));
    }
    let th = read_image(thermal_path)?;
    if th.channels != 1 {
        return Err(HarnessError::format(thermal_path, 0, "thermal must be a P5 graymap"));
    }
    if (th.height, th.width) != (rgb.height, rgb.width) {
        return Err(HarnessError::format(
            thermal_path,
            0,
            format!("thermal is {}×{}, rgb is {}×{}", th.height, th.width, rgb.height, rgb.width),
        ));
    }
    let (h, w) = (rgb.height, rgb.width);
    let planar: Vec<u8> = (0..3).flat_map(|c| (0..h * w).map(move |p| (c, p))).map(|(c, p)| rgb.data[p * 3 + c]).collect();
    Ok((planar_to_tensor(&planar, 3, h, w), planar_to_tensor(&th.data, 1, h, w)))
}

/// File paths of sample `idx` inside a dataset directory.
pub fn sample_paths(dir: &Path, idx: usize) -> [PathBuf; 3] {
    ["rgb.ppm", "thermal.pgm", "label.pgm"].map(|suffix| dir.join(format!("{idx:05}_{suffix}")))
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let [rp, tp, lp] = sample_paths(dir, i);
        let (h, w) = (s.height(), s.width());
        write_image(&rp, &rgb_image(&s.rgb)?)?;
        write_image(&tp, &gray_image(tensor_to_bytes(&s.thermal), h, w)?)?;
        write_image(&lp, &gray_image(s.labels.clone(), h, w)?)?;
    }
    Ok(())
}

/// Loads every `NNNNN_rgb.ppm` triple in `dir`, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| HarnessError::io(dir, e))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| n.strip_suffix("_rgb.ppm")).and_then(|n| n.parse::<usize>().ok()) {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(HarnessError::contract(format!("no samples found in {}", dir.display())));
    }
    indices
        .into_iter()
        .map(|i| {
            let [rp, tp, lp] = sample_paths(dir, i);
            load_pair(&rp, &tp, &lp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_well_formed() {
        let a = gen_synthetic(5, 32, 32, 3, 9).unwrap();
        assert_eq!(a, gen_synthetic(5, 32, 32, 3, 9).unwrap());
        assert_ne!(a, gen_synthetic(5, 32, 32, 3, 10).unwrap());
        for s in &a {
            assert_eq!(s.rgb.shape(), &[3, 32, 32]);
            assert_eq!(s.thermal.shape(), &[1, 32, 32]);
            assert!(s.labels.iter().all(|&l| l < 3));
            assert!(s.rgb.data().iter().chain(s.thermal.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.shapes.len(), 2);
        }
    }

    #[test]
    fn binary_case_gives_binary_masks() {
        for s in gen_synthetic(20, 16, 16, 2, 1).unwrap() {
            assert!(s.labels.iter().all(|&l| l <= 1));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(gen_synthetic(1, 32, 32, 1, 0), Err(HarnessError::Contract(_))));
        assert!(matches!(gen_synthetic(1, 30, 32, 3, 0), Err(HarnessError::Contract(_))));
    }

    #[test]
    fn thermal_only_frequency_matches_the_setting() {
        let samples = gen_synthetic(1000, 8, 8, 3, 21).unwrap();
        let shapes: Vec<&ShapeInfo> = samples.iter().flat_map(|s| &s.shapes).collect();
        assert_eq!(shapes.len(), 2000);
        let frac = shapes.iter().filter(|s| s.thermal_only).count() as f64 / shapes.len() as f64;
        // binomial standard deviation is about 0.01
        assert!((frac - 0.3).abs() < 0.04, "{frac}");
    }

    #[test]
    fn thermal_only_shapes_are_invisible_in_rgb() {
        for s in gen_synthetic(30, 32, 32, 3, 4).unwrap() {
            let mask = s.thermal_only_mask();
            let (h, w) = (32, 32);
            for p in (0..h * w).filter(|&p| mask[p]) {
                // background gray: the three channels agree up to noise
                let px: Vec<f32> = (0..3).map(|c| s.rgb.data()[c * h * w + p]).collect();
                assert!(px.iter().all(|&v| (v - px[0]).abs() < 0.4));
                assert!(s.thermal.data()[p] > 0.4);
            }
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_synthetic(3, 8, 12, 3, 2).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.thermal, b.thermal);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn load_pair_checks_extents() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_synthetic(1, 8, 8, 3, 2).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let [rp, tp, lp] = sample_paths(dir.path(), 0);
        write_image(&lp, &gray_image(vec![0; 16], 4, 4).unwrap()).unwrap();
        assert!(matches!(load_pair(&rp, &tp, &lp), Err(HarnessError::Format { .. })));
        write_image(&tp, &Image::new(8, 8, 3, vec![0; 192]).unwrap()).unwrap();
        assert!(matches!(load_pair(&rp, &tp, &lp), Err(HarnessError::Format { .. })));
    }

    #[test]
    fn all_white_ppm_loads_as_ones_and_255_labels_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let (rp, tp, lp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"), dir.path().join("l.pgm"));
        write_image(&rp, &Image::new(2, 2, 3, vec![255; 12]).unwrap()).unwrap();
        write_image(&tp, &Image::new(2, 2, 1, vec![0; 4]).unwrap()).unwrap();
        write_image(&lp, &Image::new(2, 2, 1, vec![1, IGNORE, 0, IGNORE]).unwrap()).unwrap();
        let s = load_pair(&rp, &tp, &lp).unwrap();
        assert!(s.rgb.data().iter().all(|&v| v == 1.0));
        assert_eq!(s.labels.iter().filter(|&&l| l == IGNORE).count(), 2);
    }
}
