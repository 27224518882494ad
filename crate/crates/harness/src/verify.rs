//! Self-verification suites: oracle equivalence, gradient checks and structural invariants.

use std::fmt;

use efnet_core::dbtc::{
    assign_clusters, brute_force_oracle, center_score, cluster, dual_distance_with, importance_attention, local_density,
    merge_tokens, select_centers, separation_delta, ClusterResult, DbtcConfig, DistanceMode, TokenSet,
};
use efnet_core::gradcheck::cases::{composed_cases, primitive_cases, GradCase, STEP, TOLERANCE};
use efnet_core::mif::{mif_fuse, window_merge, window_partition, Mif};
use efnet_core::nn::ParamStore;
use efnet_core::{mfad, ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::IGNORE;
use crate::loss::cross_entropy_graph;

/// Clustering implementation under test, compared against the brute-force oracle.
pub type ClusterFn = fn(&TokenSet<f64>, &DbtcConfig) -> efnet_core::Result<ClusterResult<f64>>;

/// The library path: spatial term taken from the token coordinates.
pub fn library_cluster(ts: &TokenSet<f64>, cfg: &DbtcConfig) -> efnet_core::Result<ClusterResult<f64>> {
    cluster(ts, &ts.coords, cfg)
}

/// Mutation fixture: the library pipeline fed negated distances. The clustering
/// suite must reject it.
pub fn sign_flipped_cluster(ts: &TokenSet<f64>, cfg: &DbtcConfig) -> efnet_core::Result<ClusterResult<f64>> {
    let n = ts.len();
    let distance = dual_distance_with(&ts.tokens, &ts.coords, cfg.tau, cfg.mode)?.map(|v| -v);
    let density = local_density(&distance, cfg.k.min(n - 1))?;
    let separation = separation_delta(&distance, &density)?;
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

pub const CLUSTER_TOLERANCE: f64 = 1e-10;
pub const STRUCTURE_TOLERANCE: f64 = 1e-6;
pub const TAUS: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];
pub const KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub cluster_instances: usize,
    pub max_tokens: usize,
    pub grad_seeds: u64,
    pub window_cases: usize,
    pub decoder_cases: usize,
    pub structure_cases: usize,
    pub mif_cases: usize,
    pub seed: u64,
    pub cluster_fn: ClusterFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            cluster_instances: 1000,
            max_tokens: 256,
            grad_seeds: 20,
            window_cases: 100,
            decoder_cases: 100,
            structure_cases: 100,
            mif_cases: 50,
            seed: 0,
            cluster_fn: library_cluster,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Description of the first failing case.
    pub first_failure: Option<String>,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        SuiteReport {
            name,
            cases: 0,
            failures: 0,
            max_error: 0.0,
            tolerance,
            first_failure: None,
        }
    }

    /// Records one case; a NaN error counts as a failure.
    fn record(&mut self, error: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(error);
        }
        if !ok || error.is_nan() || error > self.tolerance {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    fn error(&mut self, what: String) {
        self.record(f64::NAN, false, || what);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>6} {:>7} {:>10} {:>9}  status", "suite", "cases", "failed", "max_error", "tolerance")?;
        for s in &self.suites {
            let status = if s.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<12} {:>6} {:>7} {:>10.2e} {:>9.0e}  {status}",
                s.name, s.cases, s.failures, s.max_error, s.tolerance
            )?;
            if let Some(why) = &s.first_failure {
                writeln!(f, "  first failure: {why}")?;
            }
        }
        write!(f, "verify: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn verify(opt: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        suites: vec![
            clustering_suite(opt),
            gradient_suite(opt.grad_seeds),
            window_suite(opt.window_cases, opt.seed),
            decoder_suite(opt.decoder_cases, opt.seed),
            structure_suite(opt.structure_cases, opt.seed),
            mif_symmetry_suite(opt.mif_cases, opt.seed),
        ],
    }
}

/// Random clustering instance number `i`. About one in five has integer-valued
/// features so that exact distance and density ties occur.
pub fn cluster_instance(seed: u64, i: usize, max_tokens: usize) -> (TokenSet<f64>, DbtcConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let n = rng.random_range(2..=max_tokens.max(2));
    let c = rng.random_range(1..=16);
    let mut tokens = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
    let mut coords = Tensor::<f64>::uniform(&[n, 2], 0.0, 1.0, &mut rng);
    if rng.random_bool(0.2) {
        tokens = tokens.map(|v| v.round());
        coords = coords.map(|v| (v * 4.0).round() / 4.0);
    }
    let importance = Tensor::randn(&[n], 0.5, &mut rng);
    let m = rng.random_range(1..=n);
    let cfg = DbtcConfig {
        tau: TAUS[rng.random_range(0..TAUS.len())],
        k: KS[rng.random_range(0..KS.len())].min(n - 1),
        ratio: m as f64 / n as f64,
        mode: DistanceMode::Printed,
    };
    (TokenSet::new(tokens, coords, importance, 0, 0).expect("valid instance"), cfg)
}

pub fn clustering_suite(opt: &VerifyOptions) -> SuiteReport {
    let mut s = SuiteReport::new("clustering", CLUSTER_TOLERANCE);
    for i in 0..opt.cluster_instances {
        let (ts, cfg) = cluster_instance(opt.seed, i, opt.max_tokens);
        let n = ts.len();
        let main = match (opt.cluster_fn)(&ts, &cfg) {
            Ok(r) => r,
            Err(e) => {
                s.error(format!("instance {i} (N = {n}): {e}"));
                continue;
            }
        };
        let oracle = match brute_force_oracle(&ts, cfg.tau, cfg.k, cfg.centers_for(n)) {
            Ok(r) => r,
            Err(e) => {
                s.error(format!("instance {i} (N = {n}): oracle: {e}"));
                continue;
            }
        };
        let same_ints = main.centers == oracle.centers && main.assignment == oracle.assignment;
        let err = [
            main.density.max_abs_diff(&oracle.density),
            main.separation.max_abs_diff(&oracle.separation),
            main.merged.max_abs_diff(&oracle.merged),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        s.record(err, same_ints, || {
            format!(
                "instance {i} (N = {n}, tau = {}, k = {}): centers or assignment differ, real error {err:.2e}",
                cfg.tau, cfg.k
            )
        });
    }
    s
}

/// Distance decoding, softmax and cross-entropy with ignored pixels.
pub fn loss_case() -> GradCase {
    GradCase::new(
        "class_distance_predict_cross_entropy",
        |r| vec![Tensor::randn(&[4, 3, 3], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)],
        |g, v| {
            let d = mfad::class_distance_graph(g, v[0], v[1])?;
            let p = mfad::predict_graph(g, d)?;
            let labels: Vec<u8> = (0..9).map(|px| if px == 4 { IGNORE } else { (px % 3) as u8 }).collect();
            cross_entropy_graph(g, p, &labels).map_err(|e| efnet_core::Error::config("loss", e.to_string()))
        },
    )
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = primitive_cases();
    cases.extend(composed_cases());
    cases.push(loss_case());
    cases
}

pub fn gradient_suite(seeds: u64) -> SuiteReport {
    let mut s = SuiteReport::new("gradients", TOLERANCE);
    for case in gradient_cases() {
        for seed in 0..seeds {
            match case.run(seed) {
                Ok(r) => s.record(r.max_rel_error, true, || {
                    format!("{} seed {seed}: error {:.2e} at {:?} (step {STEP})", case.name, r.max_rel_error, r.worst)
                }),
                Err(e) => s.error(format!("{} seed {seed}: {e}", case.name)),
            }
        }
    }
    s
}

pub fn window_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("windows", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for i in 0..cases {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=12));
        let win = rng.random_range(1..=h.min(w));
        let f = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        match window_partition(&f, win).and_then(|g| window_merge(&g)) {
            Ok(back) => {
                let err = back.max_abs_diff(&f);
                s.record(err, back == f, || format!("case {i}: {c}×{h}×{w} window {win} error {err}"));
            }
            Err(e) => s.error(format!("case {i}: {e}")),
        }
    }
    s
}

pub fn decoder_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("decoder", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec);
    for i in 0..cases {
        let (c, k) = (rng.random_range(1..=8), rng.random_range(2..=6));
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let xf = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        let anchors = Tensor::<f64>::randn(&[k, c], 1.0, &mut rng);
        let outcome = mfad::class_distance(&xf, &anchors).and_then(|d| Ok((mfad::predict(&d)?, d)));
        match outcome {
            Ok((pred, d)) => {
                let argmin = mfad::argmax_axis0(&d.map(|v| -v));
                let mismatches = pred.labels().iter().zip(&argmin).filter(|(a, b)| a != b).count();
                s.record(mismatches as f64, mismatches == 0, || format!("case {i}: {mismatches} pixels disagree"));
            }
            Err(e) => s.error(format!("case {i}: {e}")),
        }
    }
    s
}

/// Row sums of softmax, uniform-weight merging and bias-free importance attention.
pub fn structure_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("structure", STRUCTURE_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717);
    for i in 0..cases {
        let (n, c) = (rng.random_range(1..=12), rng.random_range(1..=6));
        let x = Tensor::<f64>::randn(&[n, c], 3.0, &mut rng);
        let sm = ops::softmax_rows(&x);
        let row_err = (0..n).map(|r| (sm.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        s.record(row_err, true, || format!("case {i}: softmax row sum off by {row_err:.2e}"));

        let m = rng.random_range(1..=n);
        let assignment: Vec<usize> = (0..n).map(|j| if j < m { j } else { rng.random_range(0..m) }).collect();
        let merge_err = merge_tokens(&x, &assignment, &Tensor::zeros(&[n])).map(|merged| {
            let mut err: f64 = 0.0;
            for cl in 0..m {
                let members: Vec<usize> = (0..n).filter(|&j| assignment[j] == cl).collect();
                for ch in 0..c {
                    let mean = members.iter().map(|&j| x.row(j)[ch]).sum::<f64>() / members.len() as f64;
                    err = err.max((merged.row(cl)[ch] - mean).abs());
                }
            }
            err
        });
        match merge_err {
            Ok(err) => s.record(err, true, || format!("case {i}: uniform merge off the mean by {err:.2e}")),
            Err(e) => s.error(format!("case {i}: merge: {e}")),
        }

        let q = Tensor::<f64>::randn(&[m, c], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
        let plain = ops::transpose(&x)
            .and_then(|kt| ops::matmul(&q, &kt))
            .map(|l| ops::softmax_rows(&ops::scale(&l, 1.0 / (c as f64).sqrt())))
            .and_then(|a| ops::matmul(&a, &v));
        match (importance_attention(&q, &x, &v, &Tensor::zeros(&[n])), plain) {
            (Ok(a), Ok(b)) => {
                let err = a.max_abs_diff(&b);
                s.record(err, true, || format!("case {i}: zero-importance attention off by {err:.2e}"));
            }
            (Err(e), _) | (_, Err(e)) => s.error(format!("case {i}: attention: {e}")),
        }
    }
    s
}

pub fn mif_symmetry_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("mif_symmetry", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x313f);
    for i in 0..cases {
        let c = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(2..=9), rng.random_range(2..=9));
        let win = rng.random_range(1..=h.min(w));
        let mut store = ParamStore::<f64>::new();
        let mif = match Mif::new(&mut store, &mut rng, "mif", c, win) {
            Ok(m) => m,
            Err(e) => {
                s.error(format!("case {i}: {e}"));
                continue;
            }
        };
        // a trained-looking gate so the symmetry is not trivially 0.5 everywhere
        let shape = store.get(mif.gate.output.weight).shape().to_vec();
        *store.get_mut(mif.gate.output.weight) = Tensor::randn(&shape, 0.5, &mut rng);
        let fr = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        let ft = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        match (mif_fuse(&fr, &ft, &mif, &store), mif_fuse(&ft, &fr, &mif, &store)) {
            (Ok(a), Ok(b)) => {
                let err = a.max_abs_diff(&b);
                s.record(err, a == b, || format!("case {i}: swapped fusion differs by {err:.2e}"));
            }
            (Err(e), _) | (_, Err(e)) => s.error(format!("case {i}: {e}")),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            cluster_instances: 60,
            max_tokens: 48,
            grad_seeds: 1,
            window_cases: 20,
            decoder_cases: 20,
            structure_cases: 20,
            mif_cases: 10,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn quick_verify_passes_and_reports_every_suite() {
        let r = verify(&quick());
        assert!(r.passed(), "{r}");
        let text = r.to_string();
        for name in ["clustering", "gradients", "windows", "decoder", "structure", "mif_symmetry"] {
            assert!(text.contains(name), "{text}");
            assert!(r.suite(name).unwrap().cases > 0);
        }
        assert!(text.contains("max_error") && text.ends_with("verify: PASS"));
    }

    #[test]
    fn sign_flip_canary_fails_clustering() {
        let opt = VerifyOptions { cluster_fn: sign_flipped_cluster, ..quick() };
        let s = clustering_suite(&opt);
        assert!(!s.passed());
        assert!(s.failures > s.cases / 2, "{s:?}");
        assert!(s.first_failure.is_some());
    }

    #[test]
    fn instances_cover_the_requested_ranges() {
        let mut taus = std::collections::BTreeSet::new();
        let (mut lo, mut hi) = (usize::MAX, 0);
        for i in 0..400 {
            let (ts, cfg) = cluster_instance(0, i, 256);
            lo = lo.min(ts.len());
            hi = hi.max(ts.len());
            taus.insert((cfg.tau * 10.0) as u32);
            assert!((1..=16).contains(&ts.tokens.shape()[1]));
            assert!(cfg.k <= 5 && cfg.k < ts.len());
        }
        assert_eq!(taus.len(), 5);
        assert!(lo < 10 && hi > 240);
    }

    #[test]
    fn nan_errors_fail_the_suite() {
        let mut s = SuiteReport::new("x", 1.0);
        s.record(f64::NAN, true, || "nan".into());
        assert!(!s.passed());
    }
}
