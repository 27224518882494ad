use efnet_core::gradcheck::cases::{composed_cases, primitive_cases, GradCase, TOLERANCE};

const SEEDS: u64 = 20;

fn check_all(cases: Vec<GradCase>) {
    let mut failures = Vec::new();
    for case in &cases {
        for seed in 0..SEEDS {
            let report = case.run(seed).unwrap_or_else(|e| panic!("{}: {e}", case.name));
            if report.max_rel_error.is_nan() || report.max_rel_error >= TOLERANCE {
                failures.push(format!("{} seed {seed}: {:?}", case.name, report));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn primitives_match_central_differences() {
    check_all(primitive_cases());
}

#[test]
fn composed_paths_match_central_differences() {
    check_all(composed_cases());
}

#[test]
fn catalog_covers_every_graph_op() {
    let names: Vec<&str> = primitive_cases().iter().map(|c| c.name).collect();
    for op in [
        "add", "sub", "mul", "scale", "add_scalar", "add_broadcast", "mul_broadcast", "matmul", "affine", "index_select",
        "gather_rows", "concat", "sigmoid", "relu", "exp", "ln", "softmax_rows", "layer_norm", "mean_pool2x2",
        "channel_stats", "upsample_bilinear", "segment_merge", "pairwise_distance", "normalize_axis0", "sum", "mean",
    ] {
        assert!(names.contains(&op), "{op} has no gradient check");
    }
}
