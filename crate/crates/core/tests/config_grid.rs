use efnet_core::dbtc::PositionMode;
use efnet_core::pipeline::{build_model, DecoderMode, DownsampleMode, FusionMode, ModelConfig};
use efnet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_ablation_cell_runs_at_64() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rgb = Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let thermal = Tensor::<f32>::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
    let mut cells = 0;
    for fusion in [FusionMode::Mif, FusionMode::Add, FusionMode::Cat] {
        for position in [PositionMode::None, PositionMode::Sinusoidal, PositionMode::Learnable] {
            for tau in [[0.3, 0.7, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5]] {
                for decoder in [DecoderMode::Euclid, DecoderMode::Mlp] {
                    let cfg = ModelConfig { fusion, position, tau, decoder, ..ModelConfig::default() };
                    let m = build_model::<f32>(&cfg, 1).unwrap();
                    let out = m.forward(&rgb, &thermal).unwrap();
                    assert!(out.full_probs.is_finite(), "{cfg:?}");
                    assert_eq!(out.stage_tokens, [256, 64, 16, 4]);
                    cells += 1;
                }
            }
        }
    }
    assert_eq!(cells, 72);
}

#[test]
fn pooling_baseline_runs() {
    let cfg = ModelConfig { downsample: DownsampleMode::Pool, ..ModelConfig::default() };
    let m = build_model::<f32>(&cfg, 1).unwrap();
    let out = m
        .forward(&Tensor::full(&[3, 64, 64], 0.5), &Tensor::full(&[1, 64, 64], 0.25))
        .unwrap();
    assert!(out.full_probs.is_finite());
    assert_eq!(out.stage_tokens, [256, 64, 16, 4]);
}
