use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use efnet_core::dbtc::{brute_force_oracle, cluster, DbtcConfig, DistanceMode, TokenSet};
use efnet_core::pipeline::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use efnet_core::Tensor;
use efnet_harness::bench::bench;
use efnet_harness::config::RunConfig;
use efnet_harness::data::{gen_synthetic_with, gray_image, load_dataset, load_inputs, save_dataset, GenOptions};
use efnet_harness::netpbm::write_image;
use efnet_harness::train::{evaluate, split_holdout, train};
use efnet_harness::verify::{verify, VerifyOptions};
use efnet_harness::{HarnessError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RGB-thermal segmentation toolkit: data, training, evaluation and self-checks.
#[derive(Parser)]
#[command(name = "efnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle, gradient and invariant suites; exit 1 on any failure.
    Verify {
        /// Smaller instance counts for a fast smoke run.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster random tokens and compare with the brute-force oracle.
    ClusterDemo {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
    /// Write a synthetic dataset of PPM/PGM triples.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 32)]
        hw: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that a shape is invisible in RGB.
        #[arg(long, default_value_t = 0.3)]
        thermal_only: f64,
    },
    /// Train on a dataset directory and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict a label map for one image pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Spread class ids over 0..=255 for viewing instead of raw ids.
        #[arg(long)]
        visual: bool,
    },
    /// Report mIoU and mAcc of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare clustering and pooling downsampling cost.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        sizes: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Operation counts only; output is then fully deterministic.
        #[arg(long)]
        count_only: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Verify { quick, seed } => {
            let mut opt = VerifyOptions { seed, ..VerifyOptions::default() };
            if quick {
                opt.cluster_instances = 100;
                opt.max_tokens = 64;
                opt.grad_seeds = 2;
            }
            let report = verify(&opt);
            println!("{report}");
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::ClusterDemo {
            n,
            tau,
            k,
            ratio,
            seed,
            channels,
        } => cluster_demo(n, tau, k, ratio, seed, channels),
        Command::Gen {
            out,
            n,
            hw,
            k,
            seed,
            thermal_only,
        } => {
            let opt = GenOptions {
                thermal_only,
                ..GenOptions::default()
            };
            let samples = gen_synthetic_with(n, hw, hw, k, seed, &opt)?;
            save_dataset(&out, &samples)?;
            println!("wrote {n} samples of {hw}x{hw} with {k} classes to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out, seed } => train_cmd(config.as_deref(), &data, &out, seed),
        Command::Infer {
            ckpt,
            rgb,
            thermal,
            out,
            visual,
        } => {
            let (rgb_t, th_t) = load_inputs(&rgb, &thermal)?;
            let model = open_checkpoint(&ckpt)?;
            let labels = model.forward(&rgb_t, &th_t)?.labels();
            let k = model.config.classes;
            let bytes = labels
                .iter()
                .map(|&c| if visual { (c * 255 / (k - 1).max(1)) as u8 } else { c as u8 })
                .collect();
            write_image(&out, &gray_image(bytes, model.config.height, model.config.width)?)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ckpt, data } => {
            let model = open_checkpoint(&ckpt)?;
            let samples = load_dataset(&data)?;
            println!("{}", evaluate(&model, &samples)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            sizes,
            config,
            repeats,
            count_only,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => ModelConfig::default(),
            };
            print!("{}", bench(&cfg, &sizes, repeats, !count_only)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Loads a checkpoint, naming the file when it cannot be read.
fn open_checkpoint(path: &Path) -> Result<efnet_core::pipeline::Model> {
    load_checkpoint(path).map_err(|e| match e {
        efnet_core::Error::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn cluster_demo(n: usize, tau: f64, k: usize, ratio: f64, seed: u64, channels: usize) -> Result<ExitCode> {
    if n < 2 || channels == 0 {
        return Err(HarnessError::Config {
            field: "n".into(),
            msg: "need at least 2 tokens and 1 channel".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = Tensor::<f64>::randn(&[n, channels], 1.0, &mut rng);
    let coords = Tensor::<f64>::uniform(&[n, 2], 0.0, 1.0, &mut rng);
    let ts = TokenSet::new(tokens, coords, Tensor::zeros(&[n]), 0, 0)?;
    let cfg = DbtcConfig {
        tau,
        k,
        ratio,
        mode: DistanceMode::Printed,
    };
    let r = cluster(&ts, &ts.coords, &cfg)?;
    let oracle = brute_force_oracle(&ts, tau, k.min(n - 1), r.centers.len())?;
    let mut sizes = vec![0usize; r.centers.len()];
    r.assignment.iter().for_each(|&a| sizes[a] += 1);
    println!("tokens {n}, channels {channels}, tau {tau}, k {k}, ratio {ratio}, seed {seed}");
    println!("centers   {:?}", r.centers);
    println!("sizes     {sizes:?}");
    println!("assignment {:?}", r.assignment);
    let agree = r.centers == oracle.centers
        && r.assignment == oracle.assignment
        && r.merged.max_abs_diff(&oracle.merged) <= 1e-10;
    println!("oracle    {}", if agree { "agrees" } else { "DISAGREES" });
    Ok(if agree { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let samples = load_dataset(data)?;
    let (train_set, test_set) = split_holdout(&samples, cfg.train.holdout);
    let mut model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let every = (cfg.train.steps / 20).max(1);
    let curve = train(&mut model, train_set, &cfg.train, |step, loss| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            eprintln!("step {step:>5}  loss {loss:.5}");
        }
    })?;
    save_checkpoint(&model, out)?;
    let curve_path = out.with_extension("loss.csv");
    let text: String = std::iter::once("step,loss\n".to_string())
        .chain(curve.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    std::fs::write(&curve_path, text).map_err(|e| HarnessError::Io {
        path: curve_path.clone(),
        source: e,
    })?;
    println!("saved {} (loss curve in {})", out.display(), curve_path.display());
    if !test_set.is_empty() {
        let mut report = evaluate(&model, test_set)?;
        report.loss_curve = curve;
        println!("held-out {} samples:\n{report}", test_set.len());
    }
    Ok(ExitCode::SUCCESS)
}
