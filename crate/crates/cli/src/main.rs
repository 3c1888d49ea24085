use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vqcs_core::experiment::{
    bench_runtime, evaluate_codec, generate_splits, run_experiment, run_method_point, write_rows,
    Codec, ExperimentConfig, MethodConfig, ResultRow, STATUS_OK,
};
use vqcs_core::signal::Dataset;
use vqcs_core::trainer::Checkpoint;

#[derive(Parser)]
#[command(
    name = "vqcs",
    version,
    about = "Quantized compressed sensing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.data.seeds = vec![seed];
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw train/val/test splits and save them as train.bin, val.bin, test.bin
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also write each split as CSV
        #[arg(long)]
        csv: bool,
    },
    /// Train every DeepVQCS and CE-DecNet point; checkpoints go to --out
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a saved dataset (or the config's test split)
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Result CSV; defaults to --out
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run only the classical (untrained) methods of the config
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Run every method at every rate point
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Median online-phase times per measurement vector
    BenchTime {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoints for DeepVQCS and CE-DecNet rows
        #[arg(long, num_args = 1..)]
        ckpt: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { common, csv } => gen_data(&common, csv),
        Command::Train { common } => train_models(&common),
        Command::Evaluate {
            common,
            ckpt,
            data,
            csv,
        } => evaluate(&common, &ckpt, data.as_deref(), csv),
        Command::Baseline { common } => {
            let mut cfg = common.load()?;
            cfg.methods.retain(|m| !m.kind.is_trained());
            if cfg.methods.is_empty() {
                bail!("the config lists no baseline methods");
            }
            sweep(cfg, &common)
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            sweep(cfg, &common)
        }
        Command::BenchTime { common, ckpt } => {
            let mut cfg = common.load()?;
            if let Some(out) = &common.out {
                cfg.output.timing_csv = Some(out.clone());
            }
            for row in bench_runtime(&cfg, &ckpt)? {
                let ratio = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{v:.2}"));
                println!(
                    "{:<12} R={:<7.4} encode {:.3e}s decode {:.3e}s total {:.3e}s  ratios {}/{}/{}",
                    row.method,
                    row.rate,
                    row.encode_s,
                    row.decode_s,
                    row.total_s,
                    ratio(row.encode_ratio),
                    ratio(row.decode_ratio),
                    ratio(row.total_ratio)
                );
            }
            Ok(())
        }
    }
}

fn gen_data(common: &Common, csv: bool) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out()?;
    std::fs::create_dir_all(out)?;
    let splits = generate_splits(&cfg, cfg.data.seeds[0])?;
    for (name, data) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        data.save(out.join(format!("{name}.bin")))?;
        if csv {
            data.write_csv(out.join(format!("{name}.csv")))?;
        }
        println!("{name}: {} samples", data.len());
    }
    Ok(())
}

fn train_models(common: &Common) -> Result<()> {
    let mut cfg = common.load()?;
    cfg.output.checkpoint_dir = Some(common.out()?.to_path_buf());
    let trained: Vec<MethodConfig> = cfg
        .methods
        .iter()
        .filter(|m| m.kind.is_trained())
        .cloned()
        .collect();
    if trained.is_empty() {
        bail!("the config lists no trained methods");
    }
    let mut failures = 0;
    for &seed in &cfg.data.seeds {
        let splits = generate_splits(&cfg, seed)?;
        for method in &trained {
            for point in method.points(&cfg.signal)? {
                let row = run_method_point(&cfg, method, &point, &splits, seed);
                if row.is_ok() {
                    println!(
                        "{} K={} I={} test {:.3} dB -> {}",
                        row.method, row.k, row.levels, row.nmse_db, row.checkpoint
                    );
                } else {
                    failures += 1;
                    println!("{} K={} I={} {}", row.method, row.k, row.levels, row.status);
                }
            }
        }
    }
    if failures > 0 {
        bail!("{failures} training run(s) failed");
    }
    Ok(())
}

fn evaluate(common: &Common, ckpt: &Path, data: Option<&Path>, csv: Option<PathBuf>) -> Result<()> {
    let checkpoint =
        Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (dataset, seed) = match data {
        Some(path) => (
            Dataset::load(path)?,
            common.seed.unwrap_or(checkpoint.config.seed),
        ),
        None => {
            let cfg = common
                .load()
                .context("without --data, the test split comes from --config")?;
            let seed = cfg.data.seeds[0];
            (generate_splits(&cfg, seed)?.test, seed)
        }
    };
    let model = &checkpoint.model;
    let eval = evaluate_codec(&Codec::Deep(model.clone()), &dataset)?;
    let row = ResultRow {
        method: if model.enc_net.is_some() {
            "DeepVQCS"
        } else {
            "CE-DecNet"
        }
        .into(),
        n: dataset.n_dim(),
        m: dataset.m_dim(),
        s: dataset.sparsity,
        k: model.k_width(),
        levels: model.num_levels(),
        codebook_bits: None,
        rate: vqcs_core::signal::rate_bits(model.k_width(), model.num_levels(), dataset.n_dim()),
        nmse_db: eval.nmse_db,
        encode_time_s: eval.encode_secs,
        decode_time_s: eval.decode_secs,
        total_time_s: eval.encode_secs + eval.decode_secs,
        seed,
        checkpoint: ckpt.display().to_string(),
        status: STATUS_OK.into(),
    };
    println!(
        "{} R={:.4} NMSE {:.3} dB over {} samples",
        row.method,
        row.rate,
        row.nmse_db,
        dataset.len()
    );
    if let Some(path) = csv.or_else(|| common.out.clone()) {
        write_rows(path, &[row])?;
    }
    Ok(())
}

fn sweep(mut cfg: ExperimentConfig, common: &Common) -> Result<()> {
    if let Some(out) = &common.out {
        cfg.output.csv = Some(out.clone());
    }
    let rows = run_experiment(&cfg)?;
    for row in &rows {
        println!(
            "{:<12} R={:<7.4} K={:<3} I={:<6} {}",
            row.method,
            row.rate,
            row.k,
            row.levels,
            fmt_outcome(row)
        );
    }
    Ok(())
}

fn fmt_outcome(row: &ResultRow) -> String {
    if row.is_ok() {
        format!("{:.3} dB", row.nmse_db)
    } else {
        row.status.clone()
    }
}
