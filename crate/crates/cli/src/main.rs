//! `mgi`: data generation, contrastive pretraining, segmentation fine-tuning,
//! evaluation and verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgi::checkpoint::Checkpoint;
use mgi::config::RunConfig;
use mgi::data::manifest::{build_dataset, Manifest};
use mgi::data::Split;
use mgi::train::{self, Metrics};
use mgi::verify::{verify, VerifyOptions};
use mgi::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mgi",
    version,
    about = "Gene/image contrastive pretraining and fusion segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic paired dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of pairs (defaults to `data.n_samples`).
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Contrastive pretraining of both encoders and the projection heads.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the fusion decoder on top of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep encoder weights fixed.
        #[arg(long)]
        freeze_encoders: bool,
        /// Replace gene embeddings with zeros (image-only ablation).
        #[arg(long)]
        zero_genes: bool,
    },
    /// Retrieval recall and Dice of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Gradient, scan, loss and format checks; exits nonzero on any failure.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Check every coordinate of the configured architecture.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Worker threads for per-sample work; training steps stay sequential.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    loss_variant: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    /// `base`, then the config file, then flags, then `--set` overrides.
    fn config(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_str(&text)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.data_dir = d.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig, stage: &str) -> Result<()> {
        if let Some(t) = self.tau {
            cfg.set("align.tau", &t.to_string())?;
        }
        if let Some(v) = &self.loss_variant {
            cfg.set("align.loss_variant", v)?;
        }
        if let Some(b) = self.batch_size {
            cfg.set(&format!("{stage}.batch_size"), &b.to_string())?;
        }
        if let Some(e) = self.epochs {
            cfg.set(&format!("{stage}.epochs"), &e.to_string())?;
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `cfg.threads` workers.
fn in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
        .install(f)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<mgi::data::PairedSample>> {
    Manifest::load(&cfg.data_dir)?.load_split(split)
}

fn write_metrics(dir: &Path, m: &Metrics) -> Result<()> {
    let text = m.to_tsv();
    print!("{text}");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn log_line(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, n_samples } => {
            let cfg = common.config(RunConfig::default())?;
            cfg.validate()?;
            let n = n_samples.unwrap_or(cfg.data.n_samples);
            let m = in_pool(&cfg, || {
                build_dataset(&cfg.data, n, cfg.seed, &cfg.data_dir)
            })?;
            let train = m.split(Split::Train).len();
            println!(
                "wrote {n} pairs to {} ({train} train, {} test)",
                cfg.data_dir.display(),
                n - train
            );
        }
        Command::Pretrain { common, train } => {
            let mut cfg = common.config(RunConfig::default())?;
            train.apply(&mut cfg, "pretrain")?;
            let out = in_pool(&cfg, || {
                let samples = load_split(&cfg, Split::Train)?;
                train::pretrain(&cfg, &samples, &mut log_line)
            })?;
            out.checkpoint.save(&cfg.out)?;
            eprintln!("checkpoint written to {}", cfg.out.display());
        }
        Command::Finetune {
            common,
            train,
            checkpoint,
            freeze_encoders,
            zero_genes,
        } => {
            let from = Checkpoint::load(&checkpoint)?;
            let mut cfg = common.config(from.config.clone())?;
            train.apply(&mut cfg, "finetune")?;
            if common.out.is_none() || cfg.out == checkpoint {
                return Err(Error::InvalidArgument(
                    "finetune needs an --out directory distinct from --checkpoint".into(),
                ));
            }
            cfg.finetune.freeze_encoders |= freeze_encoders;
            cfg.finetune.zero_genes |= zero_genes;
            let out = in_pool(&cfg, || {
                let samples = load_split(&cfg, Split::Train)?;
                train::finetune(&cfg, &from, &samples, &mut log_line)
            })?;
            out.checkpoint.save(&cfg.out)?;
            eprintln!("checkpoint written to {}", cfg.out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            let out_given = common.out.is_some();
            let cfg = common.config(ckpt.config.clone())?;
            ckpt.config.data_dir = cfg.data_dir.clone();
            let m = in_pool(&cfg, || {
                let samples = load_split(&cfg, split)?;
                train::evaluate(&ckpt, &samples, &split.to_string())
            })?;
            write_metrics(if out_given { &cfg.out } else { &checkpoint }, &m)?;
        }
        Command::Verify { common, full } => {
            let cfg = common.config(RunConfig::default())?;
            let opts = VerifyOptions {
                max_coords: if full {
                    None
                } else {
                    VerifyOptions::default().max_coords
                },
                ..VerifyOptions::default()
            };
            let report = in_pool(&cfg, || verify(&cfg, &opts))?;
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mgi(args: &[&str]) -> Result<bool> {
        let argv = std::iter::once("mgi").chain(args.iter().copied());
        run(Cli::try_parse_from(argv).expect("arguments parse"))
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let err = mgi(&["gen-data", "--set", "data.bogus=1"]).unwrap_err();
        assert!(err.to_string().contains("data.bogus"), "{err}");
    }

    #[test]
    fn override_without_equals_is_an_error() {
        assert!(mgi(&["gen-data", "--set", "seed"]).is_err());
    }

    #[test]
    fn config_file_is_applied_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# comment\ndata.n_genes = 0\n").unwrap();
        let data = dir.path().join("d");
        assert!(mgi(&["gen-data", "--config", s(&cfg), "--data", s(&data)]).is_err());
        assert!(!data.exists());
    }

    #[test]
    fn gen_data_writes_an_exact_split() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let args = [
            "gen-data",
            "--data",
            s(&data),
            "--n-samples",
            "10",
            "--seed",
            "3",
            "--threads",
            "1",
        ];
        assert!(mgi(&args).unwrap());
        let m = Manifest::load(&data).unwrap();
        assert_eq!(
            (m.split(Split::Train).len(), m.split(Split::Test).len()),
            (8, 2)
        );
    }

    #[test]
    fn finetune_refuses_to_overwrite_its_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (data, pre) = (dir.path().join("data"), dir.path().join("pre"));
        let common = ["--threads", "1", "--data", s(&data)];
        assert!(mgi(&[&["gen-data"][..], &common, &["--n-samples", "10"]].concat()).unwrap());
        let pretrain = [
            &["pretrain"][..],
            &common,
            &["--epochs", "1", "--batch-size", "4", "--out", s(&pre)],
        ]
        .concat();
        assert!(mgi(&pretrain).unwrap());
        for extra in [&[][..], &["--out", s(&pre)][..]] {
            let err = mgi(&[
                &["finetune"][..],
                &common,
                &["--checkpoint", s(&pre)],
                extra,
            ]
            .concat())
            .unwrap_err();
            assert!(err.to_string().contains("--out"), "{err}");
        }
    }

    #[test]
    fn eval_of_missing_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(mgi(&["eval", "--checkpoint", s(&dir.path().join("nope"))]).is_err());
    }
}
