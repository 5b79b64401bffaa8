//! `dilunet` command-line interface.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command fails.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dilunet::bench::{self, BenchConfig};
use dilunet::gradcheck::Precision;
use dilunet::io::{checkpoint, pgm, synth};
use dilunet::metrics::{self, DiceVariant};
use dilunet::probes;
use dilunet::training::{train_loop, Sample, TrainConfig};
use dilunet::unet::{argmax_labels, predict_logits, ModelConfig, ModelParams};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dilunet", version, about = "Dilated neighborhood attention U-Net for 2-D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset of PGM image/mask pairs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSONL log.
    Train {
        /// JSON file `{"model": {...}, "train": {...}}`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out data for periodic evaluation; the training set otherwise.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Training log path; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Seed for weight initialization.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Print a metrics report for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        dice: DiceArg,
    },
    /// Write the argmax label mask for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of a block pair and the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        f64: bool,
    },
    /// Time the neighborhood kernel against the dense masked oracle.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        delta: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        head_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum DiceArg {
    Standard,
    Printed,
}

/// Contents of the `train --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn print_json(out: &mut impl Write, value: &impl Serialize) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_data(dir: &Path, cfg: &ModelConfig) -> anyhow::Result<Vec<Sample>> {
    let data = synth::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    ensure!(
        cfg.in_channels == 1,
        "PGM data is single-channel but the model expects {} channels",
        cfg.in_channels
    );
    for (i, s) in data.iter().enumerate() {
        ensure!(
            s.height() == cfg.input_size && s.width() == cfg.input_size,
            "image {i} in {} is {}x{}, the model expects {}x{}",
            dir.display(),
            s.height(),
            s.width(),
            cfg.input_size,
            cfg.input_size
        );
    }
    synth::check_labels(&data, cfg.num_classes)?;
    Ok(data)
}

fn dispatch(command: Command, out: &mut impl Write) -> anyhow::Result<i32> {
    match command {
        Command::Synth {
            n,
            size,
            classes,
            seed,
            out: dir,
        } => {
            let manifest = synth::generate(n, size, classes, seed, &dir)?;
            eprintln!("wrote {} pairs to {}", manifest.count, dir.display());
        }
        Command::Train {
            config,
            data,
            out: ckpt,
            eval_data,
            log,
            init_seed,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let run: RunConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            run.model.validate()?;
            run.train.validate()?;
            let train = load_data(&data, &run.model)?;
            let eval = eval_data.as_deref().map(|d| load_data(d, &run.model)).transpose()?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = ckpt.clone().into_os_string();
                p.push(".log.jsonl");
                p.into()
            });
            let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            let mut writer = BufWriter::new(file);
            let params = ModelParams::init(&run.model, init_seed)?;
            let (params, records) = train_loop(&run.model, params, &train, eval.as_deref(), &run.train, |r| {
                let line = serde_json::to_string(r)?;
                writeln!(writer, "{line}")
                    .and_then(|_| writer.flush())
                    .map_err(|e| dilunet::Error::io(&log_path, e))
            })?;
            checkpoint::save(&ckpt, &params, &run.model)?;
            let last = records.last().map(|r| r.loss);
            eprintln!(
                "trained {} iterations, final loss {}, checkpoint {}",
                records.len(),
                last.map_or("n/a".into(), |l| format!("{l:.6}")),
                ckpt.display()
            );
        }
        Command::Eval { ckpt, data, dice } => {
            let (params, cfg) = checkpoint::load(&ckpt)?;
            let samples = load_data(&data, &cfg)?;
            let variant = match dice {
                DiceArg::Standard => DiceVariant::Standard,
                DiceArg::Printed => DiceVariant::Printed,
            };
            print_json(out, &metrics::evaluate(&params, &cfg, &samples, variant)?)?;
        }
        Command::Predict {
            ckpt,
            image,
            out: path,
        } => {
            let (params, cfg) = checkpoint::load(&ckpt)?;
            let img = pgm::read_gray(&image)?;
            if (img.width, img.height) != (cfg.input_size, cfg.input_size) {
                bail!(
                    "{} is {}x{}, the model expects {}x{}",
                    image.display(),
                    img.width,
                    img.height,
                    cfg.input_size,
                    cfg.input_size
                );
            }
            ensure!(cfg.in_channels == 1, "PGM input is single-channel, model expects {}", cfg.in_channels);
            let logits = predict_logits(&pgm::to_tensor(&img), &params, &cfg)?;
            let mask = pgm::Gray {
                width: img.width,
                height: img.height,
                pixels: argmax_labels(&logits),
            };
            pgm::write_gray(&path, &mask)?;
        }
        Command::Gradcheck { seed, f64 } => {
            let precision = if f64 { Precision::F64 } else { Precision::F32 };
            let summary = probes::run_all(seed, precision)?;
            print_json(out, &summary)?;
            if !summary.passed {
                eprintln!(
                    "gradient check failed: max relative error {:e} over threshold {:e}",
                    summary.max_rel_error,
                    probes::threshold(precision)
                );
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Bench {
            sizes,
            k,
            delta,
            repeats,
            heads,
            head_dim,
            seed,
        } => {
            let cfg = BenchConfig {
                sizes,
                kernel_sizes: k,
                dilations: delta,
                heads,
                head_dim,
                repeats,
                seed,
            };
            print_json(out, &bench::run(&cfg)?)?;
        }
    }
    Ok(0)
}
