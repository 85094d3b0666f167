//! `revnmr`: encode datasets, train the invertible network, predict spectrum
//! codes, sample structures for a code and compute the metric suite.

mod formats;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use revnmr_core::chemdata::{channels_to_bonds, parse_dataset, synth_dataset, write_dataset, CsvLayout, DatasetRow, SpectrumCode};
use revnmr_core::eval::{cd_local, cd_prior, code_report, evaluate, predict_codes, rcd, PerturbationConfig};
use revnmr_core::gradcheck::{run_gradchecks, GradcheckConfig, TOLERANCE};
use revnmr_core::invnet::{merge_latent, sample_zfree, InvertibleNet, NetConfig};
use revnmr_core::loss::{samples, LossWeights, Sample};
use revnmr_core::numeric::{ops, RngStream};
use revnmr_core::train::{epoch_csv, fit, load_checkpoint, save_checkpoint, split_dataset, write_file_atomic, TrainConfig, TrainError, EPOCH_CSV_HEADER};

#[derive(Debug, Parser)]
#[command(name = "revnmr", version, about = "Invertible network between carbon skeletons and 13C spectrum codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build dataset rows from a bond file and a peak file.
    Encode {
        #[arg(long)]
        bonds: PathBuf,
        #[arg(long)]
        peaks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write a header line.
        #[arg(long)]
        header: bool,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Predict spectrum codes and print the positions report.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rows listed in the positions report.
        #[arg(long, default_value_t = 10)]
        report: usize,
        /// Predicted codes as CSV; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample candidate structures for a spectrum code.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 128 characters of '0' and '1'.
        #[arg(long)]
        code: String,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full metric report on the validation split.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Write CSV instead of key=value lines.
        #[arg(long)]
        csv: bool,
    },
    /// Perturbation distances over a list of noise scales.
    Perturb {
        #[command(flatten)]
        common: EvalArgs,
        /// Comma-separated noise scales.
        #[arg(long, value_delimiter = ',', required = true)]
        eps_sweep: Vec<f64>,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale the convolution kernel gradient to check that failures are caught.
        #[arg(long, hide = true)]
        corrupt_conv_backward: bool,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of rows used for training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 2)]
    blocks_per_stage: usize,
    #[arg(long, default_value_t = 64)]
    hidden_cap: usize,
    #[arg(long, default_value_t = 1.0)]
    w_y: f64,
    #[arg(long, default_value_t = 1.0)]
    w_range: f64,
    #[arg(long, default_value_t = 0.1)]
    w_sparse: f64,
    #[arg(long, default_value_t = 0.1)]
    w_forbidden: f64,
    #[arg(long, default_value_t = 0.0)]
    w_zfree: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Seed of the training split; the complementary validation rows are used.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Evaluate every row instead of the validation split.
    #[arg(long)]
    all_rows: bool,
    #[arg(long, default_value_t = 8)]
    n_noise: usize,
    #[arg(long, default_value_t = 8)]
    n_prior: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_rows(path: &Path) -> Result<Vec<DatasetRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let layout = formats::sniff_layout(&text);
    parse_dataset(&text, layout).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn eval_set(args: &EvalArgs) -> Result<(InvertibleNet, Vec<Sample>)> {
    let net = load_checkpoint(&args.checkpoint)?;
    let rows = read_rows(&args.data)?;
    let rows = if args.all_rows {
        rows
    } else {
        split_dataset(&rows, args.split, args.seed)?.1
    };
    eprintln!("evaluating {} rows", rows.len());
    Ok((net, samples(&rows)))
}

fn perturbation(args: &EvalArgs, epsilon: f64) -> PerturbationConfig {
    PerturbationConfig {
        epsilon,
        n_noise: args.n_noise,
        n_prior: args.n_prior,
        seed: args.seed,
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        split_fraction: args.split,
        seed: args.seed,
        weights: LossWeights {
            w_y: args.w_y,
            w_range: args.w_range,
            w_sparse: args.w_sparse,
            w_forbidden: args.w_forbidden,
            w_zfree: args.w_zfree,
        },
        net: NetConfig {
            blocks_per_stage: args.blocks_per_stage,
            hidden_cap: args.hidden_cap,
        },
    };
    eprintln!("{config:?}");
    let rows = read_rows(&args.data)?;
    eprintln!("{EPOCH_CSV_HEADER}");
    let write_log = |logs| -> Result<()> {
        match &args.log {
            Some(p) => Ok(write_file_atomic(p, epoch_csv(logs).as_bytes())?),
            None => Ok(()),
        }
    };
    match fit(&rows, &config, |log| eprintln!("{}", log.csv_line())) {
        Ok(outcome) => {
            save_checkpoint(&outcome.net, &args.out)?;
            write_log(&outcome.logs)
        }
        Err(TrainError::NonFinite {
            epoch,
            step,
            last_good,
            logs,
        }) => {
            save_checkpoint(&last_good, &args.out)?;
            write_log(&logs)?;
            bail!("non-finite loss in epoch {epoch}, step {step}; last good parameters saved to {}", args.out.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn predict(checkpoint: &Path, data: &Path, report: usize, out: Option<&Path>) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let rows = read_rows(data)?;
    let set = samples(&rows);
    let codes = predict_codes(&net, &set)?;
    let mut text = String::from("molecule_id,spectrum_id,predicted_code\n");
    for (row, code) in rows.iter().zip(&codes) {
        writeln!(text, "{},{},{}", row.molecule_id, row.spectrum_id, code.to_bitstring())?;
    }
    emit(out, &text)?;
    let ids: Vec<u64> = rows.iter().map(|r| r.molecule_id).collect();
    let k = report.min(set.len());
    print!("{}", code_report(&net, &set, &ids, k)?);
    Ok(())
}

fn invert(checkpoint: &Path, code: &str, count: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    ensure!(count >= 1, "--samples must be at least 1");
    let code = SpectrumCode::from_bitstring(code.trim()).context("--code")?;
    let net = load_checkpoint(checkpoint)?;
    let root = RngStream::new(seed);
    let mut text = String::new();
    for k in 0..count {
        let z = sample_zfree(&mut root.substream(k as u64));
        let x = net.inverse(&merge_latent(&code.as_f64(), &z)?)?;
        let bonds = channels_to_bonds(&x, 0.5)?;
        writeln!(text, "candidate {k}: {}", formats::bond_line(k as u64, &bonds))?;
        let values: Vec<String> = x.data().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(text, "channels {k}: {}", values.join(" "))?;
    }
    emit(out, &text)
}

fn perturb(args: &EvalArgs, sweep: &[f64]) -> Result<()> {
    let (net, set) = eval_set(args)?;
    let mut text = String::from("eps,cd_local,cd_prior,rcd_local,rcd_prior\n");
    for &eps in sweep {
        let cfg = perturbation(args, eps);
        let local = cd_local(&net, &set, &cfg)?.mean;
        let prior = cd_prior(&net, &set, &cfg)?.mean;
        writeln!(
            text,
            "{eps},{local},{prior},{},{}",
            rcd(local, &net, &set)?,
            rcd(prior, &net, &set)?
        )?;
    }
    emit(args.out.as_deref(), &text)
}

fn gradcheck(seed: u64, coords: usize, out: Option<&Path>, corrupt: bool) -> Result<()> {
    ops::set_conv_backward_fault(corrupt);
    let checks = run_gradchecks(&GradcheckConfig {
        seed,
        coords_per_tensor: coords,
    })?;
    let mut text = String::from("component,worst_relative_error,checked,skipped,status\n");
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        writeln!(text, "{},{:e},{},{},{status}", c.component, c.worst, c.checked, c.skipped)?;
    }
    emit(out, &text)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component.as_str()).collect();
    ensure!(failed.is_empty(), "gradient check above {TOLERANCE:e}: {}", failed.join(", "));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Encode { bonds, peaks, out, header } => {
            let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let rows = formats::encode(
                &read(bonds)?,
                &bonds.display().to_string(),
                &read(peaks)?,
                &peaks.display().to_string(),
            )?;
            let layout = CsvLayout {
                header: *header,
                split_bond_cells: false,
            };
            write_file_atomic(out, write_dataset(&rows, layout).as_bytes())?;
            eprintln!("wrote {} rows", rows.len());
        }
        Command::Synth { rows, seed, out } => {
            write_file_atomic(out, write_dataset(&synth_dataset(*rows, *seed), CsvLayout::default()).as_bytes())?;
        }
        Command::Train(args) => train(args)?,
        Command::Predict {
            checkpoint,
            data,
            report,
            out,
        } => predict(checkpoint, data, *report, out.as_deref())?,
        Command::Invert {
            checkpoint,
            code,
            samples,
            seed,
            out,
        } => invert(checkpoint, code, *samples, *seed, out.as_deref())?,
        Command::Eval { common, eps, csv } => {
            let (net, set) = eval_set(common)?;
            let report = evaluate(&net, &set, &perturbation(common, *eps))?;
            let text = if *csv { report.to_csv() } else { report.to_key_value() };
            emit(common.out.as_deref(), &text)?;
        }
        Command::Perturb { common, eps_sweep } => perturb(common, eps_sweep)?,
        Command::Gradcheck {
            seed,
            coords,
            out,
            corrupt_conv_backward,
        } => gradcheck(*seed, *coords, out.as_deref(), *corrupt_conv_backward)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    eprintln!("{:?}", cli.command);
    run(cli)
}
