use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use anchorconv::arch::{count_params, ConfigFile, Network};
use anchorconv::checkpoint::Checkpoint;
use anchorconv::data::{channel_stats, load_cifar_dir, synthetic, CifarVariant, Dataset};
use anchorconv::train::{evaluate, normalize_dataset, train_with, TrainConfig, CSV_HEADER};
use anchorconv::viz::{activation_maximize, write_ppm, VizConfig};

const DEFAULT_SYNTHETIC_N: usize = 512;
const DEFAULT_SYNTHETIC_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(name = "anchorconv", version, about = "Anchored-kernel CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the parameter report; optionally check the total (in millions).
    Audit {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        expected: Option<f64>,
        /// Absolute tolerance in millions; default max(5% of expected, 0.012).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train and write metrics.csv and checkpoint.bin into --out.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// `synthetic`, `synthetic:<n>[:<seed>]` or a CIFAR directory.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print `top1_err=<value>` for a checkpoint on one split.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Write one activation-maximization image as PPM.
    Visualize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        filter: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

enum Outcome {
    Ok,
    ToleranceFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ANCHORCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("ANCHORCONV_THREADS=`{v}` is not a thread count"))?;
    if n == 0 {
        bail!("ANCHORCONV_THREADS must be >= 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Audit { spec, expected, tol } => audit(&spec, expected, tol),
        Command::Train {
            spec,
            data,
            out,
            epochs,
            batch,
            lr,
            seed,
        } => train_cmd(&spec, &data, &out, epochs, batch, lr, seed),
        Command::Eval {
            spec,
            checkpoint,
            data,
            split,
        } => eval_cmd(&spec, &checkpoint, &data, split),
        Command::Visualize {
            spec,
            checkpoint,
            layer,
            filter,
            out,
            steps,
            step_size,
            seed,
        } => {
            let config = read_config(&spec)?;
            let net = restore(&config, &checkpoint)?;
            let mut cfg = VizConfig::new(layer, filter, config.network.input_size);
            cfg.steps = steps.or(config.run.steps).unwrap_or(cfg.steps);
            cfg.seed = seed.or(config.run.seed).unwrap_or(0);
            cfg.step_size = step_size;
            let v = activation_maximize(&net, &cfg)?;
            write_ppm(&v.image, &out).with_context(|| format!("writing {}", out.display()))?;
            let first = v.objective.first().copied().unwrap_or(f64::NAN);
            let last = v.objective.last().copied().unwrap_or(f64::NAN);
            println!("objective {first:.6} -> {last:.6}; wrote {}", out.display());
            Ok(Outcome::Ok)
        }
    }
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    ConfigFile::parse(&text).with_context(|| format!("in spec {}", path.display()))
}

fn audit(spec: &Path, expected: Option<f64>, tol: Option<f64>) -> Result<Outcome> {
    let config = read_config(spec)?;
    let net = Network::build(&config.network, 0)?;
    let report = count_params(&net);
    print!("{report}");
    let Some(expected) = expected else {
        return Ok(Outcome::Ok);
    };
    let tol = tol.unwrap_or_else(|| (0.05 * expected.abs()).max(0.012));
    let diff = (report.millions() - expected).abs();
    if diff <= tol {
        println!("PASS |{:.4} - {expected}| = {diff:.4} <= {tol}", report.millions());
        Ok(Outcome::Ok)
    } else {
        println!("FAIL |{:.4} - {expected}| = {diff:.4} > {tol}", report.millions());
        Ok(Outcome::ToleranceFailed)
    }
}

/// Train and test splits for `--data`.
fn load_data(arg: &str, config: &ConfigFile) -> Result<(Dataset, Dataset)> {
    let spec = &config.network;
    if let Some(rest) = arg.strip_prefix("synthetic") {
        let mut parts = rest.split(':').skip(1);
        let n = match parts.next() {
            Some(v) => v.parse().with_context(|| format!("bad synthetic size `{v}`"))?,
            None if rest.is_empty() => DEFAULT_SYNTHETIC_N,
            None => bail!("bad data source `{arg}`"),
        };
        let seed = match parts.next() {
            Some(v) => v.parse().with_context(|| format!("bad synthetic seed `{v}`"))?,
            None => DEFAULT_SYNTHETIC_SEED,
        };
        if parts.next().is_some() {
            bail!("bad data source `{arg}`; expected synthetic:<n>[:<seed>]");
        }
        let (h, w) = spec.input_size;
        if h != w {
            bail!("synthetic data needs a square input size, spec has {h}x{w}");
        }
        let k = spec.num_classes;
        let train = synthetic(seed, n, k, h)?;
        let test = synthetic(seed.wrapping_add(1), (n / 4).max(k), k, h)?;
        return Ok((train, test));
    }
    let dir = Path::new(arg);
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let variant = match spec.num_classes {
        10 => CifarVariant::Cifar10,
        100 => CifarVariant::Cifar100,
        k => bail!("CIFAR data needs 10 or 100 classes, spec has {k}"),
    };
    Ok(load_cifar_dir(dir, variant)?)
}

fn train_config(config: &ConfigFile, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>, seed: Option<u64>) -> TrainConfig {
    let run = &config.run;
    let mut tc = TrainConfig::cifar(epochs.or(run.epochs).unwrap_or(TrainConfig::default().epochs));
    if let Some(b) = batch.or(run.batch) {
        tc.batch_size = b;
    }
    if let Some(lr) = lr.or(run.lr) {
        tc.lr_initial = lr;
        tc.schedule = if lr > 0.0 { vec![(45, lr / 10.0)] } else { Vec::new() };
    }
    tc.seed = seed.or(run.seed).unwrap_or(0);
    tc
}

fn train_cmd(
    spec: &Path,
    data: &str,
    out: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<Outcome> {
    let config = read_config(spec)?;
    let tc = train_config(&config, epochs, batch, lr, seed);
    tc.validate()?;
    let (train, test) = load_data(data, &config)?;
    let (means, stds) = channel_stats(&train)?;
    let train = normalize_dataset(&train, &means, &stds)?;
    let test = normalize_dataset(&test, &means, &stds)?;
    let mut net = Network::build(&config.network, tc.seed)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    writeln!(csv, "{CSV_HEADER}")?;
    train_with(&mut net, &train, Some(&test), &tc, |r| {
        writeln!(csv, "{}", r.csv_row())?;
        csv.flush()?;
        eprintln!(
            "epoch {:>3}  lr {}  loss {:.4}  train {:.2}%  test {:.2}%  {:.1}s",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_top1_err,
            r.test_top1_err.unwrap_or(f64::NAN),
            r.wall_seconds
        );
        Ok(())
    })?;
    drop(csv);
    Checkpoint::from_network(&net, Some(&(means, stds)))?.save(&out.join("checkpoint.bin"))?;
    println!("wrote {} and {}", csv_path.display(), out.join("checkpoint.bin").display());
    Ok(Outcome::Ok)
}

fn restore(config: &ConfigFile, path: &Path) -> Result<Network> {
    let ck = Checkpoint::load(path)?;
    let mut net = Network::build(&config.network, 0)?;
    ck.apply(&mut net).with_context(|| format!("checkpoint {} does not match the spec", path.display()))?;
    Ok(net)
}

fn eval_cmd(spec: &Path, checkpoint: &Path, data: &str, split: Split) -> Result<Outcome> {
    let config = read_config(spec)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut net = Network::build(&config.network, 0)?;
    ck.apply(&mut net)
        .with_context(|| format!("checkpoint {} does not match the spec", checkpoint.display()))?;
    let (train, test) = load_data(data, &config)?;
    let set = match split {
        Split::Train => train,
        Split::Test => test,
    };
    let set = match ck.normalization() {
        Some((means, stds)) => normalize_dataset(&set, &means, &stds)?,
        None => set,
    };
    println!("top1_err={:.6}", evaluate(&mut net, &set)?);
    Ok(Outcome::Ok)
}
