//! Command-line entry point: train / compress / eval / sweep / convergence.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! configuration error. All randomness flows from a single seed (the config
//! file's, overridable with --seed); no entropy is taken from the
//! environment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use odenet::basis::BasisFamily;
use odenet::compress::{compress_model, shorten_graph, sweep, sweep_to_csv, Method};
use odenet::data::{load_idx, make_synthetic, Dataset, SyntheticKind};
use odenet::integrate::{integrate, make_tableau, IntegrateError, SchemeId};
use odenet::model::{
    evaluate, init_params, load_checkpoint, save_checkpoint, total_param_count, ModelConfig,
};
use odenet::train::{metrics_to_csv, train, TrainConfig};

#[derive(Parser)]
#[command(name = "odenet", version, about = "Continuous-depth networks with basis-function weights")]
struct Cli {
    /// Override every seed in the run (model init, shuffling, datasets).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output; errors still go to stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config and write a checkpoint.
    Train {
        /// Run config (JSON: {"model": ..., "train": ..., "dataset": ...}).
        config: PathBuf,
        /// Output checkpoint path.
        out: PathBuf,
        /// Per-epoch metrics CSV path.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Change a checkpoint's basis size/family and/or step count.
    /// Takes no dataset: compression never touches data.
    Compress {
        input: PathBuf,
        out: PathBuf,
        /// Target number of basis functions.
        #[arg(long)]
        k: Option<usize>,
        /// Target basis family (piecewise_constant | piecewise_linear).
        #[arg(long)]
        family: Option<String>,
        /// interpolate | project.
        #[arg(long, default_value = "project")]
        method: String,
        /// New step count for all blocks.
        #[arg(long = "n-t")]
        n_t: Option<usize>,
    },
    /// Evaluate a checkpoint; prints accuracy, loss, param_count, eval_ms.
    Eval {
        ckpt: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// Compression sweep over (k, n_t, method) grids; writes a CSV.
    Sweep {
        ckpt: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Comma-separated K values.
        #[arg(long = "k-list", value_delimiter = ',')]
        k_list: Vec<usize>,
        /// Comma-separated step counts.
        #[arg(long = "n-t-list", value_delimiter = ',')]
        n_t_list: Vec<usize>,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "project")]
        methods: Vec<String>,
    },
    /// Measure empirical convergence orders on the linear test ODE y' = y.
    Convergence {
        /// euler | midpoint | rk4, or "all".
        #[arg(long, default_value = "all")]
        scheme: String,
        #[arg(long = "n-t-list", value_delimiter = ',', default_value = "8,16,32,64")]
        n_t_list: Vec<usize>,
    },
}

#[derive(Args)]
struct DatasetArgs {
    /// two_spirals | circles | blobs | idx.
    #[arg(long)]
    dataset: String,
    /// Sample count for synthetic datasets.
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Noise level for synthetic datasets.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// IDX image file (dataset = idx).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (dataset = idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// 2x2 mean-pool IDX images.
    #[arg(long)]
    pool2: bool,
    /// Evaluate at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

/// One training run: architecture, optimization, and data source.
#[derive(Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    dataset: DatasetSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetSpec {
    Synthetic {
        name: SyntheticKind,
        n: usize,
        noise: f64,
        /// Fraction of samples held out for validation.
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        pool2: bool,
    },
}

fn default_val_fraction() -> f64 {
    0.2
}

/// Error carrying its exit code: 2 for usage/config, 1 for runtime/numeric.
struct CliError {
    code: u8,
    message: String,
}

fn usage_err(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn runtime_err(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, metrics } => {
            cmd_train(&config, &out, metrics.as_deref(), cli.seed, cli.quiet)
        }
        Command::Compress {
            input,
            out,
            k,
            family,
            method,
            n_t,
        } => cmd_compress(&input, &out, k, family.as_deref(), &method, n_t, cli.quiet),
        Command::Eval { ckpt, dataset } => cmd_eval(&ckpt, &dataset, cli.seed),
        Command::Sweep {
            ckpt,
            out,
            dataset,
            k_list,
            n_t_list,
            methods,
        } => cmd_sweep(&ckpt, &out, &dataset, &k_list, &n_t_list, &methods, cli.seed, cli.quiet),
        Command::Convergence { scheme, n_t_list } => cmd_convergence(&scheme, &n_t_list),
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| usage_err(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| usage_err(format!("invalid config {}: {e}", path.display())))
}

fn build_datasets(spec: &DatasetSpec, seed_override: Option<u64>) -> Result<(Dataset, Dataset), CliError> {
    match spec {
        DatasetSpec::Synthetic {
            name,
            n,
            noise,
            val_fraction,
            seed,
        } => {
            if !(0.0..1.0).contains(val_fraction) {
                return Err(usage_err("val_fraction must be in [0, 1)"));
            }
            let ds = make_synthetic(*name, *n, *noise, seed_override.unwrap_or(*seed));
            let n_val = ((*n as f64) * val_fraction).round() as usize;
            let train = ds.slice(0, *n - n_val);
            let val = ds.slice(*n - n_val, *n);
            Ok((train, val))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
            test_limit,
            pool2,
        } => {
            let train = load_idx(train_images, train_labels, *limit, *pool2)
                .map_err(|e| usage_err(e.to_string()))?;
            let val = load_idx(test_images, test_labels, *test_limit, *pool2)
                .map_err(|e| usage_err(e.to_string()))?;
            Ok((train, val))
        }
    }
}

fn cmd_train(
    config_path: &Path,
    out: &Path,
    metrics_path: Option<&Path>,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut run = load_run_config(config_path)?;
    if let Some(s) = seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    run.model
        .validate()
        .map_err(|e| usage_err(e.to_string()))?;
    run.train
        .validate()
        .map_err(|e| usage_err(e.to_string()))?;
    let (train_ds, val_ds) = build_datasets(&run.dataset, seed)?;
    if train_ds.input_dim() != run.model.input_dim {
        return Err(usage_err(format!(
            "dataset input_dim {} does not match model input_dim {}",
            train_ds.input_dim(),
            run.model.input_dim
        )));
    }
    let model = init_params(&run.model).map_err(|e| usage_err(e.to_string()))?;
    let result = train(model, &train_ds, &val_ds, &run.train)
        .map_err(|e| runtime_err(e.to_string()))?;
    save_checkpoint(&result.model, out).map_err(|e| runtime_err(e.to_string()))?;
    if let Some(p) = metrics_path {
        fs::write(p, metrics_to_csv(&result.metrics))
            .map_err(|e| runtime_err(format!("cannot write metrics {}: {e}", p.display())))?;
    }
    if let Some(last) = result.metrics.last() {
        if !quiet {
            println!(
                "epoch={} k={} n_t={} train_loss={:.6} val_accuracy={:.4}",
                last.epoch, last.k, last.n_t, last.train_loss, last.val_accuracy
            );
        }
    }
    if let Some(reason) = result.aborted {
        return Err(runtime_err(format!(
            "training aborted ({reason}); last checkpoint written to {}",
            out.display()
        )));
    }
    Ok(())
}

fn cmd_compress(
    input: &Path,
    out: &Path,
    k: Option<usize>,
    family: Option<&str>,
    method: &str,
    n_t: Option<usize>,
    quiet: bool,
) -> Result<(), CliError> {
    if k.is_none() && n_t.is_none() {
        return Err(usage_err("nothing to do: provide --k and/or --n-t"));
    }
    let method: Method = method.parse().map_err(usage_err)?;
    let family: Option<BasisFamily> = match family {
        Some(f) => Some(f.parse().map_err(usage_err)?),
        None => None,
    };
    let mut model = load_checkpoint(input).map_err(|e| usage_err(e.to_string()))?;
    if let Some(k) = k {
        model = compress_model(&model, k, family, method).map_err(|e| runtime_err(e.to_string()))?;
    }
    if let Some(n_t) = n_t {
        let (m, warnings) = shorten_graph(&model, n_t).map_err(|e| usage_err(e.to_string()))?;
        model = m;
        for w in warnings {
            eprintln!("warning: {w}");
        }
    }
    save_checkpoint(&model, out).map_err(|e| runtime_err(e.to_string()))?;
    if !quiet {
        println!(
            "wrote {} (param_count={})",
            out.display(),
            total_param_count(&model)
        );
    }
    Ok(())
}

fn eval_dataset(args: &DatasetArgs, num_classes: usize, seed: Option<u64>) -> Result<Dataset, CliError> {
    let ds = if args.dataset == "idx" {
        let images = args
            .images
            .as_ref()
            .ok_or_else(|| usage_err("--images is required with --dataset idx"))?;
        let labels = args
            .labels
            .as_ref()
            .ok_or_else(|| usage_err("--labels is required with --dataset idx"))?;
        load_idx(images, labels, args.limit, args.pool2).map_err(|e| usage_err(e.to_string()))?
    } else {
        let kind: SyntheticKind = args.dataset.parse().map_err(usage_err)?;
        let full = make_synthetic(kind, args.n, args.noise, seed.unwrap_or(0));
        match args.limit {
            Some(l) if l < full.len() => full.slice(0, l),
            _ => full,
        }
    };
    if ds.num_classes > num_classes {
        return Err(usage_err(format!(
            "dataset has {} classes but the model emits {num_classes}",
            ds.num_classes
        )));
    }
    Ok(ds)
}

fn cmd_eval(ckpt: &Path, dataset: &DatasetArgs, seed: Option<u64>) -> Result<(), CliError> {
    let model = load_checkpoint(ckpt).map_err(|e| usage_err(e.to_string()))?;
    let ds = eval_dataset(dataset, model.config.num_classes, seed)?;
    if ds.input_dim() != model.config.input_dim {
        return Err(usage_err(format!(
            "dataset input_dim {} does not match model input_dim {}",
            ds.input_dim(),
            model.config.input_dim
        )));
    }
    let start = std::time::Instant::now();
    let (accuracy, loss) = evaluate(&model, &ds, 256).map_err(|e| runtime_err(e.to_string()))?;
    let eval_ms = start.elapsed().as_secs_f64() * 1e3;
    println!(
        "accuracy={accuracy} loss={loss} param_count={} eval_ms={eval_ms:.3}",
        total_param_count(&model)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ckpt: &Path,
    out: &Path,
    dataset: &DatasetArgs,
    k_list: &[usize],
    n_t_list: &[usize],
    methods: &[String],
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    if k_list.is_empty() || n_t_list.is_empty() || methods.is_empty() {
        return Err(usage_err("k-list, n-t-list, and methods must be non-empty"));
    }
    let methods: Vec<Method> = methods
        .iter()
        .map(|m| m.parse().map_err(usage_err))
        .collect::<Result<_, _>>()?;
    let model = load_checkpoint(ckpt).map_err(|e| usage_err(e.to_string()))?;
    let ds = eval_dataset(dataset, model.config.num_classes, seed)?;
    let rows = sweep(&model, &ds, k_list, n_t_list, &methods);
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: cell k={} n_t={} method={} failed: {}",
            r.k,
            r.n_t,
            r.method,
            r.error.as_ref().unwrap()
        );
    }
    fs::write(out, sweep_to_csv(&rows))
        .map_err(|e| runtime_err(format!("cannot write {}: {e}", out.display())))?;
    if !quiet {
        println!("wrote {} ({} rows)", out.display(), rows.len());
    }
    Ok(())
}

/// Global error of the scheme on y' = y, y(0) = 1, at t = 1 for each step
/// count, then the least-squares slope of log2(error) against log2(N_T).
fn measured_order(scheme: SchemeId, n_t_list: &[usize]) -> Result<f64, CliError> {
    let tableau = make_tableau(scheme);
    let mut points = Vec::with_capacity(n_t_list.len());
    for &n in n_t_list {
        if n == 0 {
            return Err(usage_err("step counts must be positive"));
        }
        let y = integrate::<Vec<f64>, std::convert::Infallible>(
            &mut |_, x| Ok(vec![x[0]]),
            &tableau,
            vec![1.0],
            1.0,
            n,
            &mut |_| {},
        )
        .map_err(|e: IntegrateError<_>| runtime_err(e.to_string()))?;
        let err = (y[0] - std::f64::consts::E).abs();
        points.push(((n as f64).log2(), err.log2()));
    }
    let n = points.len() as f64;
    let (sx, sy): (f64, f64) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    Ok(-(n * sxy - sx * sy) / (n * sxx - sx * sx))
}

fn cmd_convergence(scheme: &str, n_t_list: &[usize]) -> Result<(), CliError> {
    if n_t_list.len() < 2 {
        return Err(usage_err("n-t-list needs at least two step counts"));
    }
    let schemes: Vec<SchemeId> = if scheme == "all" {
        vec![SchemeId::Euler, SchemeId::Midpoint, SchemeId::Rk4]
    } else {
        vec![scheme.parse().map_err(usage_err)?]
    };
    let mut out = String::new();
    for s in schemes {
        let order = measured_order(s, n_t_list)?;
        writeln!(out, "scheme={s} order={order:.3}").unwrap();
    }
    print!("{out}");
    Ok(())
}
