//! `graphseg` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or I/O
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphseg::bench;
use graphseg::checkpoint;
use graphseg::config::RunSettings;
use graphseg::experiment::{self, Axis};
use graphseg::gradcheck::{self, Scope};
use graphseg::train;
use graphseg::Error;

#[derive(Parser)]
#[command(
    name = "graphseg",
    version,
    about = "Window graph relations and boundary attention on toy segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization, data and random probes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `KEY=VALUE`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        /// Number of random seeds per check.
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        /// Corrupt the analytic gradient of one op (tests the failure path).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint, loss curve and metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        /// Defaults to `<out>/checkpoint.wgts`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one axis: theta, ratio, fusion or components.
    Ablate {
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        common: Common,
    },
    /// Time dense against sparse node updates.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_KS.to_vec())]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_DS.to_vec())]
        ds: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_CS.to_vec())]
        cs: Vec<f64>,
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Verification(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::NonScalarLoss(_) => {
                Failure::Verification(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn settings(common: &Common) -> Result<RunSettings, Failure> {
    let mut s = RunSettings::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        s.apply_text(&text)?;
    }
    if let Some(seed) = common.seed {
        s.model.seed = seed;
    }
    for o in &common.overrides {
        s.apply_override(o)?;
    }
    s.validate()?;
    Ok(s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

fn cmd_gradcheck(scope: &str, seeds: u64, fault: Option<&str>, common: &Common) -> CmdResult {
    let scope: Scope = scope.parse()?;
    let reports = gradcheck::run_scope(scope, common.seed.unwrap_or(0), seeds, fault)?;
    let csv = gradcheck::report_csv(&reports);
    print!("{csv}");
    write(&common.out, "gradcheck.csv", &csv)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "relative error ≥ {:e} in: {}",
            gradcheck::REL_TOLERANCE,
            failed.join(", ")
        )))
    }
}

fn cmd_train(common: &Common) -> CmdResult {
    let s = settings(common)?;
    let out = experiment::run(&s)?;
    let dir = &common.out;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let ckpt = dir.join("checkpoint.wgts");
    checkpoint::save_checkpoint(&out.model, &ckpt)?;
    write(dir, "config.txt", &s.to_text())?;
    write(dir, "loss_curve.csv", &out.report.loss_curve_csv())?;
    write(dir, "metrics.csv", &out.evaluation.miou.to_csv())?;
    let m = &s.model;
    let summary = format!(
        "key,value\nparams,{}\nbaseline_params,{}\ngt_params,{}\nba_params,{}\nsteps,{}\nfinal_train_loss,{}\ntrain_pixel_accuracy,{}\nmiou,{}\npixel_accuracy,{}\nboundary_band_acc,{}\n",
        out.model.num_params(),
        m.baseline_param_count(),
        m.gt_param_count()?,
        m.ba_param_count(),
        s.train.steps,
        out.report.final_loss,
        out.report.pixel_accuracy,
        out.evaluation.miou.miou,
        out.evaluation.miou.pixel_accuracy,
        fmt_opt(out.evaluation.boundary_band_accuracy),
    );
    write(dir, "summary.csv", &summary)?;
    println!(
        "params {}  final loss {:.6}  train acc {:.4}  mIoU {:.4}  band acc {}",
        out.model.num_params(),
        out.report.final_loss,
        out.report.pixel_accuracy,
        out.evaluation.miou.miou,
        fmt_opt(out.evaluation.boundary_band_accuracy)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(ckpt: Option<&Path>, common: &Common) -> CmdResult {
    let s = settings(common)?;
    let default = common.out.join("checkpoint.wgts");
    let ckpt = ckpt.unwrap_or(&default);
    let model = checkpoint::load_checkpoint(ckpt, s.model.clone())?;
    let (_, eval_set) = s.datasets()?;
    let ev = train::evaluate(&model, &eval_set, s.band)?;
    write(&common.out, "metrics.csv", &ev.miou.to_csv())?;
    println!(
        "mIoU {}  pixel accuracy {}  band acc {}",
        ev.miou.miou,
        ev.miou.pixel_accuracy,
        fmt_opt(ev.boundary_band_accuracy)
    );
    Ok(())
}

fn cmd_ablate(axis: &str, common: &Common) -> CmdResult {
    let axis: Axis = axis.parse()?;
    let s = settings(common)?;
    let rows = experiment::run_ablation(axis, &s)?;
    let csv = experiment::ablation_csv(&rows);
    print!("{csv}");
    write(&common.out, &format!("ablate_{axis}.csv"), &csv)?;
    Ok(())
}

fn cmd_bench(ks: &[usize], ds: &[usize], cs: &[f64], reps: usize, common: &Common) -> CmdResult {
    let points = bench::run_bench(ks, ds, cs, reps, common.seed.unwrap_or(0))?;
    let csv = bench::bench_csv(&points);
    print!("{csv}");
    write(&common.out, "bench.csv", &csv)?;
    write(
        &common.out,
        "bench_stddev.csv",
        &bench::bench_stddev_csv(&points),
    )?;
    match points.iter().find(|p| p.max_abs_diff != 0.0) {
        Some(p) => Err(Failure::Verification(format!(
            "dense and sparse outputs differ by {} at K={} D={} c={}",
            p.max_abs_diff, p.k, p.d, p.c
        ))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck {
            scope,
            seeds,
            inject_fault,
            common,
        } => cmd_gradcheck(scope, *seeds, inject_fault.as_deref(), common),
        Command::Train { common } => cmd_train(common),
        Command::Eval { checkpoint, common } => cmd_eval(checkpoint.as_deref(), common),
        Command::Ablate { axis, common } => cmd_ablate(axis, common),
        Command::Bench {
            ks,
            ds,
            cs,
            reps,
            common,
        } => cmd_bench(ks, ds, cs, *reps, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
