//! Command-line entry point. Exit codes: 0 success, 1 usage or config
//! error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::pgd_attack;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::experiment::{compare, compare_csv, Experiment};
use crate::harness::metrics::{robust_accuracy, MetricsRecord, EVAL_STREAM};
use crate::numeric::{Norm, RngStream};
use crate::theory::{
    check_mixing_lemma, check_error_bound, small_probe_setup, stability_probe, stability_probe_random, ConvexFamily,
};

#[derive(Debug, Parser)]
#[command(name = "generalist", version, about = "Desk-scale adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one method from a config file, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics, history and checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also append the record as a JSON line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PGD adversarial examples of the test split as CSV.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "linf")]
        norm: Norm,
    },
    /// Run the regret, mixing and stability checks.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the JSON reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Train a roster of methods on one config and write a CSV table.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated method names; all methods when absent.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_lines(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    Ok(())
}

fn train(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut exp = match &checkpoint {
        Some(ck) => {
            if config.is_some() || seed.is_some() {
                return Err(Error::Config("--checkpoint resumes with its own config; drop --config/--seed".into()));
            }
            Experiment::from_checkpoint(&load_checkpoint(ck)?)?
        }
        None => Experiment::new(load_config(config.as_deref(), seed)?)?,
    };
    fs::create_dir_all(&out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut records: Vec<MetricsRecord> = Vec::new();
    if checkpoint.is_some() && metrics_path.exists() {
        let done = exp.epochs_done();
        for line in fs::read_to_string(&metrics_path)?.lines().filter(|l| !l.trim().is_empty()) {
            let r = MetricsRecord::from_json_line(line)?;
            if r.epoch <= done {
                records.push(r);
            }
        }
    }
    let every = exp.config.output.checkpoint_every;
    let new = exp.run(|e, rec| {
        eprintln!(
            "epoch {:>3}  natural {:.4}  linf {:.4}  l2 {:.4}  union {:.4}",
            rec.epoch, rec.natural_acc, rec.robust_acc_linf, rec.robust_acc_l2, rec.union
        );
        if every > 0 && rec.epoch % every == 0 {
            save_checkpoint(&out.join(format!("epoch_{:04}.ckpt", rec.epoch)), &e.checkpoint())?;
        }
        Ok(())
    })?;
    records.extend(new);
    write_lines(&metrics_path, &records)?;
    let mut hist = String::new();
    for h in exp.history() {
        hist.push_str(&serde_json::to_string(h).expect("history serializes"));
        hist.push('\n');
    }
    fs::write(out.join("history.jsonl"), hist)?;
    save_checkpoint(&out.join("final.ckpt"), &exp.checkpoint())?;
    Ok(())
}

fn print_table(rec: &MetricsRecord) {
    println!("{:<10} {:>9}", "metric", "value");
    println!("{:<10} {:>9}", "epoch", rec.epoch);
    println!("{:<10} {:>9.4}", "natural", rec.natural_acc);
    println!("{:<10} {:>9.4}", "pgd_linf", rec.robust_acc_linf);
    println!("{:<10} {:>9.4}", "pgd_l2", rec.robust_acc_l2);
    println!("{:<10} {:>9.4}", "union", rec.union);
    for (k, (c, t)) in rec.per_class_correct.iter().zip(&rec.per_class_total).enumerate() {
        println!("{:<10} {:>4}/{:<4}", format!("class {k}"), c, t);
    }
}

fn evaluate_cmd(checkpoint: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let exp = Experiment::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
    let rec = exp.evaluate()?;
    print_table(&rec);
    if let Some(p) = out {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", rec.to_json_line())?;
    }
    Ok(())
}

fn attack_cmd(checkpoint: PathBuf, out: PathBuf, norm: Norm) -> Result<()> {
    let exp = Experiment::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
    let (linf, l2) = exp.config.eval.evaluation_specs();
    let spec = if norm == Norm::Linf { linf } else { l2 };
    let model = exp.model();
    let test = &exp.data.test;
    let adv = pgd_attack(&model, test, &spec, &mut RngStream::new(0, EVAL_STREAM))?;
    let mut text = String::from("label");
    for j in 0..adv.cols() {
        text.push_str(&format!(",x{j}"));
    }
    text.push('\n');
    for (row, label) in adv.iter_rows().zip(&test.labels) {
        text.push_str(&label.to_string());
        for v in row {
            text.push_str(&format!(",{v:?}"));
        }
        text.push('\n');
    }
    fs::write(&out, text)?;
    let acc = robust_accuracy(&model, test, &spec, &mut RngStream::new(0, EVAL_STREAM))?;
    println!("{} adversarial examples ({norm}, eps {}) -> {}", adv.rows(), spec.epsilon, out.display());
    println!("robust accuracy {acc:.4}");
    Ok(())
}

fn verify_theory(seed: u64, out: Option<PathBuf>, trials: usize) -> Result<()> {
    let lemma = check_mixing_lemma(10_000, seed);
    let bound = check_error_bound(&ConvexFamily::default(), trials, 0.1, 100, seed)?;
    let setup = small_probe_setup(seed, None, 0.9)?;
    let probe = stability_probe_random(&setup, 8, seed)?;
    let noop = stability_probe(&setup, &[(0, 0)])?;
    println!("{:<28} {:>12} {:>8}", "check", "value", "status");
    println!(
        "{:<28} {:>12} {:>8}",
        "mixing lemma violations",
        format!("{}/{}", lemma.violations, lemma.trials),
        if lemma.passed() { "pass" } else { "FAIL" }
    );
    println!("{:<28} {:>12.3e}", "mixing worst slack", lemma.worst_slack);
    println!(
        "{:<28} {:>12.4} {:>8}",
        "bound violation fraction",
        bound.violation_fraction,
        if bound.violation_fraction <= bound.delta + 0.05 { "pass" } else { "FAIL" }
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("{:<28} {:>12.4}", "bound mean lhs", mean(&bound.lhs));
    println!("{:<28} {:>12.4}", "bound mean rhs", mean(&bound.rhs));
    println!("{:<28} {:>12.4}", "bound concentration", bound.concentration);
    println!("{:<28} {:>12.4e}", "stability eps_g", probe.global_eps);
    println!("{:<28} {:>12.4e}", "stability eps_oplus", probe.eps_oplus);
    println!("{:<28} {:>12.4e}", "stability drift", probe.drift);
    println!(
        "{:<28} {:>12.4e} {:>8}",
        "stability no-op eps_g",
        noop.global_eps,
        if noop.global_eps == 0.0 { "pass" } else { "FAIL" }
    );
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("bound_report.json"), json(&bound))?;
        fs::write(dir.join("mixing_lemma.json"), json(&lemma))?;
        fs::write(dir.join("stability.json"), json(&probe))?;
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn compare_cmd(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, methods: Vec<String>) -> Result<()> {
    let cfg = load_config(config.as_deref(), seed)?;
    let roster: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let csv = compare_csv(&compare(&cfg, &roster)?);
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            checkpoint,
        } => train(config, seed, out, checkpoint),
        Command::Evaluate { checkpoint, out } => evaluate_cmd(checkpoint, out),
        Command::Attack { checkpoint, out, norm } => attack_cmd(checkpoint, out, norm),
        Command::VerifyTheory { seed, out, trials } => verify_theory(seed, out, trials),
        Command::Compare {
            config,
            seed,
            out,
            methods,
        } => compare_cmd(config, seed, out, methods),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
