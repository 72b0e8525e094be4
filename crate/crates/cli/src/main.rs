//! `cptlab` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cptlab::cost::run_report;
use cptlab::harness::checkpoint::Checkpoint;
use cptlab::harness::config::parse_precision_shorthand;
use cptlab::harness::landscape::loss_landscape;
use cptlab::harness::protocols::{report, report_table, sweep, sweep_table, SweepSpec};
use cptlab::harness::train::{analytic_cost, plan, prt_then_train, run_prt_on, write_run_outputs};
use cptlab::harness::{ingest_dataset, PassPrecision, TrainConfig, Trainer};
use cptlab::schedule::{Pattern, PrecisionSchedule};
use cptlab::Error;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "CPTLAB_OUT";

#[derive(Parser)]
#[command(name = "cptlab", version, about = "Cyclic precision training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set precision.b_min=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Precision shorthand such as `fw3-8_bw8` or `fw8_bw8`.
    #[arg(long)]
    precision: Option<String>,
    /// Output directory. Defaults to `$CPTLAB_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the epoch plan and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Precision range test, optionally followed by training with the found bounds.
    Prt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after the range test.
        #[arg(long)]
        no_train: bool,
    },
    /// Print the per-epoch precision table as CSV.
    Schedule {
        #[arg(long)]
        b_min: u32,
        #[arg(long)]
        b_max: u32,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        cycles: usize,
        #[arg(long, default_value = "cosine")]
        pattern: Pattern,
    },
    /// Compare the analytic training cost of two precision settings.
    Cost {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        a: String,
        /// Baseline.
        #[arg(long)]
        b: String,
    },
    /// Export a loss-landscape grid around a checkpoint.
    Landscape {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        half_width: f64,
        #[arg(long, default_value_t = 21)]
        points: usize,
        /// Seed for the random directions.
        #[arg(long, default_value_t = 0)]
        direction_seed: u64,
        /// Forward bits while evaluating the loss.
        #[arg(long, default_value_t = 32)]
        bits: u32,
    },
    /// Grid over patterns, cycle counts and bounds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "cosine,triangular,cosine_anneal,progressive,static")]
        patterns: Vec<Pattern>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        cycles: Vec<usize>,
        /// Bound pairs like `3-8`.
        #[arg(long, value_delimiter = ',', default_value = "3-8")]
        bounds: Vec<String>,
        /// Train every trial instead of computing costs only.
        #[arg(long)]
        train: bool,
    },
    /// Aggregate metrics JSONL files into a comparison table.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let cfg = TrainConfig::load(args.config.as_deref(), &args.overrides).map_err(config_err)?;
    match &args.precision {
        Some(code) => cfg.with_precision_shorthand(code).map_err(config_err),
        None => Ok(cfg),
    }
}

fn out_dir(args: &ConfigArgs, command: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train {
            cfg,
            dry_run,
            resume,
        } => cmd_train(&cfg, dry_run, resume.as_deref()),
        Command::Prt { cfg, no_train } => cmd_prt(&cfg, no_train),
        Command::Schedule {
            b_min,
            b_max,
            epochs,
            cycles,
            pattern,
        } => {
            let s = PrecisionSchedule::new(b_min, b_max, epochs, cycles, pattern).map_err(config_err)?;
            let mut out = String::from("epoch,bits\n");
            for (t, b) in s.table().iter().enumerate() {
                out.push_str(&format!("{t},{b}\n"));
            }
            emit(&out);
            Ok(())
        }
        Command::Cost { cfg, a, b } => cmd_cost(&cfg, &a, &b),
        Command::Landscape {
            cfg,
            checkpoint,
            half_width,
            points,
            direction_seed,
            bits,
        } => {
            let config = load_config(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = Arc::new(ingest_dataset(&config.data)?);
            let trainer = Trainer::resume(config.clone(), data.clone(), &ckpt)?;
            let precision = PassPrecision::forward_only(bits, bits, config.quant.weight, config.quant.activation);
            let grid = loss_landscape(trainer.model(), &data.test, &precision, half_width, points, direction_seed)
                .map_err(|e| match e {
                    Error::Invalid(m) => config_err(m),
                    e => e.into(),
                })?;
            let dir = out_dir(&cfg, "landscape");
            write(&dir.join("landscape.csv"), &grid.to_csv())?;
            write(&dir.join("resolved_config.toml"), &config.to_toml())?;
            println!("center loss {}", grid.center());
            println!("wrote {}", dir.join("landscape.csv").display());
            Ok(())
        }
        Command::Sweep {
            cfg,
            patterns,
            cycles,
            bounds,
            train,
        } => {
            let config = load_config(&cfg)?;
            let bounds = bounds
                .iter()
                .map(|b| {
                    let (lo, hi) = b
                        .split_once('-')
                        .ok_or_else(|| config_err(format!("bound pair `{b}` is not like 3-8")))?;
                    Ok((
                        lo.parse().map_err(config_err)?,
                        hi.parse().map_err(config_err)?,
                    ))
                })
                .collect::<CliResult<Vec<(u32, u32)>>>()?;
            let spec = SweepSpec {
                patterns,
                cycles,
                bounds,
                train,
            };
            let rows = sweep(&config, &spec, None)?;
            let table = sweep_table(&rows);
            let dir = out_dir(&cfg, "sweep");
            write(&dir.join("sweep.csv"), &table)?;
            write(&dir.join("resolved_config.toml"), &config.to_toml())?;
            emit(&table);
            Ok(())
        }
        Command::Report { logs } => {
            let paths: Vec<&Path> = logs.iter().map(PathBuf::as_path).collect();
            emit(&report_table(&report(&paths)?));
            Ok(())
        }
    }
}

fn cmd_train(args: &ConfigArgs, dry_run: bool, resume: Option<&Path>) -> CliResult {
    let cfg = load_config(args)?;
    if dry_run {
        let mut out = String::from("epoch,fw_bits,bw_bits,lr\n");
        for p in plan(&cfg)? {
            out.push_str(&format!("{},{},{},{}\n", p.epoch, p.fw_bits, p.bw_bits, p.lr));
        }
        emit(&out);
        return Ok(());
    }
    let dir = out_dir(args, "train");
    write(&dir.join("resolved_config.toml"), &cfg.to_toml())?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let data = Arc::new(ingest_dataset(&cfg.data)?);
            Trainer::resume(cfg.clone(), data, &ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    }
    .with_output_dir(&dir);
    while !trainer.is_finished() {
        let r = trainer.run_epoch()?;
        eprintln!(
            "epoch {:>3}  fw {:>2}  lr {:<8} loss {:.4}  train {:.2}%  test {:.2}%",
            r.epoch, r.fw_bits, r.lr, r.train_loss, r.train_accuracy, r.test_accuracy
        );
    }
    trainer.checkpoint().save(&dir.join("checkpoints").join("final.ckpt"))?;
    let (_, log, ledger) = trainer.into_parts();
    write_run_outputs(&dir, &cfg, &log, &ledger)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_prt(args: &ConfigArgs, no_train: bool) -> CliResult {
    let cfg = load_config(args)?;
    let dir = out_dir(args, "prt");
    write(&dir.join("resolved_config.toml"), &cfg.to_toml())?;
    let mut trainer = Trainer::new(cfg.clone())?.with_output_dir(&dir);
    let result = if no_train {
        run_prt_on(&mut trainer)?
    } else {
        prt_then_train(&mut trainer)?
    };
    let json = serde_json::to_string_pretty(&result).map_err(Error::from)?;
    write(&dir.join("prt.json"), &json)?;
    let mut trace = String::from("bits,epochs,window_accuracy,delta\n");
    for p in &result.trace {
        trace.push_str(&format!("{},{},{},{}\n", p.bits, p.epochs, p.window_accuracy, p.delta));
    }
    write(&dir.join("prt_trace.csv"), &trace)?;
    for p in &result.trace {
        println!(
            "bits {:>2}  window accuracy {:.2}%  delta {:+.2}",
            p.bits, p.window_accuracy, p.delta
        );
    }
    if result.converged {
        println!("lower bound {} bits", result.lower_bound_bits);
    } else {
        println!("no probe crossed the threshold");
    }
    let (_, log, ledger) = trainer.into_parts();
    let final_cfg = if result.converged && !no_train {
        let mut c = cfg;
        c.precision.b_min = result.lower_bound_bits;
        c
    } else {
        cfg
    };
    write_run_outputs(&dir, &final_cfg, &log, &ledger)?;
    Ok(())
}

fn cmd_cost(args: &ConfigArgs, a: &str, b: &str) -> CliResult {
    let base = load_config(args)?;
    parse_precision_shorthand(a).map_err(config_err)?;
    parse_precision_shorthand(b).map_err(config_err)?;
    let cfg_a = base.clone().with_precision_shorthand(a).map_err(config_err)?;
    let cfg_b = base.with_precision_shorthand(b).map_err(config_err)?;
    let la = analytic_cost(&cfg_a)?;
    let lb = analytic_cost(&cfg_b)?;
    let rep = run_report(&la, &lb)?;
    let mut out = String::from(
        "setting,forward_bitops,error_backprop_bitops,weight_grad_bitops,total_bitops,update_bitops\n",
    );
    for (name, l) in [(a, &la), (b, &lb)] {
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            l.forward_bitops,
            l.error_backprop_bitops,
            l.weight_grad_bitops,
            l.total(),
            l.update_bitops
        ));
    }
    out.push_str(&format!("forward_reduction_pct,{:.4}\n", rep.forward_reduction_pct));
    out.push_str(&format!("total_reduction_pct,{:.4}\n", rep.total_reduction_pct));
    emit(&out);
    if let Some(dir) = &args.out {
        write(
            &dir.join("cost.json"),
            &serde_json::to_string_pretty(&rep).map_err(Error::from)?,
        )?;
    }
    Ok(())
}
