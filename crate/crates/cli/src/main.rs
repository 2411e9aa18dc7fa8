mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;
use swinnow_core::data::{generate_sequence, load_split, write_split, Sample};
use swinnow_core::model::count_params;
use swinnow_core::train::{bench_attention, evaluate, standard_grids, train, EvalReport};
use swinnow_core::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(
    name = "swinnow",
    version,
    about = "Windowed-attention nowcasting: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand that needs a configuration. Values in
/// the file lose to SWINNOW_SEED, which loses to --set.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines (# starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set embed_dim=48 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn settings(&self) -> Result<Settings> {
        Settings::gather(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic train/val/test splits to a directory
    Gen {
        /// Output directory for .w4ct files and the manifest
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model, logging metrics.jsonl and checkpointing best.swnc
    Train {
        /// Run directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Read samples from this dataset directory instead of synthesizing
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint against the persistence baseline
    Eval {
        /// Checkpoint file (.swnc) to score
        #[arg(long)]
        checkpoint: PathBuf,
        /// Read samples from this dataset directory instead of synthesizing
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split to evaluate
        #[arg(long, default_value = "test")]
        split: String,
        /// Synthetic sample count (defaults to the test_samples setting)
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full 64-bit gradient suite; nonzero exit on any failure
    Gradcheck,
    /// Time windowed vs. all-pairs attention and fit cost exponents
    Bench {
        /// Timed repetitions per grid (after one warmup)
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Use small grids for a fast smoke run
        #[arg(long)]
        quick: bool,
    },
    /// Print the parameter count for a configuration
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { out, cfg } => run_gen(&out, &cfg.settings()?),
        Cmd::Train { out, data, cfg } => run_train(&out, data, &cfg.settings()?),
        Cmd::Eval { checkpoint, data, split, samples, cfg } => {
            run_eval(&checkpoint, data, &split, samples, &cfg.settings()?)
        }
        Cmd::Gradcheck => run_gradcheck(),
        Cmd::Bench { reps, quick } => run_bench(reps, quick),
        Cmd::Params { cfg } => run_params(&cfg.settings()?),
    }
}

fn run_gen(out: &std::path::Path, s: &Settings) -> Result<()> {
    let model = s.model_config()?;
    let params = s.synth_params(&model)?;
    let splits = [
        ("train", s.usize_or("train_samples", 64)?),
        ("val", s.usize_or("val_samples", 16)?),
        ("test", s.test_samples()?),
    ];
    for (split, count) in splits {
        if count == 0 {
            continue;
        }
        let paths = write_split(out, split, count, &params)?;
        println!("wrote {} {split} samples to {}", paths.len(), out.display());
    }
    Ok(())
}

fn run_train(out: &std::path::Path, data: Option<PathBuf>, s: &Settings) -> Result<()> {
    let mut run = s.run_config(out)?;
    run.data_dir = data;
    let report = train(&run)?;
    for e in &report.epochs {
        match e.val_score {
            Some(v) => println!(
                "epoch {:>3}  train {:.6}  val {:.6}  lr {:.3e}  {:.1}s",
                e.epoch, e.train_loss, v, e.lr, e.seconds
            ),
            None => println!(
                "epoch {:>3}  train {:.6}  lr {:.3e}  {:.1}s",
                e.epoch, e.train_loss, e.lr, e.seconds
            ),
        }
    }
    if let (Some(best), Some(at)) = (report.best_val, report.best_epoch) {
        println!("best val {best:.6} at epoch {at}");
    }
    println!("{} optimizer steps, checkpoint {}", report.steps, report.checkpoint.display());
    Ok(())
}

fn run_eval(
    checkpoint: &std::path::Path,
    data: Option<PathBuf>,
    split: &str,
    samples: Option<usize>,
    s: &Settings,
) -> Result<()> {
    let model = s.model_config()?;
    let synth = s.synth_params(&model)?;
    let set: Vec<Sample> = match data {
        Some(dir) => load_split(&dir, split)?,
        None => {
            let count = match samples {
                Some(n) => n,
                None => s.test_samples()?,
            };
            (0..count)
                .map(|i| generate_sequence(&synth, split, i as u64))
                .collect::<Result<_>>()?
        }
    };
    let batch = s.usize_or("batch_size", 4)?;
    let report = evaluate(&model, checkpoint, &set, batch)?;
    print_eval(split, &report);
    Ok(())
}

fn print_eval(split: &str, r: &EvalReport) {
    println!("{split} split, {} samples", r.samples);
    println!("  model        {:.6}", r.model_score);
    println!("  persistence  {:.6}", r.baseline_score);
    for (var, score) in &r.model_per_var {
        let base = r.baseline_per_var.get(var).copied().unwrap_or(f64::NAN);
        println!("    {var:<22} model {score:.6}  persistence {base:.6}");
    }
    if r.model_score < r.baseline_score {
        println!("model beats persistence by {:.2}%", 100.0 * (1.0 - r.model_score / r.baseline_score));
    } else {
        println!("model does not beat persistence");
    }
}

fn run_gradcheck() -> Result<()> {
    let entries = gradsuite::full_suite()?;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<42} max_rel_err {:.3e}  tol {:.0e}  probes {}",
            e.name, e.max_rel_err, e.tolerance, e.probes
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        return Err(Error::numeric(format!(
            "{failed} of {} gradient checks failed",
            entries.len()
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

fn run_bench(reps: usize, quick: bool) -> Result<()> {
    if reps == 0 {
        return Err(Error::config("bench needs at least one repetition"));
    }
    let (windowed, global) = if quick {
        (
            vec![[1, 16, 16], [1, 32, 32], [1, 64, 64]],
            vec![[1, 8, 8], [1, 12, 12], [1, 16, 16]],
        )
    } else {
        standard_grids()
    };
    let report = bench_attention(&windowed, &global, 32, 2, reps)?;
    println!("windowed attention (7x7 windows):");
    for p in &report.windowed {
        println!("  grid {:>3}x{:>3}x{:>3}  {:>8} tokens  {:>10.3} ms", p.grid[0], p.grid[1], p.grid[2], p.tokens, p.millis);
    }
    println!("all-pairs attention:");
    for p in &report.global {
        println!("  grid {:>3}x{:>3}x{:>3}  {:>8} tokens  {:>10.3} ms", p.grid[0], p.grid[1], p.grid[2], p.tokens, p.millis);
    }
    println!("windowed slope {:.3} (linear is 1.0)", report.windowed_slope);
    println!("all-pairs slope {:.3} (quadratic is 2.0)", report.global_slope);
    Ok(())
}

fn run_params(s: &Settings) -> Result<()> {
    let cfg = s.model_config()?;
    print!("{}", cfg.canonical_text());
    println!("parameters = {}", count_params(&cfg)?);
    Ok(())
}
