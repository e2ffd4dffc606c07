use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dlo_cli::commands::{sibling, write_config_sidecar};
use dlo_cli::{
    bench_models, evaluate_model, generate_dataset, plan_task, train_model, CliError, ExperimentConfig, TargetSpec,
    TaskFile,
};
use dlo_core::data::{read_dataset, write_dataset, Split};
use dlo_neuro::eval::bench_csv;
use dlo_neuro::io::{load_model, save_model};
use dlo_neuro::Architecture;

#[derive(Parser)]
#[command(name = "dlo", version, about = "Learned DLO shape models: data, training, evaluation, planning")]
struct Cli {
    /// Experiment config (TOML). Defaults to $DLO_CONFIG, then built-in values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sequence generation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate random-move sequences and write a paired dataset.
    GenData {
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        moves: Option<usize>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        length: Option<f64>,
    },
    /// Train a model; writes the model JSON and a history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Relative prediction errors; per-sample CSV and summary JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Length of the evaluated rod; inputs are rescaled from the training length.
        #[arg(long)]
        scale_length: Option<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Closed-loop shaping on the simulator.
    Plan {
        #[arg(long)]
        model: PathBuf,
        /// JSON with start `grippers` and `target` state.
        #[arg(long, conflicts_with = "random_target", required_unless_present = "random_target")]
        target: Option<PathBuf>,
        #[arg(long)]
        random_target: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.costs.csv`.
        #[arg(long)]
        costs: Option<PathBuf>,
    },
    /// Inference timing per model and batch size.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::GenData {
            sequences,
            out,
            augment,
            moves,
            preset,
            length,
        } => {
            if let Some(k) = sequences {
                cfg.data.sequences = k;
            }
            if let Some(m) = moves {
                cfg.data.moves = m;
            }
            if let Some(p) = preset {
                cfg.rod.preset = p;
            }
            if let Some(l) = length {
                cfg.rod.length = l;
            }
            cfg.data.augment |= augment;
            let report = generate_dataset(&cfg, cli.jobs)?;
            for (i, e) in &report.failures {
                eprintln!("sequence {i} failed: {e}");
            }
            write_dataset(&report.dataset, &out)?;
            write_config_sidecar(&cfg, &out)?;
            let [tr, va, te] = report.dataset.header.split_sizes;
            println!(
                "samples: train {tr}, val {va}, test {te} (paired {}, augmented {})",
                report.n_paired,
                report.dataset.len() - report.n_paired
            );
        }
        Cmd::Train {
            data,
            init,
            fraction,
            epochs,
            arch,
            out,
            history,
        } => {
            if let Some(f) = fraction {
                cfg.model.fraction = f;
            }
            if let Some(e) = epochs {
                cfg.model.hyper.epochs = e;
            }
            let init = init.map(|p| load_model(&p, None)).transpose()?;
            match (arch, &init) {
                (Some(a), _) => cfg.model.arch = a,
                (None, Some(m)) => cfg.model.arch = m.arch,
                _ => {}
            }
            if let Some(m) = &init {
                cfg.representation.state = m.cfg.state;
                cfg.representation.orientation = m.cfg.orientation;
                cfg.representation.action = m.cfg.action;
            }
            let dataset = read_dataset(&data)?;
            let outcome = train_model(&cfg, &dataset, init.as_ref())?;
            eprintln!("training samples used: {}", outcome.n_train);
            save_model(&outcome.model, &out)?;
            write_config_sidecar(&cfg, &out)?;
            let hist = history.unwrap_or_else(|| sibling(&out, ".history.csv"));
            write(&hist, &outcome.history.to_csv())?;
            println!(
                "{} epochs, best epoch {:?}, model {}",
                outcome.history.epochs.len(),
                outcome.history.best_epoch,
                out.display()
            );
        }
        Cmd::Eval {
            model,
            data,
            scale_length,
            split,
            out,
            summary,
        } => {
            let model = load_model(&model, None)?;
            let dataset = read_dataset(&data)?;
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Val => Some(Split::Val),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let (report, file) = evaluate_model(&model, &dataset, split, scale_length.or(cfg.scaling.l_test))?;
            write(&out, &report.to_csv())?;
            let path = summary.unwrap_or_else(|| sibling(&out, ".summary.json"));
            write(&path, &serde_json::to_string_pretty(&file)?)?;
            let s = &file.summary;
            println!(
                "median {:.4}, mean {:.4}, p5 {:.4}, p95 {:.4} over {} samples ({} excluded)",
                s.median, s.mean, s.p5, s.p95, s.n_evaluated, s.n_excluded
            );
        }
        Cmd::Plan {
            model,
            target,
            random_target,
            steps,
            out,
            costs,
        } => {
            if let Some(n) = steps {
                cfg.plan.steps = n;
            }
            let model = load_model(&model, None)?;
            let task_target = match (target, random_target) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p)?;
                    let task: TaskFile = serde_json::from_str(&text)?;
                    TargetSpec::File(task)
                }
                (None, Some(seed)) => TargetSpec::Random(seed),
                (None, None) => return Err(CliError::Config("need --target or --random-target".into())),
            };
            let file = plan_task(&cfg, &model, &task_target)?;
            write(&out, &serde_json::to_string_pretty(&file)?)?;
            let path = costs.unwrap_or_else(|| sibling(&out, ".costs.csv"));
            write(&path, &file.cost_csv())?;
            let r = &file.result;
            println!(
                "L3 to target: initial {:.5} m, final {:.5} m ({:.3} of initial)",
                r.initial_l3,
                r.final_l3,
                r.final_l3 / r.initial_l3
            );
        }
        Cmd::Bench {
            models,
            batches,
            reps,
            out,
        } => {
            let batches = batches.unwrap_or_else(|| cfg.bench.batches.clone());
            let reps = reps.unwrap_or(cfg.bench.reps);
            let loaded = models
                .iter()
                .map(|p| load_model(p, None))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = bench_models(&loaded, &batches, cfg.bench.warmup, reps)?;
            write(&out, &bench_csv(&rows))?;
            for r in &rows {
                println!("{} batch {}: median {:.1} us", r.arch, r.batch, r.median_us);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
