use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unlearn_lab::bench::{
    aggregate, load_checkpoint, read_rows_csv, save_checkpoint, scatter_pairs,
    write_aggregates_csv, write_pairs_csv, BenchmarkConfig, Pipeline,
};
use unlearn_lab::datagen::{generate_suite, sample_episode, save_dataset};
use unlearn_lab::divergence::{zero_shot_test_accuracy, KnowledgeReport, SetKnowledge};
use unlearn_lab::fewshot::{fit_adapter, Method};
use unlearn_lab::miniclip::MiniClipModel;
use unlearn_lab::unlearn::{DampeningConfig, KnowledgeLossLevel, LevelLabel, Trial};
use unlearn_lab::Result;

#[derive(Parser)]
#[command(
    name = "unlearn-lab",
    about = "Unlearning, knowledge-loss and few-shot recovery experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Benchmark configuration (JSON); the reference suite when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global, data and pretraining seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes every suite dataset to `<out>/data/<name>`.
    GenData,
    /// Pretrains the base model; writes `base.mckp` and `train_log.csv`.
    Pretrain,
    /// Dampens with a fixed (alpha, lambda).
    Unlearn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        forget: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        lambda: f64,
    },
    /// Searches (alpha, lambda) for a knowledge-loss level.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        forget: String,
        #[arg(long, default_value = "default")]
        level: LevelLabel,
    },
    /// Compares validation accuracy of two checkpoints.
    KnowledgeReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        unlearned: PathBuf,
        #[arg(long)]
        forget: String,
    },
    /// Fits one adapter on one episode.
    Fewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "sepres")]
        method: Method,
        #[arg(long, default_value_t = 16)]
        shots: usize,
    },
    /// Runs the full sweep.
    Benchmark,
    /// Runs the exclude-versus-unlearn comparison; the pooled oracle suite
    /// when no config is given.
    Oracle,
    /// Aggregates a report CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common, fallback: fn() -> BenchmarkConfig) -> Result<BenchmarkConfig> {
    let mut cfg = match &common.config {
        Some(path) => BenchmarkConfig::load(path)?,
        None => fallback(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.suite.seed = seed;
        cfg.pretrain.seed = seed;
    }
    cfg.out_dir = Some(common.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline_from(cfg: BenchmarkConfig, checkpoint: &Path) -> Result<Pipeline> {
    let (base, _) = load_checkpoint(checkpoint)?;
    let datasets = generate_suite(&cfg.suite)?;
    Pipeline::from_parts(cfg, datasets, base)
}

fn save_unlearned(
    p: &Pipeline,
    model: &MiniClipModel,
    forget: &str,
    level: Option<LevelLabel>,
    out: &Path,
) -> Result<PathBuf> {
    let mut model = model.clone();
    model.params.round_to_f32();
    let mut prov = p.provenance("unlearn")?;
    prov.forget_dataset = Some(forget.to_string());
    prov.level = level;
    let name = match level {
        Some(l) => format!("unlearned_{forget}_{l}.mckp"),
        None => format!("unlearned_{forget}.mckp"),
    };
    let path = out.join(name);
    save_checkpoint(&path, &model, &prov)?;
    Ok(path)
}

fn write_trials(trials: &[Trial], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "lambda", "tkl", "forget_accuracy", "dampened"])?;
    for t in trials {
        w.write_record([
            t.config.alpha.to_string(),
            t.config.lambda.to_string(),
            format!("{:.3}", t.tkl),
            format!("{:.3}", 100.0 * t.forget_accuracy),
            t.dampened.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let fallback = match cli.command {
        Command::Oracle => BenchmarkConfig::oracle_reference,
        _ => BenchmarkConfig::default,
    };
    let cfg = load_config(&cli.common, fallback)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenData => {
            for ds in generate_suite(&cfg.suite)? {
                save_dataset(&ds, &out.join("data").join(&ds.name))?;
            }
            fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
        }
        Command::Pretrain => {
            let p = Pipeline::prepare(cfg)?;
            save_checkpoint(&out.join("base.mckp"), &p.base, &p.provenance("pretrain")?)?;
            p.pretrain_log.save_csv(&out.join("train_log.csv"))?;
            println!(
                "pretrained; mean probe accuracy {:.3}",
                100.0 * p.pretrain_log.mean_probe_accuracy()
            );
        }
        Command::Unlearn {
            checkpoint,
            forget,
            alpha,
            lambda,
        } => {
            let p = pipeline_from(cfg, &checkpoint)?;
            let weights = p.weights(&forget)?;
            let problem = p.problem(&forget, &weights)?;
            let (trial, model) = problem.evaluate(DampeningConfig { alpha, lambda })?;
            let path = save_unlearned(&p, &model, &forget, None, &out)?;
            println!(
                "forget accuracy {:.3}, tkl {:.3}, {} parameters dampened -> {}",
                100.0 * trial.forget_accuracy,
                trial.tkl,
                trial.dampened,
                path.display()
            );
        }
        Command::Calibrate {
            checkpoint,
            forget,
            level,
        } => {
            let p = pipeline_from(cfg, &checkpoint)?;
            let weights = p.weights(&forget)?;
            let problem = p.problem(&forget, &weights)?;
            let cal = problem.calibrate(KnowledgeLossLevel::standard(level))?;
            write_trials(
                &cal.trials,
                &out.join(format!("calibration_{forget}_{level}.csv")),
            )?;
            let path = save_unlearned(&p, &cal.model, &forget, Some(level), &out)?;
            println!(
                "alpha {} lambda {:.6}: tkl {:.3}, forget accuracy {:.3} -> {}",
                cal.chosen.config.alpha,
                cal.chosen.config.lambda,
                cal.chosen.tkl,
                100.0 * cal.chosen.forget_accuracy,
                path.display()
            );
        }
        Command::KnowledgeReport {
            checkpoint,
            unlearned,
            forget,
        } => {
            let p = pipeline_from(cfg, &checkpoint)?;
            let (after, _) = load_checkpoint(&unlearned)?;
            let mut sets = Vec::new();
            for name in &p.config.validation {
                let ds = p.dataset(name)?;
                sets.push(SetKnowledge {
                    set: name.clone(),
                    acc_before: 100.0 * zero_shot_test_accuracy(&p.base, ds)?,
                    acc_after: 100.0 * zero_shot_test_accuracy(&after, ds)?,
                });
            }
            let report = KnowledgeReport::new(sets, &p.weights(&forget)?)?;
            let path = out.join(format!("knowledge_{forget}.csv"));
            report.save_csv(&path)?;
            report.write_csv(std::io::stdout())?;
        }
        Command::Fewshot {
            checkpoint,
            dataset,
            method,
            shots,
        } => {
            let p = pipeline_from(cfg, &checkpoint)?;
            let ds = p.dataset(&dataset)?;
            let episode = sample_episode(ds, ds.classes.len(), shots, p.config.seed)?;
            let fit = fit_adapter(
                &p.base,
                ds,
                &episode,
                method,
                &p.config.adapter,
                p.config.seed,
            )?;
            println!(
                "{method} {shots}-shot on {dataset}: {:.3}",
                100.0 * fit.query_accuracy
            );
        }
        Command::Benchmark => {
            let p = Pipeline::prepare(cfg)?;
            let report = p.run_benchmark()?;
            report.save(&out)?;
            save_checkpoint(&out.join("base.mckp"), &p.base, &p.provenance("pretrain")?)?;
            println!(
                "{} rows -> {}",
                report.rows.len(),
                out.join("report.csv").display()
            );
        }
        Command::Oracle => {
            let p = Pipeline::prepare(cfg)?;
            let report = p.run_oracle()?;
            report.save(&out)?;
            for c in &report.comparisons {
                println!(
                    "{}: subset {:.3} vs {:.3}, other {:.3} vs {:.3}",
                    c.subset,
                    c.unlearned_subset,
                    c.excluded_subset,
                    c.unlearned_other,
                    c.excluded_other
                );
            }
        }
        Command::Report { input } => {
            let rows = read_rows_csv(fs::File::open(&input)?)?;
            write_aggregates_csv(
                &aggregate(&rows)?,
                fs::File::create(out.join("aggregates.csv"))?,
            )?;
            write_pairs_csv(
                &scatter_pairs(&rows),
                fs::File::create(out.join("pairs.csv"))?,
            )?;
            println!("{} rows aggregated", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
