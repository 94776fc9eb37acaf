use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddetect::distill::DistillConfig;
use ddetect::models::{load_model, save_model, train_classifier, Dataset};
use ddetect::pipeline::{
    construct_inputs, detect, pairwise_detect, CandidateSet, DetectContext, DetectSettings, GeneratorCache,
};
use ddetect::scores::ScoreKind;
use ddetect::synthesis::{load_input_set, save_input_set, InputSource};
use ddetect::RngStream;
use ddetect_cli::bench::{cli_bench, output_dir};
use ddetect_cli::config::ExperimentConfig;
use ddetect_cli::pairwise::{pairs_csv, run_pairwise, summarize};
use ddetect_cli::sweep::cli_sweep_lambda;
use ddetect_cli::world::DataWorld;
use ddetect_cli::{HarnessError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "ddetect",
    version,
    about = "Detect which candidate teacher a student model was distilled from"
)]
struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed (world seed for train/distill, RNG seed for detect/synth).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark grid and write report.csv plus per-run reports.
    Bench {
        /// Output directory; falls back to the config's output_dir, then ./bench-out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the pairwise HSIC protocol.
        #[arg(long)]
        pairwise: bool,
    },
    /// Distill across the λ grid and write the sweep CSV and chart.
    SweepLambda {
        /// Output directory; falls back to the config's output_dir, then ./sweep-out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score candidate checkpoints against a student checkpoint.
    Detect {
        /// Student checkpoint (.ddck).
        #[arg(long)]
        student: PathBuf,
        /// Candidate teacher checkpoints; the verdict indexes into this list.
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        /// point_kl, point_l2, acs or cka.
        #[arg(long, default_value = "point_kl")]
        score_kind: ScoreKind,
        /// synthetic, noise or oracle.
        #[arg(long, default_value = "synthetic")]
        source: InputSource,
        /// Number of probe inputs.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Real inputs (CSV or DDMX) for the oracle source.
        #[arg(long)]
        oracle_inputs: Option<PathBuf>,
        /// Also run an HSIC test per candidate.
        #[arg(long)]
        pairwise: bool,
        /// Significance level of the pairwise tests.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Build a probe set for a student and save it (CSV when the path ends in .csv).
    Synth {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value = "synthetic")]
        source: InputSource,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        oracle_inputs: Option<PathBuf>,
        /// Matrix path; a JSON sidecar with labels is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the configured mixture and save a checkpoint.
    Train {
        /// Architecture name from the config's `architectures` table.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student from a teacher checkpoint on the configured mixture.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        arch: String,
        /// Soft-target weight; the config's distillation.lambda when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn oracle_data(path: Option<&Path>, classes: usize) -> Result<Option<Dataset>> {
    let Some(path) = path else { return Ok(None) };
    let set = load_input_set(path)?;
    let classes = classes.max(set.labels.iter().max().map_or(0, |m| m + 1));
    Ok(Some(Dataset::new(set.inputs, set.labels, classes)?))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    let seed = cli.seed.unwrap_or(config.seeds[0]);
    match cli.command {
        Command::Bench { out, pairwise } => {
            let dir = output_dir(&config, out.as_deref(), "bench-out");
            let outcome = cli_bench(&config, &dir)?;
            for row in &outcome.rows {
                println!(
                    "{:<20} N={:<4} acc {:.3} ± {:.3}  auc {:.3} ± {:.3}",
                    row.method, row.input_size, row.accuracy_mean, row.accuracy_std, row.auc_mean, row.auc_std
                );
            }
            if pairwise {
                let pairs = run_pairwise(&config)?;
                let summary = summarize(&pairs);
                std::fs::write(dir.join("pairwise.csv"), pairs_csv(&pairs))
                    .map_err(|e| HarnessError::io("writing pairwise.csv", e))?;
                let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
                std::fs::write(dir.join("pairwise.json"), &json)
                    .map_err(|e| HarnessError::io("writing pairwise.json", e))?;
                println!("pairwise: {json}");
            }
            println!("wrote {}", dir.display());
        }
        Command::SweepLambda { out } => {
            let dir = output_dir(&config, out.as_deref(), "sweep-out");
            for r in cli_sweep_lambda(&config, &dir)? {
                println!(
                    "λ={:.2}  KL teacher {:.4}  KL independent {:.4}  wins {}/{}",
                    r.lambda, r.kl_teacher, r.kl_independent, r.point_score_wins, r.runs
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Detect {
            student,
            candidates,
            score_kind,
            source,
            n,
            oracle_inputs,
            pairwise,
            alpha,
        } => {
            let student_model = load_model(&student)?.eval();
            let pool = candidates
                .iter()
                .map(|p| Ok((p.display().to_string(), load_model(p)?.eval())))
                .collect::<Result<Vec<_>>>()?;
            let pool = CandidateSet::new(pool)?;
            let data = oracle_data(oracle_inputs.as_deref(), student_model.num_classes())?;
            let mut settings = DetectSettings::new(source, n, score_kind);
            settings.scores = config.scores;
            settings.synthesis = config.synthesis.clone();
            settings.synthesis.seed = seed;
            let cache = GeneratorCache::new();
            let ctx = DetectContext {
                oracle_data: data.as_ref(),
                cache: Some(&cache),
            };
            let rng = RngStream::new(seed);
            let id = student.display().to_string();
            let found = detect(&id, &student_model, &pool, &settings, &ctx, &rng)?;
            let mut verdict = json!({
                "prediction": found.prediction,
                "predicted_candidate": pool.ids()[found.prediction],
                "score_kind": score_kind,
                "input_source": source,
                "n": n,
                "seed": seed,
                "candidates": pool.ids().iter().zip(&found.scores)
                    .map(|(c, s)| json!({"candidate": c, "score": s}))
                    .collect::<Vec<_>>(),
            });
            if pairwise {
                let tests = pool
                    .iter()
                    .enumerate()
                    .map(|(k, (c, t))| {
                        let r = pairwise_detect(&student_model, t, &found.inputs, alpha, 1000, &mut rng.split(2000 + k as u64))?;
                        Ok(json!({"candidate": c, "statistic": r.statistic, "p_value": r.p_value, "distilled": r.decision}))
                    })
                    .collect::<Result<Vec<_>>>()?;
                verdict["pairwise"] = json!({"alpha": alpha, "tests": tests});
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&verdict).expect("verdict serializes")
            );
        }
        Command::Synth {
            student,
            source,
            n,
            oracle_inputs,
            out,
        } => {
            let model = load_model(&student)?.eval();
            let data = oracle_data(oracle_inputs.as_deref(), model.num_classes())?;
            let mut settings = DetectSettings::new(source, n, ScoreKind::PointKl);
            settings.synthesis = config.synthesis.clone();
            settings.synthesis.seed = seed;
            let ctx = DetectContext {
                oracle_data: data.as_ref(),
                cache: None,
            };
            let set = construct_inputs(
                &student.display().to_string(),
                &model,
                &settings,
                &ctx,
                &RngStream::new(seed),
            )?;
            save_input_set(&set, &out)?;
            println!("wrote {} rows to {}", set.len(), out.display());
        }
        Command::Train { arch, out } => {
            let world = DataWorld::new(&config, seed)?;
            let mut cfg = config.training.clone();
            cfg.seed = seed;
            let (model, _) = train_classifier(&config.architecture(&arch)?, &world.train, &cfg)?;
            let model = model.eval();
            println!("test accuracy {:.4}", model.accuracy(&world.test)?);
            save_model(&model, &out)?;
        }
        Command::Distill {
            teacher,
            arch,
            lambda,
            out,
        } => {
            let world = DataWorld::new(&config, seed)?;
            let teacher = load_model(&teacher)?.eval();
            let mut cfg = DistillConfig {
                lambda: lambda.unwrap_or(config.distillation.lambda),
                ..config.distillation.clone()
            };
            cfg.train.seed = seed;
            cfg.validate().map_err(|e| HarnessError::Config {
                path: "--lambda".into(),
                message: e.to_string(),
            })?;
            let student =
                ddetect::distill::distill_student(&teacher, &config.architecture(&arch)?, &world.train, &cfg)?;
            let student = student.eval();
            println!("test accuracy {:.4}", student.accuracy(&world.test)?);
            save_model(&student, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
