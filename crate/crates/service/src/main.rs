use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sepsis_core::simgen::GroundTruthMdp;
use sepsis_core::study::{analyze, read_decision_log, IntervalMethod};
use sepsis_service::dataset::Dataset;
use sepsis_service::pipeline::{evaluate, train_to_dir};
use sepsis_service::state::read_references;
use sepsis_service::{AppState, ModelBundle, ServeConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sepsis",
    version,
    about = "Train, evaluate and serve ICU treatment-policy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Six well-separated latent states over eight actions.
    SixState,
    /// Random dynamics over all 25 actions.
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum CohortFormat {
    Events,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interval {
    Normal,
    Wilson,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model bundle from a cohort directory.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// JSON or TOML training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory to create; must not exist.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bundle's policy on a cohort with weighted importance sampling.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Sample a synthetic cohort from a ground-truth MDP.
    Simgen {
        /// Ground-truth MDP as JSON; overrides --preset.
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "six-state")]
        preset: Preset,
        /// Latent states for the random preset.
        #[arg(long, default_value_t = 750)]
        states: usize,
        /// Clinical features for the random preset.
        #[arg(long, default_value_t = 8)]
        features: usize,
        /// Distance between latent emission means, in noise units.
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        #[arg(long, default_value_t = 1000)]
        patients: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "events")]
        format: CohortFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "SEPSIS_BUNDLE")]
        bundle: PathBuf,
        #[arg(long, env = "SEPSIS_COHORT")]
        cohort: PathBuf,
        /// JSON-lines decision log; created if missing.
        #[arg(long, env = "SEPSIS_DECISIONS")]
        decisions: PathBuf,
        /// Reference decisions per study case (JSON object keyed by case id).
        #[arg(long, env = "SEPSIS_REFERENCES")]
        references: Option<PathBuf>,
        #[arg(long, env = "SEPSIS_BIND", default_value = "127.0.0.1:8080")]
        bind: String,
        /// File holding the bearer token required on every endpoint but /health.
        #[arg(long, env = "SEPSIS_TOKEN_FILE")]
        token_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        pseudonym_seed: u64,
        /// Serve only condition-gated recommendation views.
        #[arg(long)]
        study: bool,
    },
    /// Analyze a decision log against reference decisions.
    Report {
        #[arg(long)]
        decisions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "normal")]
        interval: Interval,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
}

type CliResult = Result<(), String>;

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            cohort,
            config,
            out,
        } => {
            let config = TrainConfig::load(&config).map_err(|e| e.to_string())?;
            let bundle = train_to_dir(&cohort, &config, &out).map_err(|e| e.to_string())?;
            if let Some(e) = &bundle.evaluation {
                println!(
                    "wrote {}: k = {}, WIS {:.2} [{:.2}, {:.2}] on {} held-out patients, clinicians {:.2}",
                    out.display(),
                    bundle.states.k,
                    e.wis.value,
                    e.wis.ci_lo,
                    e.wis.ci_hi,
                    e.n_test_episodes,
                    e.clinician_return
                );
            }
            Ok(())
        }
        Command::Evaluate { bundle, cohort } => {
            let b = ModelBundle::load(&bundle).map_err(|e| e.to_string())?;
            let data = Dataset::load(&cohort).map_err(|e| e.to_string())?;
            if data.schema.features != b.schema.features {
                return Err("cohort feature schema does not match the bundle".into());
            }
            let (wis, _) = evaluate(
                &b.mdp,
                &b.states,
                &b.action_space,
                &data.cohort,
                &b.config.ope_config(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&wis).expect("serializable")
            );
            Ok(())
        }
        Command::Simgen {
            mdp,
            preset,
            states,
            features,
            separation,
            patients,
            max_len,
            seed,
            format,
            out,
        } => {
            let truth = match mdp {
                Some(p) => serde_json::from_str::<GroundTruthMdp>(&read(&p)?)
                    .map_err(|e| format!("{}: {e}", p.display()))?,
                None => match preset {
                    Preset::SixState => GroundTruthMdp::six_state_oracle(separation),
                    Preset::Random => GroundTruthMdp::random(states, features, separation, seed),
                },
            };
            let sampled = truth
                .sample_cohort(patients, seed, max_len)
                .map_err(|e| e.to_string())?;
            let data = Dataset {
                schema: truth.schema.clone(),
                cohort: sampled.trajectories,
                ingest: None,
            };
            match format {
                CohortFormat::Events => data.write_events(&out),
                CohortFormat::Jsonl => data.write_jsonl(&out),
            }
            .map_err(|e| e.to_string())?;
            let truth_path = out.join("ground_truth.json");
            std::fs::write(
                &truth_path,
                serde_json::to_string(&truth).expect("serializable"),
            )
            .map_err(|e| format!("{}: {e}", truth_path.display()))?;
            println!("wrote {} patients to {}", data.cohort.len(), out.display());
            Ok(())
        }
        Command::Serve {
            bundle,
            cohort,
            decisions,
            references,
            bind,
            token_file,
            pseudonym_seed,
            study,
        } => {
            let token = match token_file {
                Some(p) => Some(read(&p)?.trim().to_string()).filter(|t| !t.is_empty()),
                None => None,
            };
            let config = ServeConfig {
                bundle,
                cohort,
                decisions,
                references,
                token,
                pseudonym_seed,
                study_mode: study,
            };
            let state = AppState::load(config).map_err(|e| e.to_string())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .map_err(|e| format!("{bind}: {e}"))?;
                eprintln!(
                    "listening on {}",
                    listener.local_addr().map_err(|e| e.to_string())?
                );
                sepsis_service::serve(state, listener)
                    .await
                    .map_err(|e| e.to_string())
            })
        }
        Command::Report {
            decisions,
            references,
            alpha,
            interval,
            format,
        } => {
            let log = read_decision_log(&read(&decisions)?).map_err(|e| e.to_string())?;
            let refs = read_references(&references).map_err(|e| e.to_string())?;
            let method = match interval {
                Interval::Normal => IntervalMethod::Normal,
                Interval::Wilson => IntervalMethod::Wilson,
            };
            let report = analyze(&log, &refs, alpha, method).map_err(|e| e.to_string())?;
            match format {
                ReportFormat::Text => print!("{}", report.to_text()),
                ReportFormat::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("serializable")
                ),
            }
            Ok(())
        }
    }
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
