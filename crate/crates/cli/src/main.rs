use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use captionfool::attack::{load_artifact, save_artifact, AttackArtifact, Budget};
use captionfool::captioner::{load_model, save_model, CaptionModel};
use captionfool::config::PipelineConfig;
use captionfool::eval::{emit_report, BlocklistFilter};
use captionfool::pipeline;
use captionfool::synthdata::{Corpus, IMAGE_SIZE};
use captionfool::{Error, Result};

#[derive(Parser)]
#[command(
    name = "captionfool",
    about = "Universal adversarial patches against a toy image captioner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Corpus manifest written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Patch,
    Sparse,
}

#[derive(Args)]
struct Selection {
    /// Comma-separated budgets: `patch:N`, `sparse:K`, or bare numbers read
    /// under `--mode` (a sparse value below 1 is a pixel fraction).
    #[arg(long)]
    budget: Option<String>,
    /// Comma-separated target terms.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long, value_enum, default_value = "patch")]
    mode: Mode,
}

#[derive(Subcommand)]
enum Command {
    /// Write the corpus manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the victim captioner.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Optimize one universal perturbation.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        selection: Selection,
    },
    /// Score artifacts on the validation and test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long = "artifact", required = true)]
        artifacts: Vec<PathBuf>,
    },
    /// Attack and evaluate every target and budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        selection: Selection,
        /// Directory receiving one artifact per cell.
        #[arg(long)]
        artifacts_dir: Option<PathBuf>,
    },
    /// Block rates of attack captions under a keyword filter.
    FilterEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long = "artifact", required = true)]
        artifacts: Vec<PathBuf>,
        /// Blocked terms, one per line; the configured blocked lexicon otherwise.
        #[arg(long)]
        blocklist: Option<PathBuf>,
    },
    /// Render CSV reports as per-split tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Accept inputs from different configs or seeds.
        #[arg(long)]
        force: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn parse_budget(item: &str, mode: Mode) -> Result<Budget> {
    if item.contains(':') {
        return Budget::parse(item);
    }
    let bad = || Error::InvalidArgument(format!("budget {item:?} is not a number"));
    match mode {
        Mode::Patch => Ok(Budget::Patches(item.parse().map_err(|_| bad())?)),
        Mode::Sparse => {
            let v: f64 = item.parse().map_err(|_| bad())?;
            if v < 1.0 {
                Ok(Budget::sparse_fraction(v, IMAGE_SIZE))
            } else if v.fract() == 0.0 {
                Ok(Budget::SparsePixels(v as usize))
            } else {
                Err(bad())
            }
        }
    }
}

/// Applies `--budget` and `--targets` to the config and re-validates.
fn apply_selection(config: &mut PipelineConfig, selection: &Selection) -> Result<()> {
    if let Some(b) = &selection.budget {
        config.attack.budgets = list(b)
            .iter()
            .map(|item| parse_budget(item, selection.mode))
            .collect::<Result<_>>()?;
    }
    if let Some(t) = &selection.targets {
        config.attack.targets = list(t);
    }
    // Round-tripping through the file form re-runs every config check.
    *config = PipelineConfig::parse(&config.to_file_string())?;
    Ok(())
}

fn load_inputs(config: &PipelineConfig, inputs: &Inputs) -> Result<(Corpus, CaptionModel)> {
    let corpus = pipeline::load_corpus(config, &inputs.data)?;
    let model = load_model(&inputs.model)?;
    pipeline::check_provenance("model", model.provenance, config)?;
    Ok((corpus, model))
}

fn load_artifacts(paths: &[PathBuf]) -> Result<Vec<AttackArtifact>> {
    paths.iter().map(load_artifact).collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn log_run(run: &captionfool::attack::AttackRun) {
    let a = &run.artifact;
    for c in &run.checks {
        eprintln!(
            "  iter {:>4}  lr {:.4}  lm {:.4}  att {:.4}  val ASR {:.2}  val loss {:.4}",
            c.iteration, c.lr, c.batch_lm_loss, c.batch_attention_loss, c.validation_asr, c.validation_loss
        );
    }
    eprintln!(
        "{} [{}]: best val ASR {:.2} after {} iterations",
        a.target_term,
        match a.mode() {
            captionfool::attack::AttackMode::Patch => format!("patch:{}", a.mask.popcount()),
            captionfool::attack::AttackMode::Sparse => format!("sparse:{}", a.mask.popcount()),
        },
        a.best_validation_asr,
        a.iterations_run
    );
}

fn log_attack_config(config: &PipelineConfig, budget: Budget) {
    let c = config.attack.sweep.for_budget(budget);
    eprintln!(
        "attack {}: alpha={} iterations={} lr={} lr_step={} lr_gamma={} batch={} selection_layer={} atten_loss_layers={}",
        budget.label(),
        c.alpha,
        c.iterations,
        c.lr,
        c.lr_step,
        c.lr_gamma,
        c.batch,
        c.selection_layer,
        c.atten_loss_layers
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let corpus = pipeline::generate_corpus(&config)?;
            write(&common.out, &pipeline::manifest(&config, &corpus))
        }
        Command::Train { common, data } => {
            let config = load_config(&common)?;
            let corpus = pipeline::load_corpus(&config, &data)?;
            let (model, history) = pipeline::train_model(&config, &corpus, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val exact-match {:.2}",
                    e.epoch, e.train_loss, e.validation_exact_match
                )
            })?;
            eprintln!("initial loss {:.4}", history.initial_loss);
            save_model(&model, &common.out)
        }
        Command::Attack {
            common,
            inputs,
            selection,
        } => {
            let mut config = load_config(&common)?;
            apply_selection(&mut config, &selection)?;
            let (corpus, model) = load_inputs(&config, &inputs)?;
            let (term, budget) = match (config.attack.targets.as_slice(), config.attack.budgets.as_slice()) {
                ([t], [b]) => (t.clone(), *b),
                _ => {
                    return Err(Error::InvalidArgument(
                        "attack takes exactly one target and one budget; use sweep for grids".into(),
                    ))
                }
            };
            log_attack_config(&config, budget);
            let run = pipeline::attack(&config, &model, &corpus, &term, budget)?;
            log_run(&run);
            save_artifact(&run.artifact, &common.out)
        }
        Command::Eval {
            common,
            inputs,
            artifacts,
        } => {
            let config = load_config(&common)?;
            let (corpus, model) = load_inputs(&config, &inputs)?;
            let report = pipeline::evaluate(&config, &model, &corpus, &load_artifacts(&artifacts)?)?;
            write(&common.out, &emit_report(&report, config.eval.format)?)
        }
        Command::Sweep {
            common,
            inputs,
            selection,
            artifacts_dir,
        } => {
            let mut config = load_config(&common)?;
            apply_selection(&mut config, &selection)?;
            let (corpus, model) = load_inputs(&config, &inputs)?;
            for &b in &config.attack.budgets {
                log_attack_config(&config, b);
            }
            if let Some(dir) = &artifacts_dir {
                std::fs::create_dir_all(dir)?;
            }
            let mut saved = Ok(());
            let (report, _) = pipeline::sweep(&config, &model, &corpus, |run| {
                log_run(run);
                if let (Some(dir), Ok(())) = (&artifacts_dir, &saved) {
                    let a = &run.artifact;
                    let name = format!("{}_{}.cfa", a.target_term.replace(' ', "-"), a.mask.popcount());
                    saved = save_artifact(a, dir.join(name));
                }
            })?;
            saved?;
            write(&common.out, &emit_report(&report, config.eval.format)?)
        }
        Command::FilterEval {
            common,
            inputs,
            artifacts,
            blocklist,
        } => {
            let config = load_config(&common)?;
            let (corpus, model) = load_inputs(&config, &inputs)?;
            let filter = match blocklist {
                Some(path) => BlocklistFilter::load(path)?,
                None => BlocklistFilter::new(config.data.lexicon.blocked.iter().map(String::as_str)),
            };
            let summary = pipeline::filter_eval(&config, &model, &corpus, &load_artifacts(&artifacts)?, &filter)?;
            write(&common.out, &pipeline::render_filter_summary(&config, &summary))
        }
        Command::Report { out, force, inputs } => {
            let texts = inputs
                .iter()
                .map(std::fs::read_to_string)
                .collect::<std::io::Result<Vec<_>>>()?;
            write(&out, &pipeline::render_reports(&texts, force)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(problems)) => {
            eprintln!("error: invalid configuration:");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
