//! End-to-end stages shared by the command-line tool and the tests. Every
//! file a stage writes carries the run's config hash and master seed.

use std::path::Path;

use crate::attack::{build_target_prompt, run_captionfool, AttackArtifact, AttackRun, Budget};
use crate::captioner::{CaptionModel, Provenance};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_artifact, filter_check, is_success, parse_csv_report, provenance_line, render_grid, BlocklistFilter,
    EvalReport, FilterSummary, ReportRow,
};
use crate::numeric::Tensor;
use crate::seeds::derive_seed;
use crate::synthdata::{build_corpus, corpus_vocabulary, manifest_string, parse_manifest, Corpus, Sample, SplitName};
use crate::trainer::{train_with_progress, EpochStats, TrainHistory};

/// Per-component seeds split from the master seed.
pub fn model_init_seed(master: u64) -> u64 {
    derive_seed(master, "model/init")
}

pub fn train_seed(master: u64) -> u64 {
    derive_seed(master, "train")
}

pub fn attack_seed(master: u64, term: &str, budget: Budget) -> u64 {
    derive_seed(master, &format!("attack/{term}/{}", budget.label()))
}

pub fn provenance(config: &PipelineConfig) -> Provenance {
    Provenance {
        config_hash: config.config_hash(),
        seed: config.seed,
    }
}

pub fn generate_corpus(config: &PipelineConfig) -> Result<Corpus> {
    build_corpus(config.seed, &config.data)
}

pub fn manifest(config: &PipelineConfig, corpus: &Corpus) -> String {
    manifest_string(&corpus.split, config.config_hash(), config.seed)
}

/// Rejects files produced under a different configuration or seed.
pub fn check_provenance(what: &str, found: Provenance, config: &PipelineConfig) -> Result<()> {
    let expected = provenance(config);
    if found != expected {
        return Err(Error::MixedProvenance(vec![format!(
            "{what} has config_hash={:016x} seed={}, run expects config_hash={:016x} seed={}",
            found.config_hash, found.seed, expected.config_hash, expected.seed
        )]));
    }
    Ok(())
}

/// Reads a manifest and pairs it with the configured vocabulary.
pub fn load_corpus(config: &PipelineConfig, path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or("");
    let (config_hash, seed) = crate::eval::parse_provenance(header)
        .ok_or_else(|| Error::Malformed("manifest lacks a provenance line".into()))?;
    check_provenance("manifest", Provenance { config_hash, seed }, config)?;
    let split = parse_manifest(&text)?;
    Ok(Corpus {
        split,
        vocab: corpus_vocabulary(&config.data)?,
    })
}

pub fn train_model(
    config: &PipelineConfig,
    corpus: &Corpus,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(CaptionModel, TrainHistory)> {
    let model_config = config.model.model_config(corpus.vocab.len());
    let mut model = CaptionModel::new(model_config, corpus.vocab.clone(), model_init_seed(config.seed))?;
    model.provenance = provenance(config);
    let train = crate::trainer::TrainConfig {
        seed: train_seed(config.seed),
        ..config.train.clone()
    };
    train_with_progress(model, &corpus.split.train, &corpus.split.validation, &train, on_epoch)
}

pub fn images(samples: &[Sample]) -> Vec<Tensor> {
    samples.iter().map(Sample::image).collect()
}

/// One universal attack against `term` under `budget`.
pub fn attack(
    config: &PipelineConfig,
    model: &CaptionModel,
    corpus: &Corpus,
    term: &str,
    budget: Budget,
) -> Result<AttackRun> {
    let prompt = build_target_prompt(term, &model.vocab)?;
    let mut attack_config = config.attack.sweep.for_budget(budget);
    attack_config.seed = attack_seed(config.seed, &prompt.term, budget);
    attack_config.criterion = config.eval.criterion;
    let refs = images(&corpus.split.attack_ref);
    let validation = images(&corpus.split.validation);
    let mut run = run_captionfool(model, &refs, &validation, &prompt, &attack_config)?;
    run.artifact.config_hash = config.config_hash();
    run.artifact.seed = config.seed;
    Ok(run)
}

fn budget_of(artifact: &AttackArtifact) -> Budget {
    match artifact.mode() {
        crate::attack::AttackMode::Patch => Budget::Patches(artifact.mask.popcount()),
        crate::attack::AttackMode::Sparse => Budget::SparsePixels(artifact.mask.popcount()),
    }
}

/// Validation and test rows for each artifact, in input order.
pub fn evaluate(
    config: &PipelineConfig,
    model: &CaptionModel,
    corpus: &Corpus,
    artifacts: &[AttackArtifact],
) -> Result<EvalReport> {
    let mut report = EvalReport::new(config.config_hash(), config.seed);
    let splits = [
        (SplitName::Validation, images(&corpus.split.validation)),
        (SplitName::Test, images(&corpus.split.test)),
    ];
    for artifact in artifacts {
        check_provenance(
            "artifact",
            Provenance {
                config_hash: artifact.config_hash,
                seed: artifact.seed,
            },
            config,
        )?;
        for (split, imgs) in &splits {
            let e = evaluate_artifact(model, artifact, imgs, config.eval.criterion)?;
            report.rows.push(ReportRow {
                term: artifact.target_term.clone(),
                budget: budget_of(artifact),
                split: *split,
                successes: e.success_count(),
                n: imgs.len(),
            });
        }
    }
    Ok(report)
}

/// Runs every configured `(target, budget)` attack and evaluates it.
pub fn sweep(
    config: &PipelineConfig,
    model: &CaptionModel,
    corpus: &Corpus,
    mut on_run: impl FnMut(&AttackRun),
) -> Result<(EvalReport, Vec<AttackRun>)> {
    let mut runs = Vec::new();
    for term in &config.attack.targets {
        for &budget in &config.attack.budgets {
            let run = attack(config, model, corpus, term, budget)?;
            on_run(&run);
            runs.push(run);
        }
    }
    let artifacts: Vec<AttackArtifact> = runs.iter().map(|r| r.artifact.clone()).collect();
    Ok((evaluate(config, model, corpus, &artifacts)?, runs))
}

/// Test-split captions that realize each artifact's target term, checked
/// against `filter`.
pub fn filter_eval(
    config: &PipelineConfig,
    model: &CaptionModel,
    corpus: &Corpus,
    artifacts: &[AttackArtifact],
    filter: &BlocklistFilter,
) -> Result<FilterSummary> {
    let test = images(&corpus.split.test);
    let mut captions = Vec::new();
    for artifact in artifacts {
        let e = evaluate_artifact(model, artifact, &test, config.eval.criterion)?;
        captions.extend(
            e.captions
                .into_iter()
                .filter(|c| is_success(c, &artifact.target_term, crate::eval::SuccessCriterion::Containment))
                .map(|c| (artifact.target_term.clone(), c)),
        );
    }
    Ok(filter_check(&captions, filter))
}

pub fn render_filter_summary(config: &PipelineConfig, summary: &FilterSummary) -> String {
    let mut out = provenance_line(config.config_hash(), config.seed);
    out.push_str("\nterm,blocked,total,block_rate\n");
    for r in &summary.per_term {
        let rate = if r.total == 0 {
            "-".to_string()
        } else {
            crate::eval::format_asr(r.rate())
        };
        out.push_str(&format!("{},{},{},{}\n", r.target_term, r.blocked, r.total, rate));
    }
    out
}

/// Renders CSV reports as per-split grids; inputs must share one
/// provenance unless `force` is set.
pub fn render_reports(texts: &[String], force: bool) -> Result<String> {
    let parsed = texts.iter().map(|t| parse_csv_report(t)).collect::<Result<Vec<_>>>()?;
    let first = parsed
        .first()
        .ok_or_else(|| Error::invalid("report needs at least one input"))?;
    let mismatched: Vec<String> = parsed
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.config_hash, p.seed) != (first.config_hash, first.seed))
        .map(|(i, p)| format!("input {} has config_hash={:016x} seed={}", i + 1, p.config_hash, p.seed))
        .collect();
    if !mismatched.is_empty() && !force {
        return Err(Error::MixedProvenance(mismatched));
    }
    let rows: Vec<_> = parsed.iter().flat_map(|p| p.rows.iter().cloned()).collect();
    let mut out = provenance_line(first.config_hash, first.seed);
    out.push('\n');
    for split in [SplitName::Validation, SplitName::Test] {
        if rows.iter().any(|r| r.split == split) {
            out.push('\n');
            out.push_str(&render_grid(&rows, split));
        }
    }
    Ok(out)
}
