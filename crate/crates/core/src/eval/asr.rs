use crate::attack::{build_target_prompt, run_captionfool, AttackArtifact, AttackConfig, AttackRun, Budget};
use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::synthdata::SplitName;

use super::criterion::{is_success, SuccessCriterion};
use super::report::{CaptionSample, EvalReport, ReportRow};

/// Per-image outcome of applying an artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactEval {
    pub captions: Vec<String>,
    pub successes: Vec<bool>,
}

impl ArtifactEval {
    pub fn success_count(&self) -> usize {
        self.successes.iter().filter(|&&s| s).count()
    }

    pub fn asr(&self) -> f64 {
        self.success_count() as f64 / self.successes.len() as f64
    }
}

/// Greedy captions of every image under the artifact's perturbation.
pub fn evaluate_artifact(
    model: &CaptionModel,
    artifact: &AttackArtifact,
    images: &[Tensor],
    criterion: SuccessCriterion,
) -> Result<ArtifactEval> {
    if images.is_empty() {
        return Err(Error::invalid("cannot compute a success rate over zero images"));
    }
    let mask = artifact.mask_tensor();
    let mut captions = Vec::with_capacity(images.len());
    let mut successes = Vec::with_capacity(images.len());
    for img in images {
        let x = crate::attack::apply_perturbation(img, &artifact.delta, &mask)?;
        let caption = model.caption(&x)?;
        successes.push(is_success(&caption, &artifact.target_term, criterion));
        captions.push(caption);
    }
    Ok(ArtifactEval { captions, successes })
}

pub fn compute_asr(
    model: &CaptionModel,
    artifact: &AttackArtifact,
    images: &[Tensor],
    criterion: SuccessCriterion,
) -> Result<f64> {
    Ok(evaluate_artifact(model, artifact, images, criterion)?.asr())
}

/// Per-mode templates; a sweep cell swaps in its budget.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub patch: AttackConfig,
    pub sparse: AttackConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            patch: AttackConfig::patch(7),
            sparse: AttackConfig::sparse(1434),
        }
    }
}

impl SweepConfig {
    pub fn for_budget(&self, budget: Budget) -> AttackConfig {
        let template = match budget {
            Budget::Patches(_) => &self.patch,
            Budget::SparsePixels(_) => &self.sparse,
        };
        AttackConfig {
            budget,
            ..template.clone()
        }
    }
}

/// Images of the splits a sweep needs.
pub struct SweepData<'a> {
    pub refs: &'a [Tensor],
    pub validation: &'a [Tensor],
    pub test: &'a [Tensor],
}

/// One attack per `(target, budget)` cell, scored on validation and test.
pub fn sweep(
    model: &CaptionModel,
    data: &SweepData<'_>,
    targets: &[&str],
    budgets: &[Budget],
    config: &SweepConfig,
    mut on_run: impl FnMut(&AttackRun),
) -> Result<(EvalReport, Vec<AttackRun>)> {
    let mut report = EvalReport::new(model.provenance.config_hash, model.provenance.seed);
    let mut runs = Vec::with_capacity(targets.len() * budgets.len());
    for &term in targets {
        let prompt = build_target_prompt(term, &model.vocab)?;
        for &budget in budgets {
            let cfg = config.for_budget(budget);
            let run = run_captionfool(model, data.refs, data.validation, &prompt, &cfg)?;
            for (split, images) in [(SplitName::Validation, data.validation), (SplitName::Test, data.test)] {
                let e = evaluate_artifact(model, &run.artifact, images, cfg.criterion)?;
                report.rows.push(ReportRow {
                    term: prompt.term.clone(),
                    budget,
                    split,
                    successes: e.success_count(),
                    n: images.len(),
                });
                if split == SplitName::Test {
                    report.samples.extend(e.captions.iter().take(3).map(|c| CaptionSample {
                        term: prompt.term.clone(),
                        budget,
                        caption: c.clone(),
                    }));
                }
            }
            on_run(&run);
            runs.push(run);
        }
    }
    Ok((report, runs))
}
