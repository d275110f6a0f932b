use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::eval::is_success;
use crate::numeric::{adam_step, AdamState, Tensor};
use crate::seeds::derive_seed;

use super::artifact::AttackArtifact;
use super::config::{AttackConfig, Budget};
use super::loss::{apply_perturbation, apply_perturbation_var, attention_loss_var, loss_weights, TargetPrompt};
use super::mask::{sparse_project_topk, Mask};
use super::selection::select_universal_patches;

/// Record of one validation check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    /// Optimizer steps taken before the check.
    pub iteration: usize,
    pub lr: f64,
    /// Mean target LM loss of the most recent minibatch (`NaN` before any step).
    pub batch_lm_loss: f64,
    pub batch_attention_loss: f64,
    pub validation_asr: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub artifact: AttackArtifact,
    pub checks: Vec<CheckRecord>,
    /// Patches chosen by attention importance (patch mode only).
    pub selected_patches: Vec<usize>,
    /// Mean target LM loss over the reference set at the initial and the
    /// retained perturbation.
    pub reference_loss_initial: f64,
    pub reference_loss_best: f64,
    pub stopped_early: bool,
}

/// Greedy-caption success count and mean target loss of perturbed images.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedEval {
    pub successes: usize,
    pub n: usize,
    pub mean_target_loss: f64,
    pub captions: Vec<String>,
}

impl PerturbedEval {
    pub fn asr(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

/// Captions every image under `clip(x + delta * mask, 0, 1)` and scores
/// both the success predicate and the target LM loss.
pub fn evaluate_perturbed(
    model: &CaptionModel,
    images: &[Tensor],
    delta: &Tensor,
    mask: &Tensor,
    target: &TargetPrompt,
    criterion: crate::eval::SuccessCriterion,
) -> Result<PerturbedEval> {
    if images.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    let mut successes = 0;
    let mut loss_sum = 0.0;
    let mut captions = Vec::with_capacity(images.len());
    for img in images {
        let x = apply_perturbation(img, delta, mask)?;
        let mut s = model.session(false);
        let xv = s.image(&x, false)?;
        let enc = s.encode(xv)?;
        let memory = s.memory(enc.features)?;
        let tokens = s.greedy(&memory)?;
        let loss = s.caption_loss(&memory, &target.tokens)?;
        loss_sum += s.graph.value(loss).item();
        let caption = model.vocab.decode(&tokens);
        if is_success(&caption, &target.term, criterion) {
            successes += 1;
        }
        captions.push(caption);
    }
    Ok(PerturbedEval {
        successes,
        n: images.len(),
        mean_target_loss: loss_sum / images.len() as f64,
        captions,
    })
}

fn mean_target_loss(
    model: &CaptionModel,
    images: &[Tensor],
    delta: &Tensor,
    mask: &Tensor,
    target: &TargetPrompt,
) -> Result<f64> {
    let mut sum = 0.0;
    for img in images {
        sum += model.lm_loss(&apply_perturbation(img, delta, mask)?, &target.tokens)?;
    }
    Ok(sum / images.len() as f64)
}

struct Step {
    gradient: Vec<f64>,
    lm_loss: f64,
    attention_loss: f64,
}

/// Mean combined objective gradient wrt `delta` over `batch`.
fn batch_gradient(
    model: &CaptionModel,
    batch: &[&Tensor],
    delta: &Tensor,
    mask: &Tensor,
    attention_patches: &[usize],
    target: &TargetPrompt,
    config: &AttackConfig,
    iteration: usize,
) -> Result<Step> {
    let (w_lm, w_att) = loss_weights(config.alpha, config.combine);
    let scale = 1.0 / batch.len() as f64;
    let mut gradient = vec![0.0; delta.numel()];
    let (mut lm_sum, mut att_sum) = (0.0, 0.0);
    for img in batch {
        let mut s = model.session(false);
        let d = s.graph.leaf(delta.clone(), true);
        let x = apply_perturbation_var(&mut s, img, d, mask)?;
        let (lm, enc) = s.lm_loss(x, &target.tokens)?;
        let att = attention_loss_var(&mut s.graph, &enc, attention_patches, config.atten_loss_layers)?;
        let lm_value = s.graph.value(lm).item();
        let att_value = att.map_or(0.0, |a| s.graph.value(a).item());
        if !lm_value.is_finite() || !att_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                detail: format!("lm loss {lm_value}, attention loss {att_value}"),
            });
        }
        lm_sum += lm_value;
        att_sum += att_value;
        // By linearity this yields w_lm * g_lm + w_att * g_att in one sweep.
        let mut total = s.graph.scale(lm, w_lm * scale);
        if let Some(a) = att {
            let a = s.graph.scale(a, w_att * scale);
            total = s.graph.add(total, a)?;
        }
        s.graph.backward(total)?;
        for (acc, g) in gradient.iter_mut().zip(s.graph.grad(d).expect("delta is a grad leaf")) {
            *acc += g;
        }
    }
    Ok(Step {
        gradient,
        lm_loss: lm_sum * scale,
        attention_loss: att_sum * scale,
    })
}

/// Universal attack: one `(delta, mask)` optimized over `refs` toward
/// `target`, with early stopping on `validation` success rate.
pub fn run_captionfool(
    model: &CaptionModel,
    refs: &[Tensor],
    validation: &[Tensor],
    target: &TargetPrompt,
    config: &AttackConfig,
) -> Result<AttackRun> {
    let mc = &model.config;
    config.validate(mc)?;
    if refs.is_empty() {
        return Err(Error::invalid("attack needs at least one reference image"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("attack needs a non-empty validation set"));
    }
    for img in refs.iter().chain(validation) {
        if img.shape() != mc.image_shape() {
            return Err(Error::shape("attack image", img.shape(), &mc.image_shape()));
        }
    }
    let schedule = config.schedule()?;
    let (lo, hi) = config.clamp;
    let (c, h, w) = (mc.channels, mc.image_size, mc.image_size);

    let (mask, selected_patches) = match config.budget {
        Budget::Patches(n) => {
            let traces = refs
                .iter()
                .map(|img| Ok(model.encode(img)?.1))
                .collect::<Result<Vec<_>>>()?;
            let patches = select_universal_patches(&traces, n, config.selection_layer)?;
            (Mask::from_patches(mc, &patches)?, patches)
        }
        Budget::SparsePixels(_) => (Mask::full_pixels(h, w), Vec::new()),
    };
    let mask_t = mask.expand(c);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "attack/init"));
    let m = mask_t.data();
    let init: Vec<f64> = (0..c * h * w)
        .map(|i| {
            let v = rng.random_range(-config.init_scale..=config.init_scale);
            (v * m[i]).clamp(lo, hi)
        })
        .collect();
    let mut delta = Tensor::new(&[c, h, w], init)?;

    // Sparse iterates are judged and emitted only after projection.
    let project = |delta: &Tensor| -> Result<(Tensor, Mask)> {
        match config.budget {
            Budget::SparsePixels(k) => sparse_project_topk(delta, k),
            Budget::Patches(_) => unreachable!("projection is sparse-only"),
        }
    };
    let emitted = |delta: &Tensor, mask: &Mask| -> Result<(Tensor, Mask)> {
        match config.budget {
            Budget::Patches(_) => Ok((delta.clone(), mask.clone())),
            Budget::SparsePixels(_) => project(delta),
        }
    };

    let batch_size = config.batch.min(refs.len());
    let mut adam = AdamState::new(delta.numel());
    let mut checks = Vec::new();
    let mut last = (f64::NAN, f64::NAN);
    let mut best: Option<(Tensor, Mask, f64, f64)> = None;
    let mut stagnant = 0;
    let mut stopped_early = false;
    let mut iterations_run = 0;

    let mut check = |iteration: usize,
                     delta: &Tensor,
                     mask: &Mask,
                     last: (f64, f64),
                     best: &mut Option<(Tensor, Mask, f64, f64)>,
                     stagnant: &mut usize|
     -> Result<()> {
        let (d, m) = emitted(delta, mask)?;
        let mt = m.expand(c);
        let e = evaluate_perturbed(model, validation, &d, &mt, target, config.criterion)?;
        let (asr, loss) = (e.asr(), e.mean_target_loss);
        checks.push(CheckRecord {
            iteration,
            lr: schedule.lr_at(iteration as u64),
            batch_lm_loss: last.0,
            batch_attention_loss: last.1,
            validation_asr: asr,
            validation_loss: loss,
        });
        match best {
            // Stagnant means the check did not displace the best iterate.
            Some((_, _, best_asr, best_loss)) => {
                if asr > *best_asr || (asr == *best_asr && loss < *best_loss) {
                    *best = Some((d, m, asr, loss));
                    *stagnant = 0;
                } else {
                    *stagnant += 1;
                }
            }
            None => *best = Some((d, m, asr, loss)),
        }
        Ok(())
    };

    let initial = emitted(&delta, &mask)?;
    check(0, &delta, &mask, last, &mut best, &mut stagnant)?;
    for t in 0..config.iterations {
        if stagnant >= config.patience || best.as_ref().is_some_and(|b| b.2 >= 1.0) {
            stopped_early = true;
            break;
        }
        let batch: Vec<&Tensor> = (0..batch_size)
            .map(|i| &refs[(t * batch_size + i) % refs.len()])
            .collect();
        let attention_patches = mask.covering_patches(mc.patch_size);
        let step = batch_gradient(model, &batch, &delta, &mask_t, &attention_patches, target, config, t)?;
        last = (step.lm_loss, step.attention_loss);
        let mut values = delta.to_vec();
        adam_step(&mut values, &step.gradient, &mut adam, schedule.lr_at(t as u64))?;
        let mt = mask_t.data();
        for (v, m) in values.iter_mut().zip(mt) {
            *v = (*v * m).clamp(lo, hi);
        }
        delta = Tensor::new(&[c, h, w], values)?;
        iterations_run = t + 1;
        if matches!(config.budget, Budget::SparsePixels(_)) && iterations_run % config.project_every == 0 {
            // Hard thresholding, then full support again until the next projection.
            delta = project(&delta)?.0;
        }
        if iterations_run % config.eval_every == 0 || iterations_run == config.iterations {
            check(iterations_run, &delta, &mask, last, &mut best, &mut stagnant)?;
        }
    }
    let (best_delta, best_mask, best_asr, _) = best.expect("initial check always runs");
    let reference_loss_initial = mean_target_loss(model, refs, &initial.0, &initial.1.expand(c), target)?;
    let reference_loss_best = mean_target_loss(model, refs, &best_delta, &best_mask.expand(c), target)?;
    let artifact = AttackArtifact {
        delta: best_delta,
        mask: best_mask,
        target_term: target.term.clone(),
        target_tokens: target.tokens.clone(),
        config_hash: config.fingerprint(),
        seed: config.seed,
        best_validation_asr: best_asr,
        iterations_run,
    };
    Ok(AttackRun {
        artifact,
        checks,
        selected_patches,
        reference_loss_initial,
        reference_loss_best,
        stopped_early,
    })
}
