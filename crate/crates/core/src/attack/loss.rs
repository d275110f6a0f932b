use crate::captioner::{AttentionTrace, Encoded, Session, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

use super::config::GradientCombine;

/// Caption the attack steers toward: `[BOS] a picture of a {term} [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetPrompt {
    pub term: String,
    pub tokens: Vec<usize>,
}

impl TargetPrompt {
    pub fn text(&self) -> String {
        format!("a picture of a {}", self.term)
    }
}

pub fn build_target_prompt(term: &str, vocab: &Vocabulary) -> Result<TargetPrompt> {
    let term = term.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if term.is_empty() {
        return Err(Error::invalid("empty target term"));
    }
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode_strict(&format!("a picture of a {term}"))?);
    tokens.push(EOS);
    Ok(TargetPrompt { term, tokens })
}

fn check_layers(available: usize, k: usize) -> Result<()> {
    if k > available {
        return Err(Error::invalid(format!(
            "attention loss over {k} layers exceeds encoder depth {available}"
        )));
    }
    Ok(())
}

/// `-sum_{l < k} mean_{h, i} sum_{j in patches} A_l[h, i, j + 1]`.
pub fn attention_loss(trace: &AttentionTrace, patches: &[usize], k: usize) -> Result<f64> {
    check_layers(trace.num_layers(), k)?;
    let mut total = 0.0;
    for a in &trace.layers[..k] {
        let (heads, t) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let mut mass = 0.0;
        for row in d.chunks_exact(t) {
            for &j in patches {
                mass += row[j + 1];
            }
        }
        total += mass / (heads * t) as f64;
    }
    Ok(-total)
}

/// Differentiable counterpart of [`attention_loss`] over a live encoder pass.
pub fn attention_loss_var(graph: &mut Graph, enc: &Encoded, patches: &[usize], k: usize) -> Result<Option<Var>> {
    check_layers(enc.attention.len(), k)?;
    if patches.is_empty() || k == 0 {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(k);
    for heads in &enc.attention[..k] {
        let t = graph.shape(heads[0])[0];
        let index: Vec<usize> = (0..t)
            .flat_map(|i| patches.iter().map(move |&j| i * t + j + 1))
            .collect();
        let mut picked = Vec::with_capacity(heads.len());
        for &h in heads {
            picked.push(graph.gather(h, &index, &[t, patches.len()])?);
        }
        let stacked = graph.concat_rows(&picked)?;
        let mass = graph.sum(stacked);
        terms.push(graph.scale(mass, -1.0 / (heads.len() * t) as f64));
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = graph.add(total, term)?;
    }
    Ok(Some(total))
}

/// Merges LM and attention gradients.
pub fn combine_gradients(g_lm: &[f64], g_att: &[f64], alpha: f64, mode: GradientCombine) -> Result<Vec<f64>> {
    if g_lm.len() != g_att.len() {
        return Err(Error::shape("combine_gradients", &[g_lm.len()], &[g_att.len()]));
    }
    let lm_weight = loss_weights(alpha, mode).0;
    Ok(g_lm.iter().zip(g_att).map(|(l, a)| lm_weight * l + alpha * a).collect())
}

/// `(lm, attention)` coefficients of the combined objective.
pub fn loss_weights(alpha: f64, mode: GradientCombine) -> (f64, f64) {
    match mode {
        GradientCombine::Additive => (1.0, alpha),
        GradientCombine::Convex => (1.0 - alpha, alpha),
    }
}

/// `clip(x + delta * mask, 0, 1)`.
pub fn apply_perturbation(image: &Tensor, delta: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if image.shape() != delta.shape() || image.shape() != mask.shape() {
        return Err(Error::shape("apply_perturbation", image.shape(), delta.shape()));
    }
    let (x, d, m) = (image.data(), delta.data(), mask.data());
    Ok(Tensor::from_fn(image.shape(), |i| (x[i] + d[i] * m[i]).clamp(0.0, 1.0)))
}

/// Graph form of [`apply_perturbation`]; the clip passes gradient only
/// inside `[0, 1]`.
pub fn apply_perturbation_var(session: &mut Session<'_>, image: &Tensor, delta: Var, mask: &Tensor) -> Result<Var> {
    let g = &mut session.graph;
    let m = g.constant(mask.clone());
    let x = g.constant(image.clone());
    let dm = g.mul(delta, m)?;
    let sum = g.add(x, dm)?;
    Ok(g.clamp(sum, 0.0, 1.0))
}
