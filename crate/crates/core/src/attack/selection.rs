use crate::captioner::AttentionTrace;
use crate::error::{Error, Result};

/// Mean attention each patch column receives at `layer`, over every head
/// and query token. Entry `j` reads column `j + 1`; CLS is not a candidate.
pub fn patch_importance(trace: &AttentionTrace, layer: usize) -> Result<Vec<f64>> {
    let a = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} outside 0..{}", trace.num_layers())))?;
    let (heads, t) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut importance = vec![0.0; t - 1];
    for h in 0..heads {
        for i in 0..t {
            let row = &d[(h * t + i) * t..(h * t + i + 1) * t];
            for (acc, &v) in importance.iter_mut().zip(&row[1..]) {
                *acc += v;
            }
        }
    }
    let denom = (heads * t) as f64;
    importance.iter_mut().for_each(|v| *v /= denom);
    Ok(importance)
}

/// Indices of the `n` largest entries, ties toward the lower index.
pub fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Universal patch set: each image votes for its own top-`n` patches; the
/// `n` most voted win, ties toward higher mean importance and then lower
/// index. Returned sorted ascending.
pub fn select_universal_patches(traces: &[AttentionTrace], n: usize, layer: usize) -> Result<Vec<usize>> {
    let per_image = traces
        .iter()
        .map(|t| patch_importance(t, layer))
        .collect::<Result<Vec<_>>>()?;
    select_from_importance(&per_image, n)
}

pub fn select_from_importance(per_image: &[Vec<f64>], n: usize) -> Result<Vec<usize>> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::invalid("patch selection needs at least one trace"))?;
    let p = first.len();
    if n > p {
        return Err(Error::invalid(format!("cannot select {n} of {p} patches")));
    }
    if per_image.iter().any(|v| v.len() != p) {
        return Err(Error::invalid("traces disagree on patch count"));
    }
    let mut votes = vec![0usize; p];
    for imp in per_image {
        for j in top_n(imp, n) {
            votes[j] += 1;
        }
    }
    // Summing sorted values keeps the mean independent of batch order.
    let mean: Vec<f64> = (0..p)
        .map(|j| {
            let mut col: Vec<f64> = per_image.iter().map(|v| v[j]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / per_image.len() as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        votes[b]
            .cmp(&votes[a])
            .then(mean[b].total_cmp(&mean[a]))
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order.sort_unstable();
    Ok(order)
}
