//! Central finite-difference oracle for the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub(crate) const FD_STEP: f64 = 1e-5;
pub(crate) const TOLERANCE: f64 = 1e-6;

/// Builds a scalar loss from input leaves.
pub(crate) type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn loss_at(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.value(loss).item()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub(crate) fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst normwise error over the listed inputs between autodiff and
/// central differences of the scalar `build`.
pub(crate) fn check(inputs: &[Tensor], wrt: &[usize], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for &i in wrt {
        let autodiff = g.grad_tensor(vars[i]).to_vec();
        let mut numeric = vec![0.0; autodiff.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let probe = |delta: f64| {
                let mut moved = inputs.to_vec();
                let mut data = moved[i].to_vec();
                data[j] += delta;
                moved[i] = Tensor::new(inputs[i].shape(), data).expect("same shape");
                loss_at(&moved, build)
            };
            *slot = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(normwise_error(&autodiff, &numeric));
    }
    worst
}

/// Reduces `y` to a scalar through fixed random weights so that no
/// output coordinate is special.
pub(crate) fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub(crate) fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEEDS: u64 = 20;

    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        )
    }

    fn assert_all_seeds(name: &str, case: impl Fn(&mut ChaCha8Rng, u64) -> f64) {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = case(&mut rng, seed);
            assert!(err < TOLERANCE, "{name}, seed {seed}: relative error {err:e}");
        }
    }

    #[test]
    fn elementwise_binary() {
        assert_all_seeds("add/sub/mul", |rng, seed| {
            let (m, n, _) = dims(rng);
            let inputs = [random(rng, &[m, n]), random(rng, &[m, n])];
            check(&inputs, &[0, 1], &|g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(a, v[1])?;
                let s = g.scale(s, -0.7);
                let p = g.mul(s, v[1])?;
                let p = g.mul(p, v[0])?;
                project(g, p, seed)
            })
        });
    }

    #[test]
    fn matmul_and_transpose() {
        assert_all_seeds("matmul", |rng, seed| {
            let (m, k, n) = dims(rng);
            let inputs = [random(rng, &[m, k]), random(rng, &[n, k])];
            check(&inputs, &[0, 1], &|g, v| {
                let bt = g.transpose(v[1])?;
                let y = g.matmul(v[0], bt)?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn add_row_and_reshape() {
        assert_all_seeds("add_row", |rng, seed| {
            let (m, n, _) = dims(rng);
            let inputs = [random(rng, &[m, n]), random(rng, &[n])];
            check(&inputs, &[0, 1], &|g, v| {
                let y = g.add_row(v[0], v[1])?;
                let y = g.reshape(y, &[n * m])?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn softmax_rows() {
        assert_all_seeds("softmax", |rng, seed| {
            let (m, n, _) = dims(rng);
            let inputs = [random(rng, &[m, n])];
            check(&inputs, &[0], &|g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn layer_norm_all_inputs() {
        assert_all_seeds("layer_norm", |rng, seed| {
            let (m, n, _) = dims(rng);
            // Width 2 normalizes to +-1 whatever the input, leaving a vanishing gradient.
            let n = n.max(3);
            let inputs = [random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])];
            check(&inputs, &[0, 1, 2], &|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn gelu() {
        assert_all_seeds("gelu", |rng, seed| {
            let (m, n, _) = dims(rng);
            let inputs = [random(rng, &[m, n])];
            check(&inputs, &[0], &|g, v| {
                let y = g.gelu(v[0]);
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn embedding_with_repeats() {
        assert_all_seeds("embedding", |rng, seed| {
            let (rows, d, len) = dims(rng);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..rows)).collect();
            let inputs = [random(rng, &[rows, d])];
            check(&inputs, &[0], &|g, v| {
                let y = g.embedding(v[0], &ids)?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn add_const_sum_mean() {
        assert_all_seeds("add_const/sum/mean", |rng, _| {
            let (m, n, _) = dims(rng);
            let bias = random(rng, &[m, n]);
            let inputs = [random(rng, &[m, n])];
            check(&inputs, &[0], &|g, v| {
                let y = g.add_const(v[0], &bias)?;
                let sq = g.mul(y, y)?;
                let s = g.sum(sq);
                let mu = g.mean(y);
                let mu = g.scale(mu, 3.0);
                g.add(s, mu)
            })
        });
    }

    #[test]
    fn concat_and_slice() {
        assert_all_seeds("concat/slice", |rng, seed| {
            let (m, n, k) = dims(rng);
            let inputs = [random(rng, &[m, n]), random(rng, &[k, n]), random(rng, &[m, k])];
            check(&inputs, &[0, 1, 2], &|g, v| {
                let rows = g.concat_rows(&[v[0], v[1]])?;
                let cols = g.concat_cols(&[v[0], v[2]])?;
                let width = 1 + seed as usize % (n + k);
                let part = g.slice_cols(cols, (n + k) - width, width)?;
                let a = project(g, rows, seed)?;
                let b = project(g, part, seed + 1)?;
                g.add(a, b)
            })
        });
    }

    #[test]
    fn gather_arbitrary_index() {
        assert_all_seeds("gather", |rng, seed| {
            let (m, n, k) = dims(rng);
            let index: Vec<usize> = (0..k * 2).map(|_| rng.random_range(0..m * n)).collect();
            let inputs = [random(rng, &[m, n])];
            check(&inputs, &[0], &|g, v| {
                let y = g.gather(v[0], &index, &[k, 2])?;
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn clamp_away_from_bounds() {
        assert_all_seeds("clamp", |rng, seed| {
            let (m, n, _) = dims(rng);
            // Keep every entry at least 1e-3 from the kinks at +-0.5.
            let x = Tensor::from_fn(&[m, n], |_| {
                let v: f64 = rng.random_range(-1.5..1.5);
                if (v.abs() - 0.5).abs() < 1e-3 {
                    v + 1e-2
                } else {
                    v
                }
            });
            check(&[x], &[0], &|g, v| {
                let y = g.clamp(v[0], -0.5, 0.5);
                project(g, y, seed)
            })
        });
    }

    #[test]
    fn cross_entropy_plain_and_smoothed() {
        assert_all_seeds("cross_entropy", |rng, _| {
            let (t, vocab, _) = dims(rng);
            let vocab = vocab.max(3);
            let ignore = vocab;
            let mut targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
            if t > 1 {
                targets[0] = ignore;
            }
            let inputs = [random(rng, &[t, vocab])];
            let mut blocked = Tensor::zeros(&[t, vocab]).to_vec();
            for r in 0..t {
                let k = (targets[r] % vocab + 1) % vocab;
                blocked[r * vocab + k] = f64::NEG_INFINITY;
            }
            let blocked = Tensor::new(&[t, vocab], blocked).unwrap();
            let plain = check(&inputs, &[0], &|g, v| g.cross_entropy(v[0], &targets, ignore));
            let smoothed = check(&inputs, &[0], &|g, v| {
                let z = g.add_const(v[0], &blocked)?;
                g.cross_entropy_smoothed(z, &targets, ignore, 0.1)
            });
            plain.max(smoothed)
        });
    }

    #[test]
    fn smoothed_cross_entropy_value() {
        // Uniform logits over 4 classes with one excluded: every live class has p = 1/3.
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, f64::NEG_INFINITY, 0.0]).unwrap());
        let l = g.cross_entropy_smoothed(z, &[1], 99, 0.2).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy_smoothed(z, &[1], 99, 1.0).is_err());
    }

    #[test]
    fn oracle_detects_a_wrong_gradient() {
        let a = [1.0, 2.0, 3.0];
        assert!(normwise_error(&a, &[1.0, 2.0, 3.1]) > TOLERANCE);
        assert_eq!(normwise_error(&[0.0; 3], &[0.0; 3]), 0.0);
    }
}
