//! Distribution parameters and eager (off-tape) distribution math used by
//! inference paths and tests. The training graphs use the fused tape ops.

use rand::Rng;

use super::layers::Tensor;
use super::tape::{kl_chunk_f32, sample_categorical, sigmoid_f32, softmax_chunk_f32};
use super::NnError;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Parameters of one of the three distribution families the models emit.
#[derive(Debug, Clone)]
pub enum DistParams {
    /// `logits` is (rows, groups*classes); softmax applies per class chunk.
    CategoricalGroups { logits: Tensor, classes: usize },
    /// Diagonal Gaussian; `log_std` may be a scalar broadcast or match `mean`.
    DiagGaussian { mean: Tensor, log_std: Tensor },
    Bernoulli { logit: Tensor },
}

impl DistParams {
    pub fn is_finite(&self) -> bool {
        match self {
            DistParams::CategoricalGroups { logits, .. } => logits.is_finite(),
            DistParams::DiagGaussian { mean, log_std } => {
                mean.is_finite() && log_std.is_finite()
            }
            DistParams::Bernoulli { logit } => logit.is_finite(),
        }
    }
}

/// Softmax probabilities over each contiguous chunk of `classes` entries.
pub fn softmax(logits: &[f32], classes: usize) -> Vec<f32> {
    assert!(classes > 0 && logits.len() % classes == 0);
    let mut out = vec![0.0f32; logits.len()];
    for s in (0..logits.len()).step_by(classes) {
        softmax_chunk_f32(&logits[s..s + classes], &mut out[s..s + classes]);
    }
    out
}

/// KL(p || q) between grouped categoricals given by logits, summed over
/// groups: sum over groups of sum_j p_j log(p_j / q_j). Non-negative.
pub fn kl_categorical(p: &DistParams, q: &DistParams) -> Result<f32, NnError> {
    let (pl, pc) = match p {
        DistParams::CategoricalGroups { logits, classes } => (logits, *classes),
        _ => {
            return Err(NnError::ShapeMismatch {
                context: "kl_categorical".into(),
                expected: "categorical".into(),
                got: "other family".into(),
            })
        }
    };
    let (ql, qc) = match q {
        DistParams::CategoricalGroups { logits, classes } => (logits, *classes),
        _ => {
            return Err(NnError::ShapeMismatch {
                context: "kl_categorical".into(),
                expected: "categorical".into(),
                got: "other family".into(),
            })
        }
    };
    if pc != qc || pl.rows != ql.rows || pl.cols != ql.cols {
        return Err(NnError::ShapeMismatch {
            context: "kl_categorical".into(),
            expected: format!("{}x{} classes {}", pl.rows, pl.cols, pc),
            got: format!("{}x{} classes {}", ql.rows, ql.cols, qc),
        });
    }
    let mut total = 0.0f32;
    for s in (0..pl.len()).step_by(pc) {
        total += kl_chunk_f32(&pl.data[s..s + pc], &ql.data[s..s + pc]);
    }
    Ok(total)
}

/// Sum over elements of log N(x | mean, 1).
pub fn gaussian_logprob(x: &[f32], mean: &[f32]) -> Result<f32, NnError> {
    if x.len() != mean.len() {
        return Err(NnError::ShapeMismatch {
            context: "gaussian_logprob".into(),
            expected: format!("{} elements", mean.len()),
            got: format!("{} elements", x.len()),
        });
    }
    let s: f64 = x
        .iter()
        .zip(mean)
        .map(|(&xv, &m)| {
            let d = (xv - m) as f64;
            -0.5 * d * d - 0.5 * LN_2PI
        })
        .sum();
    Ok(s as f32)
}

/// One categorical sample per group, encoded one-hot. Gradient-free path
/// for collectors and evaluation; training uses `Tape::st_one_hot`.
pub fn sample_one_hot<R: Rng>(logits: &[f32], classes: usize, rng: &mut R) -> Vec<f32> {
    let probs = softmax(logits, classes);
    let mut out = vec![0.0f32; logits.len()];
    for s in (0..logits.len()).step_by(classes) {
        let idx = sample_categorical(&probs[s..s + classes], rng);
        out[s + idx] = 1.0;
    }
    out
}

/// Mode (argmax) per group, one-hot encoded.
pub fn mode_one_hot(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for s in (0..logits.len()).step_by(classes) {
        let chunk = &logits[s..s + classes];
        let mut best = 0usize;
        for j in 1..classes {
            if chunk[j] > chunk[best] {
                best = j;
            }
        }
        out[s + best] = 1.0;
    }
    out
}

pub fn bernoulli_prob(logit: f32) -> f32 {
    sigmoid_f32(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat(logits: Vec<f32>, classes: usize) -> DistParams {
        let cols = logits.len();
        DistParams::CategoricalGroups {
            logits: Tensor::from_vec(1, cols, logits),
            classes,
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = cat(vec![0.4, -0.3, 1.2, 0.0], 4);
        let q = cat(vec![0.4, -0.3, 1.2, 0.0], 4);
        assert!(kl_categorical(&p, &q).unwrap().abs() < 1e-7);
    }

    #[test]
    fn kl_peaked_vs_uniform_is_log4() {
        // logit gap 20 makes p effectively one-hot; KL to uniform over 4
        // classes approaches ln 4
        let p = cat(vec![20.0, 0.0, 0.0, 0.0], 4);
        let q = cat(vec![0.0, 0.0, 0.0, 0.0], 4);
        let kl = kl_categorical(&p, &q).unwrap();
        assert!((kl - 4.0f32.ln()).abs() < 1e-3, "kl {}", kl);
    }

    #[test]
    fn kl_nonnegative_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let pl: Vec<f32> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ql: Vec<f32> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let kl = kl_categorical(&cat(pl, 4), &cat(ql, 4)).unwrap();
            assert!(kl >= -1e-6, "kl {}", kl);
        }
    }

    #[test]
    fn kl_shape_mismatch_is_error() {
        let p = cat(vec![0.0; 4], 4);
        let q = cat(vec![0.0; 8], 4);
        assert!(kl_categorical(&p, &q).is_err());
    }

    #[test]
    fn gaussian_logprob_matches_summed_scalar_formula() {
        let x = [0.3f32, -1.1, 0.7];
        let mean = [0.1f32, -0.9, 1.0];
        let got = gaussian_logprob(&x, &mean).unwrap();
        let want: f32 = x
            .iter()
            .zip(&mean)
            .map(|(&xv, &m)| -0.5 * (xv - m) * (xv - m) - 0.5 * (2.0 * std::f32::consts::PI).ln())
            .sum();
        assert!((got - want).abs() < 1e-5);
    }

    #[test]
    fn mode_one_hot_picks_argmax_per_group() {
        let logits = [0.1f32, 2.0, -1.0, 5.0, 0.0, 0.0];
        let m = mode_one_hot(&logits, 3);
        assert_eq!(m, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sample_one_hot_is_one_hot_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        for _ in 0..50 {
            let z = sample_one_hot(&logits, 4, &mut rng);
            for g in z.chunks(4) {
                assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(g.iter().filter(|&&v| v == 0.0).count(), 3);
            }
        }
    }
}
