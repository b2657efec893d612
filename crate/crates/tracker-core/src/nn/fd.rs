//! Finite-difference gradient oracle.
//!
//! Replays a recorded tape in f64: central differences at f32 step sizes
//! drown in rounding noise well above the 1e-4 gate this oracle backs, so
//! the replay runs in double precision while the analytic gradients under
//! test stay f32. Stochastic one-hot ops replay as softmax probabilities
//! plus their recorded constant offset, i.e. exactly the smooth surrogate
//! whose gradient the straight-through backward implements.

use super::tape::{Op, Tape, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

fn log_softmax_chunk(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

const LN_2PI_64: f64 = 1.837_877_066_409_345_6;

/// Forward-replays the tape in f64, with leaf `wiggle` element `elem`
/// offset by `delta`, and returns the f64 value of `loss`.
pub fn replay_loss_f64(tape: &Tape, loss: Var, wiggle: Var, elem: usize, delta: f64) -> f64 {
    let mut vals: Vec<Vec<f64>> = tape
        .bufs
        .iter()
        .map(|b| b.data.iter().map(|&x| x as f64).collect())
        .collect();
    vals[wiggle.0][elem] += delta;

    for op in &tape.ops {
        match op {
            Op::Matmul { a, b, out } => {
                let (m, k) = (tape.bufs[a.0].rows, tape.bufs[a.0].cols);
                let n = tape.bufs[b.0].cols;
                let mut o = vec![0.0f64; m * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = vals[a.0][i * k + kk];
                        for j in 0..n {
                            o[i * n + j] += av * vals[b.0][kk * n + j];
                        }
                    }
                }
                vals[out.0] = o;
            }
            Op::AddRow { a, b, out } => {
                let c = tape.bufs[b.0].cols;
                vals[out.0] = vals[a.0]
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + vals[b.0][i % c])
                    .collect();
            }
            Op::Add { a, b, out } => {
                vals[out.0] = vals[a.0].iter().zip(&vals[b.0]).map(|(&x, &y)| x + y).collect();
            }
            Op::Sub { a, b, out } => {
                vals[out.0] = vals[a.0].iter().zip(&vals[b.0]).map(|(&x, &y)| x - y).collect();
            }
            Op::Mul { a, b, out } => {
                vals[out.0] = vals[a.0].iter().zip(&vals[b.0]).map(|(&x, &y)| x * y).collect();
            }
            Op::Affine { a, k, c, out } => {
                let (k, c) = (*k as f64, *c as f64);
                vals[out.0] = vals[a.0].iter().map(|&x| k * x + c).collect();
            }
            Op::MulConst { a, k, out } => {
                vals[out.0] =
                    vals[a.0].iter().zip(k).map(|(&x, &y)| x * y as f64).collect();
            }
            Op::Elu { a, out } => {
                vals[out.0] = vals[a.0]
                    .iter()
                    .map(|&x| if x >= 0.0 { x } else { x.exp() - 1.0 })
                    .collect();
            }
            Op::Sigmoid { a, out } => {
                vals[out.0] = vals[a.0].iter().map(|&x| sigmoid(x)).collect();
            }
            Op::Tanh { a, out } => {
                vals[out.0] = vals[a.0].iter().map(|&x| x.tanh()).collect();
            }
            Op::Exp { a, out } => {
                vals[out.0] = vals[a.0].iter().map(|&x| x.exp()).collect();
            }
            Op::Clamp { a, lo, hi, out } => {
                let (lo, hi) = (*lo as f64, *hi as f64);
                vals[out.0] = vals[a.0].iter().map(|&x| x.clamp(lo, hi)).collect();
            }
            Op::ConcatCols { parts, out } => {
                let rows = tape.bufs[out.0].rows;
                let mut o = Vec::with_capacity(tape.bufs[out.0].rows * tape.bufs[out.0].cols);
                for i in 0..rows {
                    for &p in parts {
                        let c = tape.bufs[p.0].cols;
                        o.extend_from_slice(&vals[p.0][i * c..(i + 1) * c]);
                    }
                }
                vals[out.0] = o;
            }
            Op::SliceCols { a, start, out } => {
                let (r, len) = (tape.bufs[out.0].rows, tape.bufs[out.0].cols);
                let c = tape.bufs[a.0].cols;
                let mut o = Vec::with_capacity(r * len);
                for i in 0..r {
                    o.extend_from_slice(&vals[a.0][i * c + start..i * c + start + len]);
                }
                vals[out.0] = o;
            }
            Op::Softmax { a, chunk, out } => {
                let mut o = vec![0.0f64; vals[a.0].len()];
                for s in (0..o.len()).step_by(*chunk) {
                    let ls = log_softmax_chunk(&vals[a.0][s..s + chunk]);
                    for j in 0..*chunk {
                        o[s + j] = ls[j].exp();
                    }
                }
                vals[out.0] = o;
            }
            Op::StOneHot { probs, offset, out, .. } => {
                vals[out.0] = vals[probs.0]
                    .iter()
                    .zip(offset)
                    .map(|(&p, &o)| p + o as f64)
                    .collect();
            }
            Op::SumAll { a, out } => {
                vals[out.0] = vec![vals[a.0].iter().sum()];
            }
            Op::MeanAll { a, out } => {
                let n = vals[a.0].len() as f64;
                vals[out.0] = vec![vals[a.0].iter().sum::<f64>() / n];
            }
            Op::GaussLogProb { mean, target, out } => {
                let s: f64 = vals[mean.0]
                    .iter()
                    .zip(target)
                    .map(|(&m, &t)| {
                        let d = m - t as f64;
                        -0.5 * d * d - 0.5 * LN_2PI_64
                    })
                    .sum();
                vals[out.0] = vec![s];
            }
            Op::BernoulliLogProb { logit, target, out } => {
                let s: f64 = vals[logit.0]
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| t as f64 * l - softplus(l))
                    .sum();
                vals[out.0] = vec![s];
            }
            Op::KlBalanced { post, prior, chunk, alpha, free, out } => {
                let (alpha, free) = (*alpha as f64, *free as f64);
                // The balancing weights apply to stop-gradient surrogates:
                // the alpha side freezes the posterior at its recorded
                // values, the (1-alpha) side freezes the prior. Replaying
                // the raw KL would differentiate a different function than
                // the one backward implements.
                let post0: Vec<f64> = tape.bufs[post.0].data.iter().map(|&x| x as f64).collect();
                let prior0: Vec<f64> = tape.bufs[prior.0].data.iter().map(|&x| x as f64).collect();
                let kl_of = |a: &[f64], b: &[f64]| -> f64 {
                    let lq = log_softmax_chunk(a);
                    let lp = log_softmax_chunk(b);
                    lq.iter().zip(&lp).map(|(&x, &y)| x.exp() * (x - y)).sum()
                };
                let mut total = 0.0f64;
                for s in (0..vals[post.0].len()).step_by(*chunk) {
                    let prior_side = kl_of(&post0[s..s + chunk], &vals[prior.0][s..s + chunk]);
                    let post_side = kl_of(&vals[post.0][s..s + chunk], &prior0[s..s + chunk]);
                    total += alpha * prior_side.max(free) + (1.0 - alpha) * post_side.max(free);
                }
                vals[out.0] = vec![total];
            }
        }
    }
    vals[loss.0][0]
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (leaf, element index, analytic, finite difference) at the worst element.
    pub worst: (usize, usize, f64, f64),
    pub elements: usize,
}

/// Central-difference check of the analytic gradients of `loss` w.r.t. each
/// leaf in `leaves`. `backward(loss)` must have run on the tape already.
///
/// The error measure is |analytic - fd| / max(|analytic|, |fd|, 1): relative
/// above unit scale, absolute below it, so near-zero gradients are compared
/// at absolute tolerance rather than blowing up the ratio.
pub fn gradcheck(tape: &Tape, loss: Var, leaves: &[Var], step: f64) -> GradCheck {
    let mut max_rel_err = 0.0f64;
    let mut worst = (0usize, 0usize, 0.0f64, 0.0f64);
    let mut elements = 0usize;
    for &leaf in leaves {
        let n = tape.val(leaf).len();
        for e in 0..n {
            let plus = replay_loss_f64(tape, loss, leaf, e, step);
            let minus = replay_loss_f64(tape, loss, leaf, e, -step);
            let fd = (plus - minus) / (2.0 * step);
            let analytic = tape.grad(leaf)[e] as f64;
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (leaf.0, e, analytic, fd);
            }
            elements += 1;
        }
    }
    GradCheck { max_rel_err, worst, elements }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_elu_net_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x_data: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1_data: Vec<f32> = (0..8 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b1_data: Vec<f32> = (0..6).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w2_data: Vec<f32> = (0..6 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let x = t.input(2, 4, &x_data);
        let w1 = t.input(4, 6, &w1_data[..24]);
        let b1 = t.input(1, 6, &b1_data);
        let w2 = t.input(6, 3, &w2_data[..18]);
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.elu(h);
        let o = t.matmul(h, w2);
        let sq = t.mul(o, o);
        let loss = t.mean_all(sq);
        t.backward(loss).unwrap();

        let report = gradcheck(&t, loss, &[x, w1, b1, w2], 1e-5);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn st_one_hot_surrogate_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let logits_data: Vec<f32> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f32> = (0..6 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let logits = t.input(2, 6, &logits_data);
        let w = t.input(6, 4, &w_data);
        let probs = t.softmax(logits, 3);
        let z = t.st_one_hot(probs, 3, &mut rng);
        let o = t.matmul(z, w);
        let th = t.tanh(o);
        let loss = t.mean_all(th);
        t.backward(loss).unwrap();
        let report = gradcheck(&t, loss, &[logits], 1e-5);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn kl_balanced_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = Tape::new();
        let a_data: Vec<f32> = (0..2 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b_data: Vec<f32> = (0..2 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = t.input(2, 8, &a_data);
        let b = t.input(2, 8, &b_data);
        // free bits 0 here: random logit pairs can land near the clamp
        // boundary, where the kink makes central differences meaningless
        let kl = t.kl_balanced(a, b, 4, 0.8, 0.0);
        t.backward(kl).unwrap();
        let report = gradcheck(&t, kl, &[a, b], 1e-5);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn bernoulli_and_gauss_heads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut t = Tape::new();
        let x_data: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t.input(1, 6, &x_data);
        let lg = t.slice_cols(x, 0, 3);
        let mg = t.slice_cols(x, 3, 3);
        let lp1 = t.bernoulli_logprob(lg, &[1.0, 0.0, 0.99]);
        let lp2 = t.gauss_logprob(mg, &[0.3, -0.2, 0.8]);
        let s = t.add(lp1, lp2);
        let loss = t.sum_all(s);
        t.backward(loss).unwrap();
        let report = gradcheck(&t, loss, &[x], 1e-5);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }
}
