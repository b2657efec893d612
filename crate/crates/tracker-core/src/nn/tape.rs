//! Reverse-mode autodiff on a flat operation tape.
//!
//! Values are 2-D row-major `f32` buffers owned by the tape. Recording an op
//! computes its forward result immediately; `backward` replays the tape in
//! reverse accumulating vector-Jacobian products. Ops are recorded in
//! execution order, which is already a topological order of the graph.
//!
//! Shape mismatches between ops are programming bugs and panic; runtime
//! error conditions (non-scalar or non-finite loss) surface as `NnError`.

use rand::Rng;

use super::NnError;

/// Handle to a buffer on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Buf {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Buf {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Recorded operation. Fields are buffer handles plus whatever constants the
/// backward pass needs.
pub(crate) enum Op {
    Matmul { a: Var, b: Var, out: Var },
    /// out = a + row broadcast of b (b is 1 x cols).
    AddRow { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    /// out = k*a + c, elementwise.
    Affine { a: Var, k: f32, c: f32, out: Var },
    /// out = a * k elementwise with a constant buffer.
    MulConst { a: Var, k: Vec<f32>, out: Var },
    Elu { a: Var, out: Var },
    Sigmoid { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    Exp { a: Var, out: Var },
    Clamp { a: Var, lo: f32, hi: f32, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    SliceCols { a: Var, start: usize, out: Var },
    /// Softmax over contiguous chunks of `chunk` columns within each row.
    Softmax { a: Var, chunk: usize, out: Var },
    /// Straight-through one-hot sample per chunk. Forward wrote an exact
    /// one-hot; backward passes gradients through to the probabilities
    /// unchanged. `offset` (one-hot minus probs at record time) lets the
    /// f64 replay evaluate the smooth surrogate probs + offset.
    StOneHot { probs: Var, offset: Vec<f32>, out: Var },
    SumAll { a: Var, out: Var },
    MeanAll { a: Var, out: Var },
    /// Scalar sum of unit-variance Gaussian log density of `target` under
    /// mean `mean`: sum(-0.5*(m-t)^2 - 0.5*ln(2*pi)).
    GaussLogProb { mean: Var, target: Vec<f32>, out: Var },
    /// Scalar sum of Bernoulli log likelihood with probability sigmoid(logit)
    /// and (possibly soft) target t: sum(t*l - softplus(l)).
    BernoulliLogProb { logit: Var, target: Vec<f32>, out: Var },
    /// Balanced, free-bits-clamped categorical KL between per-chunk softmax
    /// distributions, summed over rows and chunks:
    ///   sum max(KL(sg(post)||prior), free)*alpha
    ///     + max(KL(post||sg(prior)), free)*(1-alpha)
    KlBalanced { post: Var, prior: Var, chunk: usize, alpha: f32, free: f32, out: Var },
}

pub struct Tape {
    pub(crate) bufs: Vec<Buf>,
    pub(crate) ops: Vec<Op>,
    grads: Option<Vec<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_2PI: f32 = 1.837_877_1;

impl Tape {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: None }
    }

    fn push_buf(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        assert_eq!(rows * cols, data.len(), "buffer size mismatch");
        self.bufs.push(Buf { rows, cols, data });
        Var(self.bufs.len() - 1)
    }

    /// Leaf buffer holding a copy of `data`. Inputs, constants, and staged
    /// parameters all enter the tape through here.
    pub fn input(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        self.push_buf(rows, cols, data.to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push_buf(rows, cols, vec![0.0; rows * cols])
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let b = &self.bufs[v.0];
        (b.rows, b.cols)
    }

    pub fn val(&self, v: Var) -> &[f32] {
        &self.bufs[v.0].data
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. Panics if backward
    /// has not run.
    pub fn grad(&self, v: Var) -> &[f32] {
        &self.grads.as_ref().expect("backward has not run")[v.0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ---- op recording -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {} vs {}", ka, kb);
        let mut out = vec![0.0f32; m * n];
        matmul_acc(&self.bufs[a.0].data, &self.bufs[b.0].data, &mut out, m, ka, n);
        let out = self.push_buf(m, n, out);
        self.ops.push(Op::Matmul { a, b, out });
        out
    }

    /// a: (r, c), bias: (1, c); out = a + bias per row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        assert!(br == 1 && bc == c, "bias shape (1,{}) required, got ({},{})", c, br, bc);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.bufs[a.0].data[i * c + j] + self.bufs[bias.0].data[j]);
            }
        }
        let out = self.push_buf(r, c, out);
        self.ops.push(Op::AddRow { a, b: bias, out });
        out
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape mismatch");
        let out: Vec<f32> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_buf(r, c, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_same_shape(a, b, |x, y| x + y);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_same_shape(a, b, |x, y| x - y);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_same_shape(a, b, |x, y| x * y);
        self.ops.push(Op::Mul { a, b, out });
        out
    }

    pub fn affine(&mut self, a: Var, k: f32, c: f32) -> Var {
        let (r, cc) = self.shape(a);
        let out: Vec<f32> = self.bufs[a.0].data.iter().map(|&x| k * x + c).collect();
        let out = self.push_buf(r, cc, out);
        self.ops.push(Op::Affine { a, k, c, out });
        out
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, k: &[f32]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, k.len(), "mul_const length mismatch");
        let out: Vec<f32> =
            self.bufs[a.0].data.iter().zip(k).map(|(&x, &y)| x * y).collect();
        let out = self.push_buf(r, c, out);
        self.ops.push(Op::MulConst { a, k: k.to_vec(), out });
        out
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<f32> = self.bufs[a.0].data.iter().map(|&x| f(x)).collect();
        self.push_buf(r, c, out)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| if x >= 0.0 { x } else { x.exp() - 1.0 });
        self.ops.push(Op::Elu { a, out });
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, sigmoid_f32);
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, f32::tanh);
        self.ops.push(Op::Tanh { a, out });
        out
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.unary(a, f32::exp);
        self.ops.push(Op::Exp { a, out });
        out
    }

    /// Clamp with pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        assert!(lo <= hi);
        let out = self.unary(a, |x| x.clamp(lo, hi));
        self.ops.push(Op::Clamp { a, lo, hi, out });
        out
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        for &p in parts {
            assert_eq!(self.shape(p).0, rows, "concat_cols row mismatch");
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.shape(p);
                out.extend_from_slice(&self.bufs[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let out = self.push_buf(rows, cols, out);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        out
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.bufs[a.0].data[i * c + start..i * c + start + len]);
        }
        let out = self.push_buf(r, len, out);
        self.ops.push(Op::SliceCols { a, start, out });
        out
    }

    /// Softmax over contiguous chunks of `chunk` columns in each row.
    pub fn softmax(&mut self, a: Var, chunk: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(chunk > 0 && c % chunk == 0, "softmax chunk {} does not divide cols {}", chunk, c);
        let mut out = vec![0.0f32; r * c];
        for s in (0..r * c).step_by(chunk) {
            softmax_chunk_f32(&self.bufs[a.0].data[s..s + chunk], &mut out[s..s + chunk]);
        }
        let out = self.push_buf(r, c, out);
        self.ops.push(Op::Softmax { a, chunk, out });
        out
    }

    /// Sample one class per chunk from probabilities `probs` (already on
    /// tape); forward output is the exact one-hot encoding, backward is a
    /// straight-through identity into `probs`.
    pub fn st_one_hot<R: Rng>(&mut self, probs: Var, chunk: usize, rng: &mut R) -> Var {
        let (r, c) = self.shape(probs);
        assert!(chunk > 0 && c % chunk == 0, "one_hot chunk {} does not divide cols {}", chunk, c);
        let mut out = vec![0.0f32; r * c];
        for s in (0..r * c).step_by(chunk) {
            let p = &self.bufs[probs.0].data[s..s + chunk];
            let idx = sample_categorical(p, rng);
            out[s + idx] = 1.0;
        }
        let offset: Vec<f32> = out
            .iter()
            .zip(&self.bufs[probs.0].data)
            .map(|(&o, &p)| o - p)
            .collect();
        let out = self.push_buf(r, c, out);
        self.ops.push(Op::StOneHot { probs, offset, out });
        out
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.bufs[a.0].data.iter().sum();
        let out = self.push_buf(1, 1, vec![s]);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.bufs[a.0].len() as f32;
        let s: f32 = self.bufs[a.0].data.iter().sum();
        let out = self.push_buf(1, 1, vec![s / n]);
        self.ops.push(Op::MeanAll { a, out });
        out
    }

    /// Sum over elements of log N(target | mean, 1).
    pub fn gauss_logprob(&mut self, mean: Var, target: &[f32]) -> Var {
        let b = &self.bufs[mean.0];
        assert_eq!(b.len(), target.len(), "gauss_logprob target length mismatch");
        let s: f32 = b
            .data
            .iter()
            .zip(target)
            .map(|(&m, &t)| -0.5 * (m - t) * (m - t) - 0.5 * LN_2PI)
            .sum();
        let out = self.push_buf(1, 1, vec![s]);
        self.ops.push(Op::GaussLogProb { mean, target: target.to_vec(), out });
        out
    }

    /// Sum over elements of t*log(sigmoid(l)) + (1-t)*log(1-sigmoid(l)),
    /// computed stably as t*l - softplus(l). Soft targets allowed.
    pub fn bernoulli_logprob(&mut self, logit: Var, target: &[f32]) -> Var {
        let b = &self.bufs[logit.0];
        assert_eq!(b.len(), target.len(), "bernoulli_logprob target length mismatch");
        let s: f32 = b
            .data
            .iter()
            .zip(target)
            .map(|(&l, &t)| t * l - softplus_f32(l))
            .sum();
        let out = self.push_buf(1, 1, vec![s]);
        self.ops.push(Op::BernoulliLogProb { logit, target: target.to_vec(), out });
        out
    }

    /// Balanced categorical KL with free bits, summed over rows and chunks.
    /// `alpha` weights the prior-side term (posterior treated as constant);
    /// `1-alpha` the posterior-side term. Each side is clamped to at least
    /// `free` per chunk before weighting.
    pub fn kl_balanced(&mut self, post: Var, prior: Var, chunk: usize, alpha: f32, free: f32) -> Var {
        let (r, c) = self.shape(post);
        assert_eq!((r, c), self.shape(prior), "kl_balanced shape mismatch");
        assert!(chunk > 0 && c % chunk == 0);
        let mut total = 0.0f32;
        for s in (0..r * c).step_by(chunk) {
            let kl = kl_chunk_f32(
                &self.bufs[post.0].data[s..s + chunk],
                &self.bufs[prior.0].data[s..s + chunk],
            );
            total += alpha * kl.max(free) + (1.0 - alpha) * kl.max(free);
        }
        let out = self.push_buf(1, 1, vec![total]);
        self.ops.push(Op::KlBalanced { post, prior, chunk, alpha, free, out });
        out
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from scalar `loss`. Gradients of every buffer are
    /// available through `grad` afterwards; leaves not on a path to the
    /// loss keep zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(NnError::NonScalarLoss { rows: r, cols: c });
        }
        let lv = self.bufs[loss.0].data[0];
        if !lv.is_finite() {
            return Err(NnError::NonFinite { context: "loss".into() });
        }
        let mut grads: Vec<Vec<f32>> = self.bufs.iter().map(|b| vec![0.0; b.len()]).collect();
        grads[loss.0][0] = 1.0;

        for op in self.ops.iter().rev() {
            match op {
                Op::Matmul { a, b, out } => {
                    let (m, k) = (self.bufs[a.0].rows, self.bufs[a.0].cols);
                    let n = self.bufs[b.0].cols;
                    let g_out = std::mem::take(&mut grads[out.0]);
                    // dA += dOut @ B^T
                    {
                        let bd = &self.bufs[b.0].data;
                        let ga = &mut grads[a.0];
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0f32;
                                let brow = &bd[kk * n..kk * n + n];
                                let grow = &g_out[i * n..i * n + n];
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                    }
                    // dB += A^T @ dOut
                    {
                        let ad = &self.bufs[a.0].data;
                        let gb = &mut grads[b.0];
                        for i in 0..m {
                            for kk in 0..k {
                                let av = ad[i * k + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g_out[i * n..i * n + n];
                                let brow = &mut gb[kk * n..kk * n + n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    grads[out.0] = g_out;
                }
                Op::AddRow { a, b, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    let c = self.bufs[b.0].cols;
                    for (ga, &g) in grads[a.0].iter_mut().zip(&g_out) {
                        *ga += g;
                    }
                    for (i, &g) in g_out.iter().enumerate() {
                        grads[b.0][i % c] += g;
                    }
                    grads[out.0] = g_out;
                }
                Op::Add { a, b, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for (ga, &g) in grads[a.0].iter_mut().zip(&g_out) {
                        *ga += g;
                    }
                    for (gb, &g) in grads[b.0].iter_mut().zip(&g_out) {
                        *gb += g;
                    }
                    grads[out.0] = g_out;
                }
                Op::Sub { a, b, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for (ga, &g) in grads[a.0].iter_mut().zip(&g_out) {
                        *ga += g;
                    }
                    for (gb, &g) in grads[b.0].iter_mut().zip(&g_out) {
                        *gb -= g;
                    }
                    grads[out.0] = g_out;
                }
                Op::Mul { a, b, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        grads[a.0][i] += g_out[i] * self.bufs[b.0].data[i];
                    }
                    for i in 0..g_out.len() {
                        grads[b.0][i] += g_out[i] * self.bufs[a.0].data[i];
                    }
                    grads[out.0] = g_out;
                }
                Op::Affine { a, k, out, .. } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for (ga, &g) in grads[a.0].iter_mut().zip(&g_out) {
                        *ga += k * g;
                    }
                    grads[out.0] = g_out;
                }
                Op::MulConst { a, k, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        grads[a.0][i] += g_out[i] * k[i];
                    }
                    grads[out.0] = g_out;
                }
                Op::Elu { a, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        let x = self.bufs[a.0].data[i];
                        // exp(x) = out + 1 on the negative branch
                        let d = if x >= 0.0 { 1.0 } else { self.bufs[out.0].data[i] + 1.0 };
                        grads[a.0][i] += g_out[i] * d;
                    }
                    grads[out.0] = g_out;
                }
                Op::Sigmoid { a, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        let y = self.bufs[out.0].data[i];
                        grads[a.0][i] += g_out[i] * y * (1.0 - y);
                    }
                    grads[out.0] = g_out;
                }
                Op::Tanh { a, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        let y = self.bufs[out.0].data[i];
                        grads[a.0][i] += g_out[i] * (1.0 - y * y);
                    }
                    grads[out.0] = g_out;
                }
                Op::Exp { a, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        grads[a.0][i] += g_out[i] * self.bufs[out.0].data[i];
                    }
                    grads[out.0] = g_out;
                }
                Op::Clamp { a, lo, hi, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for i in 0..g_out.len() {
                        let x = self.bufs[a.0].data[i];
                        if x >= *lo && x <= *hi {
                            grads[a.0][i] += g_out[i];
                        }
                    }
                    grads[out.0] = g_out;
                }
                Op::ConcatCols { parts, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    let rows = self.bufs[out.0].rows;
                    let total = self.bufs[out.0].cols;
                    for i in 0..rows {
                        let mut off = 0;
                        for &p in parts {
                            let c = self.bufs[p.0].cols;
                            for j in 0..c {
                                grads[p.0][i * c + j] += g_out[i * total + off + j];
                            }
                            off += c;
                        }
                    }
                    grads[out.0] = g_out;
                }
                Op::SliceCols { a, start, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    let (r, len) = (self.bufs[out.0].rows, self.bufs[out.0].cols);
                    let c = self.bufs[a.0].cols;
                    for i in 0..r {
                        for j in 0..len {
                            grads[a.0][i * c + start + j] += g_out[i * len + j];
                        }
                    }
                    grads[out.0] = g_out;
                }
                Op::Softmax { a, chunk, out } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for s in (0..g_out.len()).step_by(*chunk) {
                        let y = &self.bufs[out.0].data[s..s + chunk];
                        let g = &g_out[s..s + chunk];
                        let dot: f32 = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..*chunk {
                            grads[a.0][s + j] += y[j] * (g[j] - dot);
                        }
                    }
                    grads[out.0] = g_out;
                }
                Op::StOneHot { probs, out, .. } => {
                    let g_out = std::mem::take(&mut grads[out.0]);
                    for (gp, &g) in grads[probs.0].iter_mut().zip(&g_out) {
                        *gp += g;
                    }
                    grads[out.0] = g_out;
                }
                Op::SumAll { a, out } => {
                    let g = grads[out.0][0];
                    for ga in grads[a.0].iter_mut() {
                        *ga += g;
                    }
                }
                Op::MeanAll { a, out } => {
                    let g = grads[out.0][0] / self.bufs[a.0].len() as f32;
                    for ga in grads[a.0].iter_mut() {
                        *ga += g;
                    }
                }
                Op::GaussLogProb { mean, target, out } => {
                    let g = grads[out.0][0];
                    for i in 0..target.len() {
                        grads[mean.0][i] += g * (target[i] - self.bufs[mean.0].data[i]);
                    }
                }
                Op::BernoulliLogProb { logit, target, out } => {
                    let g = grads[out.0][0];
                    for i in 0..target.len() {
                        let l = self.bufs[logit.0].data[i];
                        grads[logit.0][i] += g * (target[i] - sigmoid_f32(l));
                    }
                }
                Op::KlBalanced { post, prior, chunk, alpha, free, out } => {
                    let g = grads[out.0][0];
                    let n = self.bufs[post.0].len();
                    for s in (0..n).step_by(*chunk) {
                        let pl = &self.bufs[post.0].data[s..s + chunk];
                        let ql = &self.bufs[prior.0].data[s..s + chunk];
                        let (lq, _) = log_softmax_chunk_f32(pl);
                        let (lp, _) = log_softmax_chunk_f32(ql);
                        let mut kl = 0.0f32;
                        for j in 0..*chunk {
                            kl += lq[j].exp() * (lq[j] - lp[j]);
                        }
                        if kl <= *free {
                            continue; // clamped to the constant `free`: no gradient
                        }
                        for j in 0..*chunk {
                            let qj = lq[j].exp();
                            let pj = lp[j].exp();
                            // prior side: d KL(sg(q)||p) / d prior_logit_j = p_j - q_j
                            grads[prior.0][s + j] += g * alpha * (pj - qj);
                            // posterior side: d KL(q||sg(p)) / d post_logit_j
                            grads[post.0][s + j] += g * (1.0 - alpha) * qj * ((lq[j] - lp[j]) - kl);
                        }
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// True if every buffer on the tape holds only finite values.
    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.data.iter().all(|x| x.is_finite()))
    }
}

// ---- shared numeric kernels (f32) -------------------------------------

pub(crate) fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f32(x: f32) -> f32 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

pub(crate) fn softmax_chunk_f32(x: &[f32], out: &mut [f32]) {
    let m = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Returns (log-softmax of the chunk, log-sum-exp).
pub(crate) fn log_softmax_chunk_f32(x: &[f32]) -> (Vec<f32>, f32) {
    let m = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
    (x.iter().map(|&v| v - lse).collect(), lse)
}

pub(crate) fn kl_chunk_f32(post_logits: &[f32], prior_logits: &[f32]) -> f32 {
    let (lq, _) = log_softmax_chunk_f32(post_logits);
    let (lp, _) = log_softmax_chunk_f32(prior_logits);
    lq.iter().zip(&lp).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

pub(crate) fn sample_categorical<R: Rng>(probs: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.input(1, 3, &[1.0, 2.0, 3.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.input(1, 2, &[1.0, -2.0]);
        let sq = t.mul(x, x);
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut t = Tape::new();
        let x = t.input(1, 3, &[1.0, 2.0, 3.0]);
        assert!(matches!(t.backward(x), Err(NnError::NonScalarLoss { .. })));
    }

    #[test]
    fn elu_fixed_points() {
        let mut t = Tape::new();
        let x = t.input(1, 3, &[0.0, 1.0, -1.0]);
        let y = t.elu(x);
        let v = t.val(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - ((-1.0f32).exp() - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn matmul_matches_identity() {
        let mut t = Tape::new();
        let x = t.input(1, 2, &[1.0, 0.0]);
        let w = t.input(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = t.matmul(x, w);
        assert_eq!(t.val(y), &[1.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let x = t.input(1, 3, &[1.0, 2.0, 3.0]);
        let w = t.input(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        t.matmul(x, w);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.input(2, 4, &[0.1, -0.3, 2.0, 0.5, -1.0, 0.0, 1.0, 3.0]);
        let y = t.softmax(x, 2);
        for s in t.val(y).chunks(2) {
            let sum: f32 = s.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_is_exact_and_st_backward_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let logits = t.input(1, 4, &[0.3, -0.2, 0.9, 0.0]);
        let probs = t.softmax(logits, 4);
        let z = t.st_one_hot(probs, 4, &mut rng);
        let ones: usize = t.val(z).iter().filter(|&&v| v == 1.0).count();
        let zeros: usize = t.val(z).iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (1, 3));
        let s = t.sum_all(z);
        t.backward(s).unwrap();
        // straight-through: dz/dprobs = identity, so grad at probs is all ones
        assert_eq!(t.grad(probs), &[1.0; 4]);
    }

    #[test]
    fn one_hot_extreme_logit_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..64 {
            let mut t = Tape::new();
            let logits = t.input(1, 4, &[0.0, 1e6, 0.0, 0.0]);
            let probs = t.softmax(logits, 4);
            let z = t.st_one_hot(probs, 4, &mut rng);
            assert_eq!(t.val(z)[1], 1.0);
        }
    }

    #[test]
    fn single_class_group_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let logits = t.input(1, 1, &[0.7]);
        let probs = t.softmax(logits, 1);
        let z = t.st_one_hot(probs, 1, &mut rng);
        assert_eq!(t.val(z), &[1.0]);
        let s = t.sum_all(z);
        t.backward(s).unwrap();
        // softmax of a single class is constant 1: no gradient into logits
        assert_eq!(t.grad(logits), &[0.0]);
    }

    #[test]
    fn categorical_frequencies_within_3_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000usize;
        let k = 4usize;
        let mut counts = [0usize; 4];
        for _ in 0..n / 100 {
            // batch 100 rows per tape to keep this test quick
            let mut t = Tape::new();
            let logits = t.input(100, k, &vec![0.0; 100 * k]);
            let probs = t.softmax(logits, k);
            let z = t.st_one_hot(probs, k, &mut rng);
            for row in t.val(z).chunks(k) {
                counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
            }
        }
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "class count {} outside 3 sigma of {}",
                c,
                n as f64 * p
            );
        }
    }

    #[test]
    fn kl_balanced_zero_for_identical() {
        let mut t = Tape::new();
        let a = t.input(1, 4, &[0.5, -0.5, 1.0, 0.0]);
        let b = t.input(1, 4, &[0.5, -0.5, 1.0, 0.0]);
        let kl = t.kl_balanced(a, b, 4, 0.8, 0.0);
        assert!(t.val(kl)[0].abs() < 1e-6);
    }

    #[test]
    fn kl_balanced_free_bits_floor() {
        let mut t = Tape::new();
        let a = t.input(1, 4, &[0.5, -0.5, 1.0, 0.0]);
        let b = t.input(1, 4, &[0.5, -0.5, 1.0, 0.0]);
        let kl = t.kl_balanced(a, b, 4, 0.8, 1.0);
        // identical distributions clamp to the free floor, with zero grads
        assert!((t.val(kl)[0] - 1.0).abs() < 1e-6);
        t.backward(kl).unwrap();
        assert_eq!(t.grad(a), &[0.0; 4]);
        assert_eq!(t.grad(b), &[0.0; 4]);
    }

    #[test]
    fn gauss_logprob_trivial_values() {
        let mut t = Tape::new();
        let m = t.input(1, 1, &[0.0]);
        let lp = t.gauss_logprob(m, &[0.0]);
        assert!((t.val(lp)[0] - (-0.918_938_5)).abs() < 1e-5);

        let mut t = Tape::new();
        let m = t.input(1, 1, &[1.0]);
        let lp = t.gauss_logprob(m, &[0.0]);
        assert!((t.val(lp)[0] - (-0.5 - 0.918_938_5)).abs() < 1e-5);
    }

    #[test]
    fn clamp_passes_gradient_inside_only() {
        let mut t = Tape::new();
        let x = t.input(1, 3, &[-2.0, 0.5, 3.0]);
        let y = t.clamp(x, -1.0, 1.0);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.0, 1.0, 0.0]);
        assert_eq!(t.val(y), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let mut t = Tape::new();
        let a = t.input(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t.input(2, 1, &[5.0, 6.0]);
        let cat = t.concat_cols(&[a, b]);
        assert_eq!(t.val(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sl = t.slice_cols(cat, 2, 1);
        assert_eq!(t.val(sl), &[5.0, 6.0]);
        let s = t.sum_all(sl);
        t.backward(s).unwrap();
        assert_eq!(t.grad(b), &[1.0, 1.0]);
        assert_eq!(t.grad(a), &[0.0; 4]);
    }
}
