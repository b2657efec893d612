//! Adam optimizer over a [`ParamStore`].

use super::layers::{ParamStore, Staged};
use super::tape::Tape;
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip, applied across all parameters of the store.
    pub clip: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 100.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradStats {
    pub grad_norm: f32,
    pub clipped: bool,
}

/// Moment estimates per parameter tensor, plus the shared step counter.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update using the gradients of the staged
    /// copies of `store`'s parameters on `tape`. Non-finite gradients leave
    /// the parameters and the optimizer state untouched and return an error,
    /// so the caller can choose between aborting and skip-and-report.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        staged: &Staged,
        lr: f32,
    ) -> Result<GradStats, NnError> {
        let mut norm_sq = 0.0f64;
        for &var in staged.vars() {
            for &g in tape.grad(var) {
                if !g.is_finite() {
                    return Err(NnError::NonFinite { context: "gradient".into() });
                }
                norm_sq += (g as f64) * (g as f64);
            }
        }
        let norm = norm_sq.sqrt() as f32;
        let scale = if norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };

        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);

        for (i, &var) in staged.vars().iter().enumerate() {
            let grads = tape.grad(var);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = &mut store.get_mut(super::layers::PId(i)).data;
            for j in 0..grads.len() {
                let g = grads[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(GradStats { grad_norm: norm, clipped: scale < 1.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Tensor;
    use crate::nn::Tape;

    fn one_param_store(value: f32) -> (ParamStore, crate::nn::PId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::from_vec(1, 1, vec![value]));
        (store, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut store, id) = one_param_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        // loss = theta  =>  grad = 1
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let loss = tape.sum_all(staged.var(id));
        tape.backward(loss).unwrap();
        adam.step(&mut store, &tape, &staged, 1e-3).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).data[0] - expect).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut store, id) = one_param_store(0.7);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        // loss ignores theta entirely
        let x = tape.input(1, 1, &[2.0]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        let _ = staged.var(id);
        adam.step(&mut store, &tape, &staged, 1e-2).unwrap();
        assert_eq!(store.get(id).data[0], 0.7);
    }

    #[test]
    fn ten_steps_on_quadratic_strictly_decrease() {
        let (mut store, id) = one_param_store(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let th = staged.var(id);
            let sq = tape.mul(th, th);
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            adam.step(&mut store, &tape, &staged, 0.05).unwrap();
            let cur = store.get(id).data[0].abs();
            assert!(cur < prev, "|theta| did not decrease: {} -> {}", prev, cur);
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_is_error_and_leaves_params() {
        let (mut store, id) = one_param_store(0.3);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let th = staged.var(id);
        // loss stays finite (~3e36) but its gradient overflows f32
        let big = tape.scale(th, 140.0);
        let e = tape.exp(big);
        let sq = tape.mul(e, e);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.val(loss)[0].is_finite());
        assert!(!tape.grad(th)[0].is_finite());
        assert!(matches!(
            adam.step(&mut store, &tape, &staged, 1e-3),
            Err(NnError::NonFinite { .. })
        ));
        assert_eq!(store.get(id).data[0], 0.3);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn global_norm_clip_rescales() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let mut adam = Adam::new(&store, AdamConfig { clip: 1.0, ..Default::default() });
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let th = staged.var(id);
        let scaled = tape.scale(th, 100.0);
        let loss = tape.sum_all(scaled);
        tape.backward(loss).unwrap();
        let stats = adam.step(&mut store, &tape, &staged, 1e-3).unwrap();
        assert!(stats.clipped);
        assert!((stats.grad_norm - (2.0f32).sqrt() * 100.0).abs() < 1e-3);
    }
}
