//! AdamW with decoupled weight decay and the warmup/linear-decay schedule.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Round weights and moments to f32 after every update, so checkpoints
    /// (stored as f32) resume bit-identically.
    pub f32_storage: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, f32_storage: true }
    }
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect::<Vec<_>>();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One AdamW update at learning rate `lr`. Fails without touching any
/// weight when a gradient is non-finite.
pub fn adamw_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || grads.all().len() != store.len() {
        return Err(Error::shape("adamw_step", "optimizer state does not match parameters"));
    }
    for (p, g) in store.params().iter().zip(grads.all()) {
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {} at element {j} of {}", g[j], p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in store.params_mut().iter_mut().enumerate() {
        let g = &grads.all()[i];
        let decay = if param.decay { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = param.tensor.data_mut();
        for j in 0..w.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * w[j]);
        }
        if cfg.f32_storage {
            param.tensor.round_to_f32();
            state.m[i].round_to_f32();
            state.v[i].round_to_f32();
        }
    }
    Ok(())
}

/// Linear warmup then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        if total_steps < 2 {
            return total_steps;
        }
        ((total_steps as f64 * self.warmup_fraction).round() as u64).clamp(1, total_steps - 1)
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let step = step.min(total_steps);
        let warm = self.warmup_steps(total_steps);
        if total_steps == 0 || warm == 0 {
            return 0.0;
        }
        if step <= warm {
            self.peak_lr * step as f64 / warm as f64
        } else {
            self.peak_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![value]).unwrap(), decay);
        s
    }

    /// Gradient `g` on the single weight, via the loss `g * w`.
    fn grads_of(store: &ParamStore, g: f64) -> Grads {
        let mut graph = crate::params::Graph::new(store);
        let w = graph.param(store.id("w").unwrap()).unwrap();
        let scaled = graph.tape.scale(w, g).unwrap();
        let loss = graph.tape.sum(scaled).unwrap();
        graph.backward(loss).unwrap()
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let mut store = scalar_store(0.25, true);
        let mut st = AdamState::new(&store);
        let cfg = AdamWConfig { weight_decay: 0.0, f32_storage: false, ..Default::default() };
        let zero = Grads::zeros(&store);
        adamw_step(&mut store, &zero, &mut st, &cfg, 1e-3).unwrap();
        assert_eq!(store.params()[0].tensor.data(), &[0.25]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (p0, g, lr, wd, eps) = (0.5_f64, 0.2_f64, 1e-3_f64, 0.01_f64, 1e-8_f64);
        let mut store = scalar_store(p0, true);
        let grads = grads_of(&store, g);
        let mut st = AdamState::new(&store);
        let cfg = AdamWConfig { weight_decay: wd, eps, f32_storage: false, ..Default::default() };
        adamw_step(&mut store, &grads, &mut st, &cfg, lr).unwrap();
        // bias-corrected moments after one step are g and g^2
        let expect = p0 - lr * (g / (g.abs() + eps)) - lr * wd * p0;
        assert!((store.params()[0].tensor.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_with_zero_grads() {
        let mut store = scalar_store(2.0, true);
        let mut st = AdamState::new(&store);
        let cfg = AdamWConfig { weight_decay: 0.1, f32_storage: false, ..Default::default() };
        let zero = Grads::zeros(&store);
        adamw_step(&mut store, &zero, &mut st, &cfg, 0.5).unwrap();
        assert!((store.params()[0].tensor.data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);

        let mut no_decay = scalar_store(2.0, false);
        let mut st = AdamState::new(&no_decay);
        let zero = Grads::zeros(&no_decay);
        adamw_step(&mut no_decay, &zero, &mut st, &cfg, 0.5).unwrap();
        assert_eq!(no_decay.params()[0].tensor.data(), &[2.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { peak_lr: 2e-4, warmup_fraction: 0.02 };
        let total = 1000;
        let warm = s.warmup_steps(total);
        assert_eq!(warm, 20);
        assert_eq!(s.lr_at(0, total), 0.0);
        assert_eq!(s.lr_at(warm, total), 2e-4);
        assert_eq!(s.lr_at(total, total), 0.0);
        assert!((s.lr_at(10, total) - 1e-4).abs() < 1e-18);
    }
}
