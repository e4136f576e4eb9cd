//! AdamW with decoupled weight decay and the one-cycle schedule: linear
//! warm-up to the peak rate over the warm-up epochs, cosine decay to zero.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Missing gradients are
    /// treated as zero (decoupled decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - libm::pow(ADAM_BETA1, t);
        let bias2 = 1.0 - libm::pow(ADAM_BETA2, t);
        for (name, value) in store.iter_mut() {
            let n = value.numel();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let grad = grads.get(name);
            let data = value.data_mut();
            for i in 0..n {
                let g = grad.map(|t| t.data()[i]).unwrap_or(0.0);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                // decoupled decay: applied directly to the weight, not the gradient
                data[i] -= lr * (m_hat / (libm::sqrt(v_hat) + ADAM_EPS));
                data[i] -= lr * self.weight_decay * data[i];
            }
        }
    }
}

/// One-cycle schedule over `total_steps`: linear 0 -> peak across
/// `warmup_steps`, then cosine peak -> 0, reaching zero at the last step.
pub fn one_cycle_lr(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    debug_assert!(total_steps > 0);
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(warmup_steps + 1).max(1);
    let done = (step - warmup_steps) as f64 / last as f64;
    let done = done.min(1.0);
    0.5 * peak * (1.0 + libm::cos(core::f64::consts::PI * done))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computed_adam() {
        // scalar parameter, weight decay 0
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(2.0));
        let mut opt = AdamW::new(0.0);
        let g = 0.3;
        let mut grads = BTreeMap::new();
        grads.insert(alloc::string::String::from("p"), Tensor::scalar(g));
        let lr = 0.01;
        opt.step(&mut store, &grads, lr);

        let m = (1.0 - ADAM_BETA1) * g;
        let v = (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / (1.0 - ADAM_BETA1);
        let v_hat = v / (1.0 - ADAM_BETA2);
        let want = 2.0 - lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        let got = store.get("p").unwrap().item();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient_path() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.1);
        let grads = BTreeMap::new(); // no gradient at all
        opt.step(&mut store, &grads, 0.5);
        // zero gradient: only the decay term moves the weight
        let got = store.get("p").unwrap().item();
        assert!((got - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn warmup_ends_at_peak_and_schedule_ends_near_zero() {
        let (warmup, total, peak) = (10usize, 100usize, 3e-4);
        assert!((one_cycle_lr(warmup - 1, warmup, total, peak) - peak).abs() < 1e-18);
        assert!(one_cycle_lr(0, warmup, total, peak) < peak / 5.0);
        let last = one_cycle_lr(total - 1, warmup, total, peak);
        assert!(last < peak * 1e-3, "final lr {last}");
        // monotone decay after the peak
        let mut prev = peak;
        for s in warmup..total {
            let lr = one_cycle_lr(s, warmup, total, peak);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}
