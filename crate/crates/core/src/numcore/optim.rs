//! AdamW with decoupled weight decay, and a NewBob-style plateau scheduler.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments<T> {
    m: Matrix<T>,
    v: Matrix<T>,
}

/// Optimizer state; moments are keyed by parameter name and created lazily.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update over every trainable parameter using its `grad` field.
    ///
    /// Gradients are validated before anything is written, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        let decay = T::one() - T::c(c.lr * c.weight_decay);

        for p in params.iter_mut().filter(|p| p.trainable) {
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: Matrix::zeros(p.value.rows(), p.value.cols()),
                    v: Matrix::zeros(p.value.rows(), p.value.cols()),
                });
            if mom.m.shape() != p.value.shape() {
                // parameter was resized (e.g. a new LID column); restart its moments
                mom.m = Matrix::zeros(p.value.rows(), p.value.cols());
                mom.v = Matrix::zeros(p.value.rows(), p.value.cols());
            }
            let mask = p.freeze_mask.as_deref();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            let (theta, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..theta.len() {
                if mask.is_some_and(|mk| !mk[i]) {
                    continue;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewBobConfig {
    pub improvement_threshold: f64,
    pub anneal_factor: f64,
    /// Consecutive plateaus tolerated before annealing.
    pub patience: u32,
}

impl Default for NewBobConfig {
    fn default() -> Self {
        Self {
            improvement_threshold: 0.0025,
            anneal_factor: 0.5,
            patience: 0,
        }
    }
}

/// Reduce-on-plateau: anneal when the relative improvement of the
/// validation metric over the best seen so far falls below a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewBob {
    pub config: NewBobConfig,
    pub current_lr: f64,
    pub best_metric: Option<f64>,
    plateaus: u32,
}

impl NewBob {
    pub fn new(lr: f64, config: NewBobConfig) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!(
            config.anneal_factor > 0.0 && config.anneal_factor < 1.0,
            "anneal factor must be in (0, 1)"
        );
        Self {
            config,
            current_lr: lr,
            best_metric: None,
            plateaus: 0,
        }
    }

    /// Records a validation metric (lower is better) and returns the new lr.
    pub fn update(&mut self, metric: f64) -> f64 {
        let Some(best) = self.best_metric else {
            self.best_metric = Some(metric);
            return self.current_lr;
        };
        let improvement = if best.abs() > 0.0 {
            (best - metric) / best.abs()
        } else {
            best - metric
        };
        if metric < best {
            self.best_metric = Some(metric);
        }
        if improvement < self.config.improvement_threshold {
            self.plateaus += 1;
            if self.plateaus > self.config.patience {
                self.current_lr *= self.config.anneal_factor;
                self.plateaus = 0;
            }
        } else {
            self.plateaus = 0;
        }
        self.current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: Vec<f64>, grad: Vec<f64>) -> ParamStore<f64> {
        let n = value.len();
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, n, value).unwrap()).unwrap();
        s.get_mut(id).grad = Matrix::from_vec(1, n, grad).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut s = store(vec![1.0, -2.0, 3.5], vec![0.0; 3]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_by_lr_times_wd() {
        let mut s = store(vec![1.0, -2.0], vec![0.0; 2]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        // 1 - 0.1 * 0.5 = 0.95
        assert_eq!(s.by_name("w").unwrap().value.data(), &[0.95, -1.9]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // bias-corrected first step: mhat/sqrt(vhat) = sign(g)
        let mut s = store(vec![0.0, 0.0], vec![3.0, -0.5]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            eps: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        let v = s.by_name("w").unwrap().value.data().to_vec();
        assert!((v[0] + 0.01).abs() < 1e-15 && (v[1] - 0.01).abs() < 1e-15, "{v:?}");
    }

    #[test]
    fn fully_masked_tensor_is_bit_identical() {
        let mut s = store(vec![0.3, -0.7, 1e-3], vec![1.0, 2.0, 3.0]);
        s.get_mut(s.id("w").unwrap()).freeze_mask = Some(vec![false; 3]);
        let before = s.by_name("w").unwrap().value.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value, before);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let mut s = store(vec![1.0], vec![f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.by_name("w").unwrap().value.data(), &[1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut s = store(vec![1.0], vec![5.0]);
        s.get_mut(s.id("w").unwrap()).trainable = false;
        AdamW::new(AdamWConfig::default()).step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn newbob_keeps_lr_on_real_improvement() {
        let mut nb = NewBob::new(1e-4, NewBobConfig::default());
        nb.update(1.0);
        assert_eq!(nb.update(0.9), 1e-4);
    }

    #[test]
    fn newbob_halves_on_plateau() {
        let mut nb = NewBob::new(1e-4, NewBobConfig::default());
        nb.update(1.0);
        assert_eq!(nb.update(1.0), 5e-5);
    }

    #[test]
    fn newbob_three_plateaus_give_one_eighth() {
        let mut nb = NewBob::new(1e-4, NewBobConfig::default());
        nb.update(2.0);
        for _ in 0..3 {
            nb.update(2.0);
        }
        assert!((nb.current_lr - 1e-4 * 0.125).abs() < 1e-20);
    }

    #[test]
    fn newbob_patience_delays_annealing() {
        let mut nb = NewBob::new(1.0, NewBobConfig {
            patience: 1,
            ..Default::default()
        });
        nb.update(1.0);
        assert_eq!(nb.update(1.0), 1.0);
        assert_eq!(nb.update(1.0), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn entries() -> impl Strategy<Value = Vec<(f64, f64, bool)>> {
            prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 1..24)
        }

        proptest! {
            #[test]
            fn masked_entries_never_move(e in entries(), steps in 1usize..5) {
                let mut s = store(e.iter().map(|x| x.0).collect(), e.iter().map(|x| x.1).collect());
                let id = s.id("w").unwrap();
                s.get_mut(id).freeze_mask = Some(e.iter().map(|x| x.2).collect());
                let before = s.value(id).clone();
                let mut opt = AdamW::new(AdamWConfig::default());
                for _ in 0..steps {
                    opt.step(&mut s).unwrap();
                }
                for (i, x) in e.iter().enumerate() {
                    if !x.2 {
                        prop_assert_eq!(s.value(id).data()[i].to_bits(), before.data()[i].to_bits());
                    }
                }
            }

            #[test]
            fn adamw_is_deterministic(e in entries(), steps in 1usize..5) {
                let run = || {
                    let mut s = store(e.iter().map(|x| x.0).collect(), e.iter().map(|x| x.1).collect());
                    let mut opt = AdamW::new(AdamWConfig::default());
                    for _ in 0..steps {
                        opt.step(&mut s).unwrap();
                    }
                    s.by_name("w").unwrap().value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                };
                prop_assert_eq!(run(), run());
            }

            #[test]
            fn newbob_lr_never_increases(
                metrics in prop::collection::vec(0.01f64..10.0, 1..40),
                patience in 0u32..3,
            ) {
                let mut nb = NewBob::new(1e-3, NewBobConfig { patience, ..Default::default() });
                let mut last = nb.current_lr;
                for m in metrics {
                    let lr = nb.update(m);
                    prop_assert!(lr <= last);
                    last = lr;
                }
            }
        }
    }
}
