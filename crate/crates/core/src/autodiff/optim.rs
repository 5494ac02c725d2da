use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        Self { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update.
    ///
    /// `grads[i] == None` marks a tensor that takes no update at all (not
    /// even decay), which is how frozen parameters are expressed.
    pub fn step<T: Real>(
        &self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&[T]>],
        state: &mut AdamState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adamw over {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.len() || state.m[i].len() != p.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "adamw tensor {i}: param {}, grad {}, state {}",
                        p.len(),
                        g.len(),
                        state.m[i].len()
                    )));
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_step(p0: f64, g: f64, opt: AdamW) -> f64 {
        let mut p = Tensor::vector(vec![p0]);
        let mut st = AdamState::new([&p]);
        let gv = [g];
        opt.step(&mut [&mut p], &[Some(&gv)], &mut st).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        assert_eq!(scalar_step(1.5, 0.0, opt), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        // m_hat = 1, v_hat = 1
        assert_abs_diff_eq!(
            scalar_step(1.0, 1.0, opt),
            1.0 - 0.1 / (1.0 + 1e-8),
            epsilon = 1e-12
        );
    }

    #[test]
    fn decay_only() {
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        assert_abs_diff_eq!(
            scalar_step(2.0, 0.0, opt),
            2.0 * (1.0 - 0.1 * 0.01),
            epsilon = 1e-15
        );
    }

    #[test]
    fn frozen_and_mismatch() {
        let mut p = Tensor::vector(vec![1.0f64, 2.0]);
        let mut st = AdamState::new([&p]);
        AdamW::default()
            .step(&mut [&mut p], &[None], &mut st)
            .unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        let bad = [1.0];
        assert!(AdamW::default()
            .step(&mut [&mut p], &[Some(&bad)], &mut st)
            .is_err());
    }
}
