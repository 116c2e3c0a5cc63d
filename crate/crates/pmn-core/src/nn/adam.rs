//! Adam optimizer with per-epoch learning-rate decay.
//!
//! The effective learning rate at epoch `e` (0-based) is
//! `base_lr * decay^e`; within an epoch every step uses that rate. Updates
//! are the standard bias-corrected Adam recurrence.

use crate::error::{PmnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub decay: f64,
    step: u64,
    /// First/second moment per parameter, keyed by visit order.
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(base_lr: f64, decay: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
            decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi(epoch as i32)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// updating the parameters of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update to the parameter at `slot` (its visit-order
    /// index). Errors on non-finite gradients, naming the parameter.
    pub fn update(
        &mut self,
        slot: usize,
        name: &str,
        value: &mut Tensor,
        grad: &Tensor,
        epoch: usize,
    ) -> Result<()> {
        if !grad.all_finite() {
            return Err(PmnError::Numerical(format!(
                "non-finite gradient for parameter '{name}' at step {}",
                self.step
            )));
        }
        while self.moments.len() <= slot {
            self.moments.push((
                Tensor::zeros(grad.shape()),
                Tensor::zeros(grad.shape()),
            ));
        }
        let lr = self.effective_lr(epoch);
        let t = self.step as i32;
        let (m, v) = &mut self.moments[slot];
        if m.shape() != grad.shape() {
            return Err(PmnError::Usage(format!(
                "moment shape {:?} does not match gradient {:?} for '{name}' \
                 (parameter visit order changed?)",
                m.shape(),
                grad.shape()
            )));
        }

        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for ((pv, mv), (vv, gv)) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(grad.data()))
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        // Keep parameters exactly f32-representable (checkpoint precision).
        value.quantize_f32();
        Ok(())
    }
}
