//! Teacher weight maintenance: exponential moving average of student weights,
//! applied entrywise after each optimizer step.

use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Decay settings for the teacher update.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaConfig {
    /// Decay factor; 0 copies the student, 1 never moves the teacher.
    pub alpha: f64,
    /// Warm-up ramp min(1 - 1/(step+1), alpha); off by default.
    pub ramp_alpha: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            alpha: 0.99,
            ramp_alpha: false,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "ema alpha {} outside [0,1]",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Decay factor effective at optimizer step `step` (0-based).
    pub fn effective_alpha(&self, step: u64) -> f64 {
        if self.ramp_alpha {
            (1.0 - 1.0 / (step as f64 + 1.0)).min(self.alpha)
        } else {
            self.alpha
        }
    }
}

/// In-place update `teacher = alpha * teacher + (1 - alpha) * student` for
/// every parameter entry. The student is untouched.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0,1]")));
    }
    if teacher.names() != student.names() {
        return Err(Error::Corruption(
            "teacher and student parameter name sets differ".into(),
        ));
    }
    for (t, s) in teacher.tensors_mut().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::Corruption(format!(
                "teacher/student shape mismatch: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, sv) in t.values_mut().iter_mut().zip(s.values()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}
