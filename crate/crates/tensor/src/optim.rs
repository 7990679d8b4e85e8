use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Step,
}

/// Learning rate as a function of (stage-local) epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    breakpoints: Vec<(usize, f64)>,
    mode: Interpolation,
}

impl LrSchedule {
    pub fn new(breakpoints: Vec<(usize, f64)>, mode: Interpolation) -> Result<Self> {
        let invalid = |detail: String| TensorError::Invalid {
            op: "lr_schedule",
            detail,
        };
        if breakpoints.is_empty() {
            return Err(invalid("schedule needs at least one breakpoint".into()));
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("breakpoint epochs must be strictly increasing".into()));
        }
        if let Some(&(e, lr)) = breakpoints.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(invalid(format!("learning rate {lr} at epoch {e} is not positive")));
        }
        Ok(LrSchedule { breakpoints, mode })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![(0, lr)], Interpolation::Step)
    }

    /// Piecewise-constant decay from `start` to `end` over `epochs`, split
    /// into `steps` equal spans with geometrically spaced rates.
    pub fn stepped(start: f64, end: f64, epochs: usize, steps: usize) -> Result<Self> {
        let steps = steps.clamp(1, epochs.max(1));
        let points = (0..steps)
            .map(|k| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    k as f64 / (steps - 1) as f64
                };
                (k * epochs / steps, start * (end / start).powf(frac))
            })
            .collect();
        Self::new(points, Interpolation::Step)
    }

    pub fn breakpoints(&self) -> &[(usize, f64)] {
        &self.breakpoints
    }

    pub fn mode(&self) -> Interpolation {
        self.mode
    }

    pub fn rate(&self, epoch: f64) -> f64 {
        let bp = &self.breakpoints;
        if epoch <= bp[0].0 as f64 {
            return bp[0].1;
        }
        let after = bp.iter().position(|&(e, _)| e as f64 > epoch);
        match (after, self.mode) {
            (None, _) => bp[bp.len() - 1].1,
            (Some(i), Interpolation::Step) => bp[i - 1].1,
            (Some(i), Interpolation::Linear) => {
                let (e0, r0) = bp[i - 1];
                let (e1, r1) = bp[i];
                let t = (epoch - e0 as f64) / (e1 - e0) as f64;
                r0 + t * (r1 - r0)
            }
        }
    }
}

/// SGD with momentum; velocity buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    /// Rate used by the most recent step.
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(schedule: LrSchedule, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::Invalid {
                op: "optimizer",
                detail: format!("momentum must lie in [0, 1), got {momentum}"),
            });
        }
        Ok(OptimizerState {
            learning_rate: schedule.rate(0.0),
            momentum,
            schedule,
            velocity: HashMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One update `v ← μ·v + g`, `p ← p − lr(epoch)·v` over every unfrozen
/// parameter. Frozen parameters are left untouched.
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    epoch: f64,
) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| !p.frozen && !p.has_grad) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let lr = T::of(state.schedule.rate(epoch));
    let mu = T::of(state.momentum);
    state.learning_rate = lr.as_f64();
    for p in store.params_mut().iter_mut().filter(|p| !p.frozen) {
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![T::zero(); p.value.len()]);
        for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
            *vel = mu * *vel + *g;
            *w = *w - lr * *vel;
        }
        if !p.value.is_finite() {
            return Err(TensorError::NonFinite { op: "sgd_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepped_schedule_hits_both_endpoints() {
        let s = LrSchedule::stepped(1e-3, 2.5e-5, 30, 4).unwrap();
        let bp = s.breakpoints();
        assert_eq!(bp.len(), 4);
        assert_eq!(bp.iter().map(|b| b.0).collect::<Vec<_>>(), vec![0, 7, 15, 22]);
        assert!((bp[0].1 - 1e-3).abs() < 1e-15);
        assert!((bp[3].1 - 2.5e-5).abs() < 1e-15);
        assert_eq!(s.rate(0.0), 1e-3);
        assert_eq!(s.rate(29.0), bp[3].1);
        assert_eq!(s.rate(8.0), bp[1].1);
        // Monotone decreasing.
        assert!(bp.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn linear_schedule_interpolates() {
        let s = LrSchedule::new(vec![(0, 1.0), (10, 0.5)], Interpolation::Linear).unwrap();
        assert!((s.rate(5.0) - 0.75).abs() < 1e-12);
        assert_eq!(s.rate(20.0), 0.5);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(vec![], Interpolation::Step).is_err());
        assert!(LrSchedule::new(vec![(0, 1.0), (0, 0.5)], Interpolation::Step).is_err());
        assert!(LrSchedule::new(vec![(0, 1.0), (3, 0.0)], Interpolation::Step).is_err());
        assert!(OptimizerState::<f64>::new(LrSchedule::constant(0.1).unwrap(), 1.0).is_err());
    }
}
