//! The velocity-field abstraction shared by the learned network, the
//! closed-form oracle and the test fields used by the verification code.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A class label or the null ("no prompt") condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Label(usize),
    Null,
}

/// Map `(x, t, condition) -> velocity`, with `t = 1` the noise end and
/// `t = 0` the data end. Velocities point toward data.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn num_labels(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn num_labels(&self) -> usize {
        (**self).num_labels()
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        (**self).velocity(x, t, cond)
    }
}

/// Wraps a field and counts every evaluation.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_labels(&self) -> usize {
        self.inner.num_labels()
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x, t, cond)
    }
}
