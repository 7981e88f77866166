//! Adam and learning-rate schedules.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::tape::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`, with moments shaped like `params`.
    pub fn new(params: &[Array2<T>]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Array2<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with step size `lr`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array2<T>>,
        grads: &[Array2<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} grads",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        let mut count = 0;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::Shape(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            });
            count += 1;
        }
        if count != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {count} params",
                self.m.len()
            )));
        }
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay to `alpha * lr0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub lr0: f64,
    pub warmup: usize,
    pub alpha: f64,
    pub max_steps: usize,
}

impl Default for WarmupCosine {
    fn default() -> Self {
        WarmupCosine {
            lr0: 1e-3,
            warmup: 500,
            alpha: 0.05,
            max_steps: 50_000,
        }
    }
}

impl WarmupCosine {
    /// Learning rate at step `s` (1-based).
    ///
    /// `s <= W`: `lr0 s / W`; afterwards
    /// `lr0 (alpha + (1 - alpha)/2 (cos(pi (s - W)/(s_max - W)) + 1))`.
    pub fn lr(&self, s: usize) -> f64 {
        if s <= self.warmup {
            return self.lr0 * (s as f64 / self.warmup as f64);
        }
        let span = self.max_steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((s - self.warmup) as f64 / span).min(1.0);
        self.lr0 * (self.alpha + (1.0 - self.alpha) / 2.0 * ((PI * progress).cos() + 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.max_steps || !(self.lr0 > 0.0) || !(0.0..=1.0).contains(&self.alpha)
        {
            return Err(Error::InvalidArgument(format!(
                "bad learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }
}

/// `lr(s) = start (end / start)^(s / steps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialDecay {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl ExponentialDecay {
    pub fn lr(&self, s: usize) -> f64 {
        self.start * (self.end / self.start).powf(s as f64 / self.steps.max(1) as f64)
    }
}
