//! Nadam optimizer, Xavier initialization, and plateau schedules.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameter role. Weight decay applies to weights only; PELU parameters are
/// clamped positive after every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Pelu,
}

/// Named trainable parameter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub kind: ParamKind,
}

/// Ordered parameter collection for one model. Order is the build order and
/// is relied on by forward builders, the optimizer, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>, kind: ParamKind) {
        self.params.push(Param { name: name.into(), value, kind });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.params.iter().map(|p| p.kind).collect()
    }

    pub fn values_f64(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value.mapv(|v| v as f64)).collect()
    }
}

/// Floor applied to PELU a/b after each optimizer step.
pub const PELU_FLOOR: f64 = 1e-2;

/// Nadam state: Nesterov-weighted first moment with bias-corrected second
/// moment, fixed beta schedule.
#[derive(Debug, Clone)]
pub struct NadamState<F: Scalar> {
    pub step: u64,
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> NadamState<F> {
    pub fn new(lr: F) -> Self {
        NadamState {
            step: 0,
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn drop_lr(&mut self, factor: F) {
        self.lr = self.lr / factor;
    }

    /// Apply one Nadam update. Weight decay is added to the gradient as an
    /// L2 term for `Weight` parameters only. PELU parameters are clamped to
    /// `PELU_FLOOR` afterwards. A non-finite gradient aborts the step with
    /// no mutation.
    pub fn step(
        &mut self,
        values: &mut [ArrayD<F>],
        kinds: &[ParamKind],
        grads: &[ArrayD<F>],
        weight_decay: F,
    ) -> Result<()> {
        if values.len() != grads.len() || values.len() != kinds.len() {
            return Err(Error::InvalidArgument(format!(
                "nadam_step: {} values, {} kinds, {} grads",
                values.len(),
                kinds.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let floor = F::from_f64(PELU_FLOOR);
        for i in 0..values.len() {
            let wd = if kinds[i] == ParamKind::Weight { weight_decay } else { F::zero() };
            let value = &mut values[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((p, g0), (mi, vi)) in value.iter_mut().zip(grads[i].iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = *g0 + wd * *p;
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let nesterov = b1 * m_hat + (F::one() - b1) * g / bc1;
                *p = *p - self.lr * nesterov / (v_hat.sqrt() + self.eps);
            }
            if kinds[i] == ParamKind::Pelu {
                value.mapv_inplace(|x| if x < floor { floor } else { x });
            }
        }
        Ok(())
    }
}

/// Zero-mean normal with variance 2/(fan_in + fan_out). Conv weights
/// `[k,k,Fin,Fout]` use k^2*Fin / k^2*Fout fans; dense `[Fin,Fout]` use
/// Fin / Fout. Deterministic for a fixed seed.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<ArrayD<f32>> {
    let (fan_in, fan_out) = match shape.len() {
        4 => {
            let k2 = shape[0] * shape[1];
            (k2 * shape[2], k2 * shape[3])
        }
        2 => (shape[0], shape[1]),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "xavier_init expects a conv or dense weight shape, got {shape:?}"
            )))
        }
    };
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!("zero fan in shape {shape:?}")));
    }
    let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    Ok(ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap())
}

/// Quantity monitored by a plateau schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monitor {
    /// Lower is better (validation loss).
    LossMin,
    /// Higher is better (validation accuracy).
    AccuracyMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    DropLr,
    Stop,
}

/// Improvement must beat the best-so-far by this margin to reset the streak.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

/// Drop-on-plateau / early-stopping schedule. The no-improvement streak is
/// not reset by a learning-rate drop, so a streak of `stop_patience` always
/// stops even if a drop fired earlier.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub monitor: Monitor,
    pub drop_patience: usize,
    pub stop_patience: usize,
    pub drop_factor: f64,
    best: Option<f64>,
    streak: usize,
}

impl PlateauSchedule {
    pub fn new(monitor: Monitor, drop_patience: usize, stop_patience: usize) -> Result<Self> {
        if stop_patience < drop_patience {
            return Err(Error::InvalidArgument(format!(
                "stop patience {stop_patience} < drop patience {drop_patience}"
            )));
        }
        Ok(PlateauSchedule {
            monitor,
            drop_patience,
            stop_patience,
            drop_factor: 10.0,
            best: None,
            streak: 0,
        })
    }

    pub fn update(&mut self, metric: f64) -> Action {
        let improved = match self.best {
            None => true,
            Some(best) => match self.monitor {
                Monitor::LossMin => metric < best - IMPROVEMENT_EPS,
                Monitor::AccuracyMax => metric > best + IMPROVEMENT_EPS,
            },
        };
        if improved {
            self.best = Some(metric);
            self.streak = 0;
            return Action::Continue;
        }
        self.streak += 1;
        if self.streak >= self.stop_patience {
            Action::Stop
        } else if self.drop_patience > 0 && self.streak % self.drop_patience == 0 {
            Action::DropLr
        } else {
            Action::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
