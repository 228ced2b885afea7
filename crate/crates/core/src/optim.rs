//! Step-decay learning-rate schedules and first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `lr(step) = initial_lr * decay_factor^floor(step / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl SgdSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, decay_every: u64) -> Result<Self> {
        let s = Self {
            initial_lr,
            decay_factor,
            decay_every,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Usage(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Usage(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Usage("decay_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        let k = (step / self.decay_every) as i32;
        self.initial_lr * self.decay_factor.powi(k)
    }

    /// Encoder schedule: 0.001, ×0.9 every 100 steps.
    pub fn encoder() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_factor: 0.9,
            decay_every: 100,
        }
    }

    /// Graph network schedule: 0.001, ×0.1 every 4000 steps.
    pub fn graph() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 4000,
        }
    }

    /// Same total decay over `new_span` steps as this schedule has over
    /// `old_span` steps.
    pub fn compressed(&self, old_span: u64, new_span: u64) -> Self {
        let every = ((self.decay_every as f64) * new_span as f64 / old_span as f64).round() as u64;
        Self {
            decay_every: every.max(1),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Usage(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Optimizer over a fixed parameter subset.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    params: Vec<ParamId>,
    adam: Vec<AdamState>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let adam = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => params
                .iter()
                .map(|&id| {
                    let n = store.get(id).numel();
                    AdamState {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    }
                })
                .collect(),
        };
        Self {
            kind,
            params,
            adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for &id in &self.params {
            if store.get(id).grad().is_none() {
                return Err(Error::Usage(format!(
                    "parameter {} has no accumulated gradient",
                    store.name(id)
                )));
            }
        }
        for (k, &id) in self.params.iter().enumerate() {
            let t = store.get_mut(id);
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(grad.iter()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let st = &mut self.adam[k];
                    st.t += 1;
                    let (b1, b2) = (self.beta1, self.beta2);
                    let step = lr / (1.0 - b1.powi(st.t));
                    let inv_bc2 = 1.0 / (1.0 - b2.powi(st.t));
                    let state = st.m.iter_mut().zip(st.v.iter_mut());
                    for ((w, g), (m, v)) in data.iter_mut().zip(grad.iter()).zip(state) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / ((*v * inv_bc2).sqrt() + self.eps);
                    }
                }
            }
            t.clear_grad();
        }
        Ok(())
    }
}

/// One plain SGD update of `params` at `lr = schedule.lr(step)`.
pub fn sgd_step(
    store: &mut ParamStore,
    params: &[ParamId],
    schedule: &SgdSchedule,
    step: u64,
) -> Result<()> {
    let mut opt = Optimizer::new(OptimizerKind::Sgd, store, params.to_vec());
    opt.step(store, schedule.lr(step))
}
