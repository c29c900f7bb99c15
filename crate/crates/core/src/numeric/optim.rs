use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{CpscError, Result};

/// A trainable tensor with its gradient and optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    /// Optimizer state, lazily shaped like `value` on the first step.
    pub state: Vec<Tensor2D>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor2D) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor2D::zeros(r, c),
            state: Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns a fixed, ordered list of parameter blocks.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamBlock>;
    fn params_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    #[serde(rename = "adagrad")]
    AdaGrad {
        lr: f64,
        #[serde(default = "default_adagrad_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_adagrad_eps() -> f64 {
    1e-10
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn adagrad(lr: f64) -> Self {
        Self::AdaGrad {
            lr,
            eps: default_adagrad_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } | Self::AdaGrad { lr, .. } => lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
            Self::AdaGrad { .. } => "adagrad",
        }
    }

    /// Same optimizer family with the library-default hyperparameters.
    pub fn from_name(name: &str, lr: f64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::sgd(lr)),
            "adam" => Ok(Self::adam(lr)),
            "adagrad" => Ok(Self::adagrad(lr)),
            other => Err(CpscError::Config(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CpscError::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        match *self {
            Self::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => Err(
                CpscError::Config(format!("momentum must be in [0,1), got {momentum}")),
            ),
            Self::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(CpscError::Config("invalid Adam hyperparameters".into()))
            }
            Self::AdaGrad { eps, .. } if eps <= 0.0 => {
                Err(CpscError::Config("AdaGrad eps must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn slots(&self) -> usize {
        match *self {
            Self::Sgd { momentum, .. } if momentum > 0.0 => 1,
            Self::Sgd { .. } => 0,
            Self::Adam { .. } => 2,
            Self::AdaGrad { .. } => 1,
        }
    }
}

/// First-order optimizer; owns only the step counter; per-parameter state
/// lives in each [`ParamBlock`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every block. Grads are left untouched.
    ///
    /// If any gradient entry is non-finite nothing is modified.
    pub fn step(&mut self, params: &mut [&mut ParamBlock]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(CpscError::Numeric(format!(
                "non-finite gradient in block `{}`",
                p.name
            )));
        }
        self.steps += 1;
        let t = self.steps as f64;
        let slots = self.kind.slots();
        for p in params.iter_mut() {
            if p.state.len() != slots {
                let (r, c) = p.value.shape();
                p.state = vec![Tensor2D::zeros(r, c); slots];
            }
            let ParamBlock {
                value, grad, state, ..
            } = &mut **p;
            let w = value.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    if momentum > 0.0 {
                        let v = state[0].data_mut();
                        for i in 0..w.len() {
                            v[i] = momentum * v[i] + g[i];
                            w[i] -= lr * v[i];
                        }
                    } else {
                        for i in 0..w.len() {
                            w[i] -= lr * g[i];
                        }
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (m_slot, v_slot) = state.split_at_mut(1);
                    let m = m_slot[0].data_mut();
                    let v = v_slot[0].data_mut();
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::AdaGrad { lr, eps } => {
                    let acc = state[0].data_mut();
                    for i in 0..w.len() {
                        acc[i] += g[i] * g[i];
                        w[i] -= lr * g[i] / (acc[i].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
