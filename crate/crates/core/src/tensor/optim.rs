use std::fmt;
use std::str::FromStr;

use super::{dedup_params, Param};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    /// Defaults used for source pretraining.
    pub fn sgd_default() -> Self {
        OptimizerKind::SgdMomentum {
            lr: 0.01,
            momentum: 0.9,
        }
    }

    /// Defaults used for adversarial stages.
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            OptimizerKind::SgdMomentum { lr, momentum } => write!(f, "sgd(lr={lr}, momentum={momentum})"),
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                write!(f, "adam(lr={lr}, beta1={beta1}, beta2={beta2}, eps={eps:e})")
            }
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    /// Parses `sgd(lr=.., momentum=..)` or `adam(lr=.., beta1=.., beta2=.., eps=..)`.
    /// Omitted settings keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: String| Error::config(format!("optimizer {s:?}: {msg}"));
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => {
                let args = rest
                    .strip_suffix(')')
                    .ok_or_else(|| bad("missing closing parenthesis".into()))?;
                (name.trim(), args)
            }
            None => (s, ""),
        };
        let mut kind = match name {
            "sgd" => Self::sgd_default(),
            "adam" => Self::adam_default(),
            other => return Err(bad(format!("unknown kind {other:?}; expected sgd or adam"))),
        };
        for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            let (key, value) = arg
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {arg:?}")))?;
            let value: f32 = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("{} is not a number: {:?}", key.trim(), value.trim())))?;
            let slot = match (&mut kind, key.trim()) {
                (OptimizerKind::SgdMomentum { lr, .. }, "lr") | (OptimizerKind::Adam { lr, .. }, "lr") => lr,
                (OptimizerKind::SgdMomentum { momentum, .. }, "momentum") => momentum,
                (OptimizerKind::Adam { beta1, .. }, "beta1") => beta1,
                (OptimizerKind::Adam { beta2, .. }, "beta2") => beta2,
                (OptimizerKind::Adam { eps, .. }, "eps") => eps,
                (_, other) => return Err(bad(format!("unknown setting {other:?} for {name}"))),
            };
            *slot = value;
        }
        Ok(kind)
    }
}

/// First-order optimizer over a fixed parameter list.
///
/// Aliased parameters (tied layers) are collapsed to one entry so shared
/// storage is updated exactly once per step.
pub struct Optimizer {
    kind: OptimizerKind,
    params: Vec<Param>,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: impl IntoIterator<Item = Param>) -> Self {
        let params = dedup_params(params);
        let first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => params.iter().map(|p| vec![0.0; p.len()]).collect(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            params,
            first,
            second,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Param::zero_grad);
    }

    /// Applies one update from the accumulated gradients.
    ///
    /// Fails without touching any parameter if one of them has no gradient.
    pub fn step(&mut self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| p.value().grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter #{i} (shape {:?}) has no gradient",
                self.params[i].shape()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in self.params.iter().enumerate() {
            let mut value = p.value_mut();
            let (grad, data) = value.grad_and_data_mut();
            let grad = grad.expect("checked above");
            match self.kind {
                OptimizerKind::SgdMomentum { lr, momentum } => {
                    let vel = &mut self.first[i];
                    for ((w, &g), v) in data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &g), mi), vi) in
                        data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
