//! Classification, discriminator and mapping losses.
//!
//! Every expectation is a batch mean. Terms of the form `log D(f)` and
//! `log(1 - D(f))` are evaluated from the discriminator logit `z` as
//! `log_sigmoid(z)` and `log_sigmoid(-z)`, never by taking the log of a
//! sigmoid output.

use std::fmt;

use crate::error::{Error, Result};
use crate::models::Discriminator;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn flipped(self) -> Self {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

/// Features of one domain, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DomainBatch {
    features: Var,
    domain: Domain,
}

impl DomainBatch {
    pub fn new(tape: &Tape, features: Var, domain: Domain) -> Result<Self> {
        let s = tape.shape(features);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::contract(format!(
                "domain batch needs N×D features with N ≥ 1, got {s:?}"
            )));
        }
        Ok(DomainBatch { features, domain })
    }

    pub fn features(&self) -> Var {
        self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Discriminator,
    MinimaxMapping,
    GanMapping,
    ConfusionMapping,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Classification => "cls",
            LossKind::Discriminator => "adv_d",
            LossKind::MinimaxMapping => "adv_m_minimax",
            LossKind::GanMapping => "adv_m_gan",
            LossKind::ConfusionMapping => "adv_m_confusion",
        })
    }
}

/// A scalar loss on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub kind: LossKind,
}

impl LossValue {
    pub fn value(&self, tape: &Tape) -> f32 {
        tape.scalar(self.var)
    }

    pub fn finite_value(&self, tape: &Tape) -> Result<f32> {
        let v = self.value(tape);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("{} loss", self.kind)))
        }
    }
}

fn row_count(tape: &Tape, v: Var, what: &str) -> Result<usize> {
    let s = tape.shape(v);
    match s.first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::contract(format!("{what} batch is empty"))),
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<LossValue> {
    let n = row_count(tape, logits, "classification")?;
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let k = tape.shape(logits)[1];
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::contract(format!(
            "label {y} at index {i} outside [0, {k})"
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(LossValue {
        var: tape.neg(mean),
        kind: LossKind::Classification,
    })
}

/// `mean log D` and `mean log(1 - D)` over a column of logits.
fn mean_log_d(tape: &mut Tape, logits: Var) -> Var {
    let l = tape.log_sigmoid(logits);
    tape.mean(l)
}

fn mean_log_one_minus_d(tape: &mut Tape, logits: Var) -> Var {
    let neg = tape.neg(logits);
    let l = tape.log_sigmoid(neg);
    tape.mean(l)
}

/// Domain-classification loss from precomputed source and target logits.
pub fn discriminator_loss_from_logits(tape: &mut Tape, source_logits: Var, target_logits: Var) -> Result<LossValue> {
    row_count(tape, source_logits, "source")?;
    row_count(tape, target_logits, "target")?;
    let ls = mean_log_d(tape, source_logits);
    let lt = mean_log_one_minus_d(tape, target_logits);
    let total = tape.add(ls, lt)?;
    Ok(LossValue {
        var: tape.neg(total),
        kind: LossKind::Discriminator,
    })
}

/// `-mean log D(source) - mean log(1 - D(target))`. `train_discriminator`
/// decides whether the discriminator's parameters receive gradient.
pub fn discriminator_loss(
    tape: &mut Tape,
    source_feats: Var,
    target_feats: Var,
    d: &Discriminator,
    train_discriminator: bool,
) -> Result<LossValue> {
    row_count(tape, source_feats, "source")?;
    row_count(tape, target_feats, "target")?;
    let ls = d.forward(tape, source_feats, train_discriminator)?;
    let lt = d.forward(tape, target_feats, train_discriminator)?;
    discriminator_loss_from_logits(tape, ls, lt)
}

/// The exact negation of the discriminator loss.
pub fn mapping_loss_minimax_from_logits(tape: &mut Tape, source_logits: Var, target_logits: Var) -> Result<LossValue> {
    let d = discriminator_loss_from_logits(tape, source_logits, target_logits)?;
    Ok(LossValue {
        var: tape.neg(d.var),
        kind: LossKind::MinimaxMapping,
    })
}

pub fn mapping_loss_minimax(
    tape: &mut Tape,
    source_feats: Var,
    target_feats: Var,
    d: &Discriminator,
) -> Result<LossValue> {
    let d = discriminator_loss(tape, source_feats, target_feats, d, false)?;
    Ok(LossValue {
        var: tape.neg(d.var),
        kind: LossKind::MinimaxMapping,
    })
}

/// Inverted-label loss `-mean log D(target)`. Reads only target features.
pub fn mapping_loss_gan_from_logits(tape: &mut Tape, target_logits: Var) -> Result<LossValue> {
    row_count(tape, target_logits, "target")?;
    let lt = mean_log_d(tape, target_logits);
    Ok(LossValue {
        var: tape.neg(lt),
        kind: LossKind::GanMapping,
    })
}

pub fn mapping_loss_gan(tape: &mut Tape, target_feats: Var, d: &Discriminator) -> Result<LossValue> {
    row_count(tape, target_feats, "target")?;
    let lt = d.forward(tape, target_feats, false)?;
    mapping_loss_gan_from_logits(tape, lt)
}

/// Cross-entropy of each domain's discriminator output against the uniform
/// distribution: `-Σ_d mean[½ log D + ½ log(1 - D)]`.
pub fn mapping_loss_confusion_from_logits(tape: &mut Tape, per_domain_logits: &[Var]) -> Result<LossValue> {
    let mut total: Option<Var> = None;
    for &logits in per_domain_logits {
        row_count(tape, logits, "confusion")?;
        let a = mean_log_d(tape, logits);
        let b = mean_log_one_minus_d(tape, logits);
        let s = tape.add(a, b)?;
        let half = tape.scale(s, 0.5);
        total = Some(match total {
            Some(t) => tape.add(t, half)?,
            None => half,
        });
    }
    let total = total.ok_or_else(|| Error::contract("confusion loss needs at least one domain"))?;
    Ok(LossValue {
        var: tape.neg(total),
        kind: LossKind::ConfusionMapping,
    })
}

pub fn mapping_loss_confusion(tape: &mut Tape, batches: &[DomainBatch], d: &Discriminator) -> Result<LossValue> {
    let mut logits = Vec::with_capacity(2);
    for domain in [Domain::Source, Domain::Target] {
        let parts: Vec<Var> = batches
            .iter()
            .filter(|b| b.domain == domain)
            .map(|b| b.features)
            .collect();
        if parts.is_empty() {
            return Err(Error::contract(format!(
                "confusion loss is missing a {domain:?} batch"
            )));
        }
        let feats = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        logits.push(d.forward(tape, feats, false)?);
    }
    mapping_loss_confusion_from_logits(tape, &logits)
}
