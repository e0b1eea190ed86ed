//! Training orchestration: source pretraining, adversarial adaptation with
//! any of the three mapping losses, target evaluation and method comparison.

mod eval;
mod matrix;

pub use eval::{evaluate_target, predict, EvalReport};
pub use matrix::{run_method_matrix, run_oracle, MatrixRow, MethodComparison, SOURCE_ONLY};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{self, Domain, DomainBatch, LossKind, LossValue};
use crate::models::{ClassifierHead, Discriminator, Encoder, Module, TyingPlan};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingLoss {
    Minimax,
    Gan,
    Confusion,
}

impl fmt::Display for MappingLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingLoss::Minimax => "minimax",
            MappingLoss::Gan => "gan",
            MappingLoss::Confusion => "confusion",
        })
    }
}

impl FromStr for MappingLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "minimax" => Ok(MappingLoss::Minimax),
            "gan" => Ok(MappingLoss::Gan),
            "confusion" => Ok(MappingLoss::Confusion),
            other => Err(Error::config(format!(
                "unknown mapping loss {other:?}; expected minimax, gan or confusion"
            ))),
        }
    }
}

/// One point in the design space of adversarial adaptation. The base model
/// is always discriminative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptMethod {
    pub tying: TyingPlan,
    pub mapping_loss: MappingLoss,
    pub trains_source_mapping: bool,
}

impl AdaptMethod {
    /// Untied weights, inverted-label GAN loss, frozen source.
    pub fn adda() -> Self {
        AdaptMethod {
            tying: TyingPlan::AllUntied,
            mapping_loss: MappingLoss::Gan,
            trains_source_mapping: false,
        }
    }

    /// Shared weights, minimax loss.
    pub fn gradient_reversal() -> Self {
        AdaptMethod {
            tying: TyingPlan::AllShared,
            mapping_loss: MappingLoss::Minimax,
            trains_source_mapping: true,
        }
    }

    /// Shared weights, confusion loss.
    pub fn domain_confusion() -> Self {
        AdaptMethod {
            tying: TyingPlan::AllShared,
            mapping_loss: MappingLoss::Confusion,
            trains_source_mapping: true,
        }
    }

    /// The preset whose mapping loss is `loss`.
    pub fn preset_for(loss: MappingLoss) -> Self {
        match loss {
            MappingLoss::Minimax => Self::gradient_reversal(),
            MappingLoss::Gan => Self::adda(),
            MappingLoss::Confusion => Self::domain_confusion(),
        }
    }

    /// The three implemented methods, in comparison-table order.
    pub fn presets() -> Vec<Self> {
        vec![Self::gradient_reversal(), Self::domain_confusion(), Self::adda()]
    }

    /// Rejects combinations outside the implemented design space: the GAN
    /// loss adapts only the target mapping against a fixed source, so it needs
    /// untied layers; minimax and confusion move both mappings.
    pub fn validate(&self) -> Result<()> {
        match self.mapping_loss {
            MappingLoss::Gan => {
                if self.tying.is_all_shared() {
                    return Err(Error::config(
                        "gan mapping loss requires untied (or partially tied) weights; got tying = shared",
                    ));
                }
                if self.trains_source_mapping {
                    return Err(Error::config(
                        "gan mapping loss adapts only the target mapping; train_source_mapping must be false",
                    ));
                }
            }
            MappingLoss::Minimax | MappingLoss::Confusion => {}
        }
        if self.tying.is_all_shared() && !self.trains_source_mapping {
            return Err(Error::config(
                "shared weights update the source mapping too; train_source_mapping must be true",
            ));
        }
        Ok(())
    }

    /// Short name for reports: the mapping loss, plus the tying when it
    /// differs from the loss's preset.
    pub fn label(&self) -> String {
        if *self == Self::preset_for(self.mapping_loss) {
            self.mapping_loss.to_string()
        } else {
            format!("{}/{}", self.mapping_loss, self.tying)
        }
    }
}

/// Iteration counts, batch size and optimizer settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub pretrain_iters: usize,
    pub adapt_iters: usize,
    pub batch_size: usize,
    /// Source encoder and classifier during pretraining.
    pub source_opt: OptimizerKind,
    /// Target mapping during adaptation.
    pub mapping_opt: OptimizerKind,
    /// Replaces `mapping_opt` when the source mapping and classifier co-train.
    pub symmetric_mapping_opt: Option<OptimizerKind>,
    pub disc_opt: OptimizerKind,
    /// Discriminator steps per mapping step.
    pub d_steps: usize,
    /// Weight of the co-trained classification loss in symmetric modes.
    pub cls_weight: f32,
    /// Loss curves record one point every `log_every` iterations.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain_iters: 10_000,
            adapt_iters: 10_000,
            batch_size: 128,
            source_opt: OptimizerKind::sgd_default(),
            mapping_opt: OptimizerKind::adam_default(),
            symmetric_mapping_opt: None,
            disc_opt: OptimizerKind::adam_default(),
            d_steps: 1,
            cls_weight: 1.0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Short schedule sized for the synthetic shifts. A lone target mapping
    /// needs a larger step than a shared one, which also carries the
    /// classification loss.
    pub fn synthetic() -> Self {
        let adam = |lr| OptimizerKind::Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        TrainSchedule {
            pretrain_iters: 300,
            adapt_iters: 400,
            batch_size: 64,
            mapping_opt: adam(1e-3),
            symmetric_mapping_opt: Some(adam(1e-4)),
            disc_opt: adam(1e-3),
            ..TrainSchedule::default()
        }
    }

    /// The mapping optimizer `method` trains with.
    pub fn mapping_opt_for(&self, method: &AdaptMethod) -> OptimizerKind {
        match self.symmetric_mapping_opt {
            Some(opt) if method.trains_source_mapping => opt,
            _ => self.mapping_opt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_steps == 0 || self.log_every == 0 {
            return Err(Error::config(
                "batch_size, d_steps and log_every must all be positive",
            ));
        }
        Ok(())
    }
}

/// Loss values sampled during one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    pub stage: &'static str,
    pub kind: LossKind,
    pub points: Vec<(usize, f32)>,
}

impl LossCurve {
    fn new(stage: &'static str, kind: LossKind) -> Self {
        LossCurve {
            stage,
            kind,
            points: Vec::new(),
        }
    }
}

/// Shuffled epochs over `0..n`, reshuffled whenever exhausted.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub(crate) fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn finite(tape: &Tape, loss: LossValue, stage: &'static str, iteration: usize) -> Result<f32> {
    loss.finite_value(tape).map_err(|_| Error::Training {
        stage,
        iteration,
        msg: format!("{} loss is not finite", loss.kind),
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub curve: LossCurve,
    pub train_accuracy: f64,
}

/// Minimises the classification loss over the source encoder and classifier.
pub fn pretrain_source(
    encoder: &Encoder,
    head: &ClassifierHead,
    data: &LabeledDataset,
    sched: &TrainSchedule,
) -> Result<PretrainOutcome> {
    sched.validate()?;
    if data.num_classes() > head.num_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the classifier only {}",
            data.num_classes(),
            head.num_classes()
        )));
    }
    let mut opt = Optimizer::new(sched.source_opt, encoder.params().into_iter().chain(head.params()));
    let mut sampler = BatchSampler::new(data.len(), sched.seed, 100);
    let mut curve = LossCurve::new("pretrain", LossKind::Classification);
    for it in 0..sched.pretrain_iters {
        let (x, y) = data.batch(&sampler.next(sched.batch_size))?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let f = encoder.forward(&mut tape, x, true)?;
        let logits = head.forward(&mut tape, f, true)?;
        let loss = losses::classification_loss(&mut tape, logits, &y)?;
        let v = finite(&tape, loss, "pretrain", it)?;
        if it % sched.log_every == 0 {
            curve.points.push((it, v));
        }
        opt.zero_grad();
        tape.backward(loss.var)?;
        opt.step()?;
    }
    let train_accuracy = evaluate_target(encoder, head, data)?.overall;
    log::debug!(
        "pretrain: {} iterations, train accuracy {train_accuracy:.3}",
        sched.pretrain_iters
    );
    Ok(PretrainOutcome {
        curve,
        train_accuracy,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub curves: Vec<LossCurve>,
}

/// Checks that the encoders' storage sharing matches the plan.
fn check_tying(source: &Encoder, target: &Encoder, plan: &TyingPlan) -> Result<()> {
    let tied = plan.tied_layers(&source.layer_names())?;
    for (s, t) in source.layers().iter().zip(target.layers()) {
        let want = tied.iter().any(|n| n == s.name);
        if s.shares_storage_with(t) != want {
            return Err(Error::config(format!(
                "layer {} is {} but the tying plan ({plan}) says otherwise; apply the plan first",
                s.name,
                if want { "untied" } else { "tied" }
            )));
        }
    }
    Ok(())
}

const FEATURE_BATCH: usize = 256;

/// Source features for the whole dataset under a frozen encoder.
fn feature_bank(encoder: &Encoder, data: &LabeledDataset) -> Result<Tensor> {
    let n = data.len();
    let mut out = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(FEATURE_BATCH) {
        let idx: Vec<usize> = (start..(start + FEATURE_BATCH).min(n)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(data.images().select_rows(&idx)?);
        let f = encoder.forward(&mut tape, x, false)?;
        width = tape.shape(f)[1];
        out.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(vec![n, width], out)
}

/// Per-iteration callback: iteration index, source and target encoders, discriminator.
pub type AdaptObserver<'a> = dyn FnMut(usize, &Encoder, &Encoder, &Discriminator) + 'a;

/// Alternates discriminator and mapping updates.
///
/// Each iteration performs `d_steps` discriminator steps on the domain loss
/// with both encoders frozen, then one mapping step on the selected mapping
/// loss with the discriminator frozen. The source encoder and classifier are
/// only updated when the method trains the source mapping, in which case the
/// classification loss is added with weight `cls_weight`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_adversarial(
    source: &Encoder,
    head: &ClassifierHead,
    target: &Encoder,
    disc: &Discriminator,
    method: &AdaptMethod,
    src: &LabeledDataset,
    tgt: &UnlabeledDataset,
    sched: &TrainSchedule,
) -> Result<AdaptOutcome> {
    adapt_adversarial_observed(source, head, target, disc, method, src, tgt, sched, &mut |_, _, _, _| {})
}

/// [`adapt_adversarial`] with a callback after every iteration.
#[allow(clippy::too_many_arguments)]
pub fn adapt_adversarial_observed(
    source: &Encoder,
    head: &ClassifierHead,
    target: &Encoder,
    disc: &Discriminator,
    method: &AdaptMethod,
    src: &LabeledDataset,
    tgt: &UnlabeledDataset,
    sched: &TrainSchedule,
    observer: &mut AdaptObserver<'_>,
) -> Result<AdaptOutcome> {
    method.validate()?;
    sched.validate()?;
    check_tying(source, target, &method.tying)?;

    let symmetric = method.trains_source_mapping;
    let mut d_opt = Optimizer::new(sched.disc_opt, disc.params());
    let mapping_params = if symmetric {
        target
            .params()
            .into_iter()
            .chain(source.params())
            .chain(head.params())
            .collect::<Vec<_>>()
    } else {
        target.params()
    };
    let mut m_opt = Optimizer::new(sched.mapping_opt_for(method), mapping_params);

    // with an untied, frozen source the source features never change
    let bank = if !symmetric && method.tying == TyingPlan::AllUntied {
        Some(feature_bank(source, src)?)
    } else {
        None
    };

    let mut src_sampler = BatchSampler::new(src.len(), sched.seed, 200);
    let mut tgt_sampler = BatchSampler::new(tgt.len(), sched.seed, 201);
    let mut d_curve = LossCurve::new("adapt", LossKind::Discriminator);
    let mapping_kind = match method.mapping_loss {
        MappingLoss::Minimax => LossKind::MinimaxMapping,
        MappingLoss::Gan => LossKind::GanMapping,
        MappingLoss::Confusion => LossKind::ConfusionMapping,
    };
    let mut m_curve = LossCurve::new("adapt", mapping_kind);
    let mut cls_curve = LossCurve::new("adapt", LossKind::Classification);

    // source features on `tape`, trainable only in symmetric modes
    let source_features = |tape: &mut Tape, idx: &[usize], trainable: bool| -> Result<Var> {
        match &bank {
            Some(b) => Ok(tape.constant(b.select_rows(idx)?)),
            None => {
                let x = tape.constant(src.images().select_rows(idx)?);
                source.forward(tape, x, trainable)
            }
        }
    };

    for it in 0..sched.adapt_iters {
        let log_now = it % sched.log_every == 0;
        let s_idx = src_sampler.next(sched.batch_size);
        let t_idx = tgt_sampler.next(sched.batch_size);

        let mut tape = Tape::new();
        let xt = tape.constant(tgt.batch(&t_idx)?);
        // one forward per domain serves every loss below; the discriminator
        // step sees detached copies
        let ft = target.forward(&mut tape, xt, true)?;
        let fs = source_features(&mut tape, &s_idx, symmetric)?;

        for k in 0..sched.d_steps {
            let (fs_d, ft_d) = if k == 0 {
                (tape.detach(fs), tape.detach(ft))
            } else {
                let s2 = src_sampler.next(sched.batch_size);
                let t2 = tgt_sampler.next(sched.batch_size);
                let fs = source_features(&mut tape, &s2, false)?;
                let fs = tape.detach(fs);
                let x2 = tape.constant(tgt.batch(&t2)?);
                let f2 = target.forward(&mut tape, x2, false)?;
                (fs, f2)
            };
            let d_loss = losses::discriminator_loss(&mut tape, fs_d, ft_d, disc, true)?;
            let v = finite(&tape, d_loss, "adapt", it)?;
            if log_now && k == 0 {
                d_curve.points.push((it, v));
            }
            d_opt.zero_grad();
            tape.backward(d_loss.var)?;
            d_opt.step()?;
        }

        // mapping step against the updated, frozen discriminator
        let mapping = match method.mapping_loss {
            MappingLoss::Gan => losses::mapping_loss_gan(&mut tape, ft, disc)?,
            MappingLoss::Minimax => losses::mapping_loss_minimax(&mut tape, fs, ft, disc)?,
            MappingLoss::Confusion => {
                let batches = [
                    DomainBatch::new(&tape, fs, Domain::Source)?,
                    DomainBatch::new(&tape, ft, Domain::Target)?,
                ];
                losses::mapping_loss_confusion(&mut tape, &batches, disc)?
            }
        };
        let mv = finite(&tape, mapping, "adapt", it)?;
        let mut total = mapping.var;
        if symmetric {
            let logits = head.forward(&mut tape, fs, true)?;
            let ys: Vec<usize> = s_idx.iter().map(|&i| src.labels()[i]).collect();
            let cls = losses::classification_loss(&mut tape, logits, &ys)?;
            let cv = finite(&tape, cls, "adapt", it)?;
            if log_now {
                cls_curve.points.push((it, cv));
            }
            let weighted = tape.scale(cls.var, sched.cls_weight);
            total = tape.add(total, weighted)?;
        }
        if log_now {
            m_curve.points.push((it, mv));
        }
        m_opt.zero_grad();
        tape.backward(total)?;
        m_opt.step()?;
        observer(it, source, target, disc);
    }

    let mut curves = vec![d_curve, m_curve];
    if symmetric {
        curves.push(cls_curve);
    }
    Ok(AdaptOutcome { curves })
}
