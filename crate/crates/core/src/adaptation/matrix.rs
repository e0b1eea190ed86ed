use super::{adapt_adversarial, pretrain_source, AdaptMethod, EvalReport, LossCurve, TrainSchedule};
use crate::data::{LabeledDataset, ShiftData};
use crate::error::Result;
use crate::models::{apply_tying_plan, init_target_from_source, ClassifierHead, Discriminator, Encoder, FEATURE_DIM};
use crate::models::{LeNetSpec, Role};

use std::time::Instant;

use super::evaluate_target;

pub const SOURCE_ONLY: &str = "source-only";

/// A method whose final accuracy falls this far below source-only is
/// reported as not converged.
pub const DIVERGENCE_MARGIN: f64 = 0.05;

/// One row of a comparison: target accuracy after adaptation.
#[derive(Clone, Debug)]
pub struct MatrixRow {
    pub method: String,
    pub report: Option<EvalReport>,
    /// Pretraining curve for the source-only row, adaptation curves otherwise.
    pub curves: Vec<LossCurve>,
    pub converged: bool,
    pub note: Option<String>,
    /// Wall-clock seconds for this row's training stage alone.
    pub seconds: f64,
}

impl MatrixRow {
    pub fn accuracy(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, |r| r.overall)
    }
}

#[derive(Clone, Debug)]
pub struct MethodComparison {
    pub source_train_accuracy: f64,
    pub rows: Vec<MatrixRow>,
}

impl MethodComparison {
    pub fn row(&self, method: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn source_only(&self) -> &MatrixRow {
        &self.rows[0]
    }
}

fn fresh_models(spec: LeNetSpec, classes: usize, seed: u64) -> Result<(Encoder, ClassifierHead)> {
    let enc = Encoder::lenet(spec, Role::Source, seed);
    let head = ClassifierHead::new(enc.feature_dim(), classes, seed)?;
    Ok((enc, head))
}

fn discriminator_for(spec: LeNetSpec, seed: u64) -> Discriminator {
    Discriminator::new(spec.hidden, FEATURE_DIM, seed)
}

/// Pretrains one source model, then adapts a copy of it with every method
/// and evaluates each on the labelled target. The first row is the
/// unadapted source model.
pub fn run_method_matrix(
    data: &ShiftData,
    methods: &[AdaptMethod],
    sched: &TrainSchedule,
    spec: LeNetSpec,
) -> Result<MethodComparison> {
    let classes = data.source.num_classes().max(data.target_eval.num_classes());
    let (encoder, head) = fresh_models(spec, classes, sched.seed)?;
    let t0 = Instant::now();
    let pre = pretrain_source(&encoder, &head, &data.source, sched)?;
    let pretrain_s = t0.elapsed().as_secs_f64();
    let baseline = evaluate_target(&encoder, &head, &data.target_eval)?;
    let base_acc = baseline.overall;
    log::info!("{SOURCE_ONLY}: target accuracy {base_acc:.3}");
    let mut rows = vec![MatrixRow {
        method: SOURCE_ONLY.to_string(),
        report: Some(baseline),
        curves: vec![pre.curve.clone()],
        converged: true,
        note: None,
        seconds: pretrain_s,
    }];
    for method in methods {
        let label = method.label();
        let t = Instant::now();
        let outcome = adapt_one(&encoder, &head, method, data, sched, spec);
        let seconds = t.elapsed().as_secs_f64();
        let row = match outcome {
            Ok((report, curves)) => {
                let acc = report.overall;
                let converged = acc.is_finite() && acc >= base_acc - DIVERGENCE_MARGIN;
                log::info!("{label}: target accuracy {acc:.3}");
                MatrixRow {
                    method: label,
                    report: Some(report),
                    curves,
                    converged,
                    note: (!converged).then(|| format!("accuracy {acc:.3} below source-only {base_acc:.3}")),
                    seconds,
                }
            }
            Err(e) => {
                log::warn!("{label}: {e}");
                MatrixRow {
                    method: label,
                    report: None,
                    curves: Vec::new(),
                    converged: false,
                    note: Some(e.to_string()),
                    seconds,
                }
            }
        };
        rows.push(row);
    }
    Ok(MethodComparison {
        source_train_accuracy: pre.train_accuracy,
        rows,
    })
}

fn adapt_one(
    encoder: &Encoder,
    head: &ClassifierHead,
    method: &AdaptMethod,
    data: &ShiftData,
    sched: &TrainSchedule,
    spec: LeNetSpec,
) -> Result<(EvalReport, Vec<LossCurve>)> {
    let source = encoder.deep_copy();
    let head = head.deep_copy();
    let mut target = init_target_from_source(&source);
    apply_tying_plan(&source, &mut target, &method.tying)?;
    let disc = discriminator_for(spec, sched.seed);
    let outcome = adapt_adversarial(&source, &head, &target, &disc, method, &data.source, &data.target, sched)?;
    Ok((evaluate_target(&target, &head, &data.target_eval)?, outcome.curves))
}

/// Trains on the first half of a labelled set and scores the second half.
/// On the target domain this bounds what any adaptation could reach.
pub fn run_oracle(data: &LabeledDataset, sched: &TrainSchedule, spec: LeNetSpec) -> Result<EvalReport> {
    let n = data.len();
    let half = n / 2;
    let train = data.subset(&(0..half).collect::<Vec<_>>())?;
    let test = data.subset(&(half..n).collect::<Vec<_>>())?;
    let (encoder, head) = fresh_models(spec, data.num_classes(), sched.seed)?;
    pretrain_source(&encoder, &head, &train, sched)?;
    evaluate_target(&encoder, &head, &test)
}
