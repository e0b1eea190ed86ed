use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::report::{emit_report, summary_csv, RunReport};
use super::ExperimentConfig;
use crate::adaptation::{
    adapt_adversarial, evaluate_target, pretrain_source, run_method_matrix, AdaptMethod, SOURCE_ONLY,
};
use crate::data::{load_shift, DataPaths, ShiftData, ShiftKind};
use crate::error::{Error, Result};
use crate::models::{
    apply_tying_plan, init_target_from_source, ClassifierHead, Discriminator, Encoder, LeNetSpec, Module, Role,
};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};
use crate::util::write_atomic;

pub const SOURCE_CHECKPOINT: &str = "source.ckpt";
pub const TARGET_CHECKPOINT: &str = "target.ckpt";
pub const DISCRIMINATOR_CHECKPOINT: &str = "discriminator.ckpt";

const ENCODER: &str = "encoder";
const CLASSIFIER: &str = "classifier";
const DISCRIMINATOR: &str = "discriminator";

/// Which labelled set `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Split::Source),
            "target" => Ok(Split::Target),
            other => Err(Error::config(format!("unknown split {other:?}; expected source or target"))),
        }
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<ShiftData> {
    let paths = cfg.data.clone().unwrap_or_default();
    load_shift(&cfg.shift, &paths)
}

fn fingerprints(data: &ShiftData) -> Vec<(String, String)> {
    vec![
        (data.source.name().to_string(), data.source.fingerprint()),
        (data.target_eval.name().to_string(), data.target_eval.fingerprint()),
    ]
}

fn classes(data: &ShiftData) -> usize {
    data.source.num_classes().max(data.target_eval.num_classes())
}

fn model_checkpoint(encoder: &Encoder, head: &ClassifierHead) -> BTreeMap<String, Tensor> {
    let mut map = encoder.state_dict(ENCODER);
    map.extend(head.state_dict(CLASSIFIER));
    map
}

fn shape_of<'a>(map: &'a BTreeMap<String, Tensor>, key: &str) -> Result<&'a [usize]> {
    map.get(key)
        .map(Tensor::shape)
        .ok_or_else(|| Error::config(format!("checkpoint lacks tensor {key}")))
}

/// Rebuilds an encoder and classifier, taking layer widths from the stored shapes.
pub fn models_from_checkpoint(map: &BTreeMap<String, Tensor>, role: Role) -> Result<(Encoder, ClassifierHead)> {
    let conv1 = shape_of(map, "encoder.conv1.w")?[0];
    let conv2 = shape_of(map, "encoder.conv2.w")?[0];
    let hidden = shape_of(map, "encoder.fc.w")?[1];
    let classes = shape_of(map, "classifier.fc.w")?[1];
    let encoder = Encoder::lenet(LeNetSpec { conv1, conv2, hidden }, role, 0);
    encoder.load_state_dict(map, ENCODER)?;
    let head = ClassifierHead::new(hidden, classes, 0)?;
    head.load_state_dict(map, CLASSIFIER)?;
    Ok((encoder, head))
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Pretrains the source model; writes `source.ckpt` and a report scoring
/// the unadapted model on the target.
pub fn cmd_train_source(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let t0 = Instant::now();
    let data = load_data(cfg)?;
    let load_s = secs(t0);
    let encoder = Encoder::lenet(cfg.model, Role::Source, cfg.seed);
    let head = ClassifierHead::new(encoder.feature_dim(), classes(&data), cfg.seed)?;
    let t1 = Instant::now();
    let pre = pretrain_source(&encoder, &head, &data.source, &cfg.schedule)?;
    let train_s = secs(t1);
    let eval = evaluate_target(&encoder, &head, &data.target_eval)?;
    save_checkpoint(&out.join(SOURCE_CHECKPOINT), &model_checkpoint(&encoder, &head))?;
    let report = RunReport {
        shift: cfg.shift.kind.to_string(),
        method: SOURCE_ONLY.to_string(),
        config_echo: cfg.to_config_string(),
        fingerprints: fingerprints(&data),
        curves: vec![pre.curve],
        eval: Some(eval),
        timings: vec![("load".into(), load_s), ("pretrain".into(), train_s)],
        converged: true,
    };
    emit_report(&report, out)?;
    Ok(report)
}

/// Adapts a target encoder from a pretrained source checkpoint; writes the
/// target model and discriminator checkpoints plus a target report.
pub fn cmd_adapt(cfg: &ExperimentConfig, source_ckpt: &Path, out: &Path) -> Result<RunReport> {
    let map = load_checkpoint(source_ckpt).map_err(|e| match e {
        Error::NotFound { path, .. } => Error::NotFound {
            what: "source checkpoint",
            path,
        },
        other => other,
    })?;
    let (source, head) = models_from_checkpoint(&map, Role::Source)?;
    let t0 = Instant::now();
    let data = load_data(cfg)?;
    let load_s = secs(t0);
    if classes(&data) > head.num_classes() {
        return Err(Error::config(format!(
            "checkpoint classifier has {} classes but the data has {}",
            head.num_classes(),
            classes(&data)
        )));
    }
    let mut target = init_target_from_source(&source);
    apply_tying_plan(&source, &mut target, &cfg.method.tying)?;
    let disc = Discriminator::new(source.feature_dim(), crate::models::FEATURE_DIM, cfg.seed);
    let t1 = Instant::now();
    let outcome = adapt_adversarial(
        &source,
        &head,
        &target,
        &disc,
        &cfg.method,
        &data.source,
        &data.target,
        &cfg.schedule,
    )?;
    let adapt_s = secs(t1);
    let eval = evaluate_target(&target, &head, &data.target_eval)?;
    save_checkpoint(&out.join(TARGET_CHECKPOINT), &model_checkpoint(&target, &head))?;
    save_checkpoint(&out.join(DISCRIMINATOR_CHECKPOINT), &disc.state_dict(DISCRIMINATOR))?;
    let report = RunReport {
        shift: cfg.shift.kind.to_string(),
        method: cfg.method.label(),
        config_echo: cfg.to_config_string(),
        fingerprints: fingerprints(&data),
        curves: outcome.curves,
        eval: Some(eval),
        timings: vec![("load".into(), load_s), ("adapt".into(), adapt_s)],
        converged: true,
    };
    emit_report(&report, out)?;
    Ok(report)
}

/// Scores any encoder+classifier checkpoint on one split of a shift. Without
/// a config, the shift's defaults and `seed` pick the data.
pub fn cmd_eval(
    ckpt: &Path,
    shift: ShiftKind,
    split: Split,
    cfg: Option<&ExperimentConfig>,
    seed: u64,
    out: &Path,
) -> Result<RunReport> {
    let map = load_checkpoint(ckpt)?;
    let (encoder, head) = models_from_checkpoint(&map, Role::Target)?;
    let mut cfg = cfg.cloned().unwrap_or_else(|| ExperimentConfig::new(shift, seed));
    if cfg.shift.kind != shift {
        cfg.shift.kind = shift;
    }
    if cfg.data.is_none() && !shift.is_synthetic() {
        cfg.data = std::env::var_os(super::DATA_ROOT_ENV).map(|root| DataPaths {
            root: PathBuf::from(root),
            ..DataPaths::default()
        });
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let data = load_data(&cfg)?;
    let set = match split {
        Split::Source => &data.source,
        Split::Target => &data.target_eval,
    };
    let eval = evaluate_target(&encoder, &head, set)?;
    let report = RunReport {
        shift: shift.to_string(),
        method: format!("eval:{}", if split == Split::Source { "source" } else { "target" }),
        config_echo: cfg.to_config_string(),
        fingerprints: vec![(set.name().to_string(), set.fingerprint())],
        curves: Vec::new(),
        eval: Some(eval),
        timings: vec![("eval".into(), secs(t0))],
        converged: true,
    };
    emit_report(&report, out)?;
    Ok(report)
}

/// Runs source-only plus every preset method from one pretrained source
/// model. Writes `compare.csv` with one row per method, and a full report
/// per method under `out/<method>/`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunReport>> {
    let t0 = Instant::now();
    let data = load_data(cfg)?;
    let load_s = secs(t0);
    let methods = AdaptMethod::presets();
    let cmp = run_method_matrix(&data, &methods, &cfg.schedule, cfg.model)?;
    let pretrain_s = cmp.source_only().seconds;
    let reports: Vec<RunReport> = cmp
        .rows
        .iter()
        .map(|row| {
            let mut method_cfg = cfg.clone();
            if let Some(m) = methods.iter().find(|m| m.label() == row.method) {
                method_cfg.method = m.clone();
            }
            RunReport {
                shift: cfg.shift.kind.to_string(),
                method: row.method.clone(),
                config_echo: method_cfg.to_config_string(),
                fingerprints: fingerprints(&data),
                curves: row.curves.clone(),
                eval: row.report.clone(),
                timings: if row.method == SOURCE_ONLY {
                    vec![("load".into(), load_s), ("pretrain".into(), pretrain_s)]
                } else {
                    vec![("adapt".into(), row.seconds)]
                },
                converged: row.converged,
            }
        })
        .collect();
    for r in &reports {
        emit_report(r, &out.join(&r.method))?;
    }
    let notes: String = cmp
        .rows
        .iter()
        .filter_map(|r| r.note.as_ref().map(|n| format!("{}: {n}\n", r.method)))
        .collect();
    write_atomic(&out.join("notes.txt"), notes.as_bytes())?;
    write_atomic(&out.join("compare.csv"), summary_csv(&reports).as_bytes())?;
    Ok(reports)
}
