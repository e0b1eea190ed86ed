use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{ClassifierHead, Encoder};
use crate::tensor::{Tape, Tensor};

const EVAL_BATCH: usize = 256;

/// Accuracy summary on a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    /// Per-class recall; `NaN` for classes with no examples.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() || labels.is_empty() {
            return Err(Error::contract(format!(
                "need equally many labels and predictions, got {} and {}",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::contract(format!(
                    "class index out of range for {num_classes} classes: label {y}, prediction {p}"
                )));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Ok(EvalReport {
            overall: correct as f64 / labels.len() as f64,
            per_class,
            confusion,
        })
    }

    /// Mean recall over classes that have examples.
    pub fn mean_class_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.per_class.iter().copied().filter(|v| !v.is_nan()).collect();
        present.iter().sum::<f64>() / present.len().max(1) as f64
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }
}

fn argmax(row: &[f32]) -> usize {
    // strict comparison keeps the lowest index on ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class for every image in an `N×1×28×28` tensor.
pub fn predict(encoder: &Encoder, head: &ClassifierHead, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(images.select_rows(&idx)?);
        let f = encoder.forward(&mut tape, x, false)?;
        let logits = head.forward(&mut tape, f, false)?;
        let v = tape.value(logits);
        v.ensure_finite("classifier logits")?;
        out.extend(v.data().chunks(head.num_classes()).map(argmax));
    }
    Ok(out)
}

/// Classifies `data` with `encoder` followed by `head`.
pub fn evaluate_target(encoder: &Encoder, head: &ClassifierHead, data: &LabeledDataset) -> Result<EvalReport> {
    if data.num_classes() > head.num_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the classifier only {}",
            data.num_classes(),
            head.num_classes()
        )));
    }
    let predictions = predict(encoder, head, data.images())?;
    EvalReport::from_predictions(data.labels(), &predictions, head.num_classes())
}
