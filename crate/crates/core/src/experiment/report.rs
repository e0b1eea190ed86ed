use std::fmt::Write as _;
use std::path::Path;

use crate::adaptation::{EvalReport, LossCurve};
use crate::error::Result;
use crate::util::write_atomic;

/// Everything one command learned about one model on one split.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub shift: String,
    pub method: String,
    /// Text form of the configuration that produced this run.
    pub config_echo: String,
    /// `(dataset name, sha256)` for every dataset touched.
    pub fingerprints: Vec<(String, String)>,
    pub curves: Vec<LossCurve>,
    /// `None` when the run failed before evaluation.
    pub eval: Option<EvalReport>,
    /// `(stage, seconds)`
    pub timings: Vec<(String, f64)>,
    pub converged: bool,
}

/// Three decimals, `nan` for missing values.
fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.3}")
    }
}

fn summary_header(classes: usize) -> String {
    let mut h = "shift,method,overall_acc,mean_class_acc".to_string();
    for k in 0..classes {
        let _ = write!(h, ",class_{k}");
    }
    h.push_str(",converged\n");
    h
}

fn summary_row(r: &RunReport, classes: usize) -> String {
    let mut row = format!("{},{}", r.shift, r.method);
    match &r.eval {
        Some(e) => {
            let _ = write!(row, ",{},{}", num(e.overall), num(e.mean_class_accuracy()));
            for k in 0..classes {
                let _ = write!(row, ",{}", num(e.per_class.get(k).copied().unwrap_or(f64::NAN)));
            }
        }
        None => {
            for _ in 0..classes + 2 {
                row.push_str(",nan");
            }
        }
    }
    let _ = writeln!(row, ",{}", r.converged);
    row
}

fn classes_of<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> usize {
    reports
        .into_iter()
        .filter_map(|r| r.eval.as_ref().map(EvalReport::num_classes))
        .max()
        .unwrap_or(0)
}

/// `shift,method,overall_acc,...` with one row per report.
pub fn summary_csv(reports: &[RunReport]) -> String {
    let classes = classes_of(reports);
    let mut out = summary_header(classes);
    for r in reports {
        out.push_str(&summary_row(r, classes));
    }
    out
}

pub fn per_class_csv(e: &EvalReport) -> String {
    let mut out = "class,accuracy,count\n".to_string();
    for (k, (acc, row)) in e.per_class.iter().zip(&e.confusion).enumerate() {
        let _ = writeln!(out, "{k},{},{}", num(*acc), row.iter().sum::<usize>());
    }
    out
}

/// `confusion[true][predicted]` with a `pred_j` header; row `i` is true class `i`.
pub fn confusion_csv(e: &EvalReport) -> String {
    let k = e.num_classes();
    let header: Vec<String> = (0..k).map(|j| format!("pred_{j}")).collect();
    let mut out = header.join(",") + "\n";
    for row in &e.confusion {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn losses_csv(curves: &[LossCurve]) -> String {
    let mut out = "stage,iteration,kind,value\n".to_string();
    for c in curves {
        for &(it, v) in &c.points {
            let _ = writeln!(out, "{},{it},{},{}", c.stage, c.kind, num(v as f64));
        }
    }
    out
}

fn config_txt(r: &RunReport) -> String {
    let mut out = r.config_echo.clone();
    if !r.fingerprints.is_empty() {
        out.push_str("\n# dataset sha256\n");
        for (name, fp) in &r.fingerprints {
            let _ = writeln!(out, "# {name} {fp}");
        }
    }
    out
}

fn timings_txt(r: &RunReport) -> String {
    r.timings
        .iter()
        .map(|(stage, secs)| format!("{stage} {secs:.3}s\n"))
        .collect()
}

/// Writes `report.csv`, `per_class.csv`, `confusion.csv`, `losses.csv`,
/// plus `config.txt` (reparseable echo) and `timings.txt` into `dir`.
/// Wall-clock times stay out of the CSVs so reruns reproduce them byte for byte.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.csv"), summary_csv(std::slice::from_ref(report)).as_bytes())?;
    if let Some(e) = &report.eval {
        write_atomic(&dir.join("per_class.csv"), per_class_csv(e).as_bytes())?;
        write_atomic(&dir.join("confusion.csv"), confusion_csv(e).as_bytes())?;
    }
    write_atomic(&dir.join("losses.csv"), losses_csv(&report.curves).as_bytes())?;
    write_atomic(&dir.join("config.txt"), config_txt(report).as_bytes())?;
    write_atomic(&dir.join("timings.txt"), timings_txt(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    fn sample() -> RunReport {
        RunReport {
            shift: "synth-rot".into(),
            method: "gan".into(),
            config_echo: "shift = synth-rot\n".into(),
            fingerprints: vec![("src".into(), "ab".into())],
            curves: vec![LossCurve {
                stage: "adapt",
                kind: LossKind::GanMapping,
                points: vec![(0, 0.69314), (100, 1.5)],
            }],
            eval: Some(EvalReport::from_predictions(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap()),
            timings: vec![("adapt".into(), 1.25)],
            converged: true,
        }
    }

    #[test]
    fn csv_layouts() {
        let r = sample();
        assert_eq!(
            summary_csv(&[r.clone()]),
            "shift,method,overall_acc,mean_class_acc,class_0,class_1,class_2,converged\n\
             synth-rot,gan,0.750,0.833,0.500,1.000,1.000,true\n"
        );
        let e = r.eval.as_ref().unwrap();
        assert_eq!(confusion_csv(e), "pred_0,pred_1,pred_2\n1,1,0\n0,1,0\n0,0,1\n");
        assert_eq!(per_class_csv(e), "class,accuracy,count\n0,0.500,2\n1,1.000,1\n2,1.000,1\n");
        assert_eq!(losses_csv(&r.curves), "stage,iteration,kind,value\nadapt,0,adv_m_gan,0.693\nadapt,100,adv_m_gan,1.500\n");
    }

    #[test]
    fn failed_runs_still_get_a_row() {
        let r = RunReport {
            eval: None,
            converged: false,
            ..sample()
        };
        let csv = summary_csv(&[sample(), r]);
        assert!(csv.ends_with("synth-rot,gan,nan,nan,nan,nan,nan,false\n"), "{csv}");
    }

    #[test]
    fn emit_writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&sample(), dir.path()).unwrap();
        for f in ["report.csv", "per_class.csv", "confusion.csv", "losses.csv", "config.txt", "timings.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let cfg = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert!(cfg.contains("# src ab"));
    }
}
