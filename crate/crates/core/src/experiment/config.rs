//! Line-based experiment configuration.
//!
//! ```text
//! shift = synth-rot
//! seed = 0
//!
//! [adapt]
//! loss = gan
//! tying = untied
//! ```
//!
//! Lines are `key = value` pairs grouped under `[section]` headers; `#`
//! starts a comment. Keys before the first header are top-level. Unknown
//! sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptation::{AdaptMethod, MappingLoss, TrainSchedule};
use crate::data::{DataPaths, ShiftKind, ShiftSpec};
use crate::error::{Error, Result};
use crate::models::{LeNetSpec, TyingPlan};
use crate::tensor::OptimizerKind;

/// Overrides `[data] root` when set.
pub const DATA_ROOT_ENV: &str = "ADDA_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub shift: ShiftSpec,
    pub method: AdaptMethod,
    pub schedule: TrainSchedule,
    pub model: LeNetSpec,
    /// Required for digit shifts only.
    pub data: Option<DataPaths>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Defaults for `shift` with every optional key unset.
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        let schedule = if kind.is_synthetic() {
            TrainSchedule::synthetic()
        } else {
            TrainSchedule::default()
        };
        ExperimentConfig {
            shift: ShiftSpec::new(kind, seed),
            method: AdaptMethod::adda(),
            schedule: TrainSchedule { seed, ..schedule },
            model: LeNetSpec::default(),
            data: None,
            output_dir: None,
            seed,
        }
    }

    /// Checks cross-field consistency and that every dataset file exists.
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.schedule.validate()?;
        if self.shift.kind.is_synthetic() {
            return Ok(());
        }
        let data = self.data.as_ref().ok_or_else(|| {
            Error::config(format!(
                "shift {} reads digit files: set `root` in [data] or {DATA_ROOT_ENV}",
                self.shift.kind
            ))
        })?;
        let files: Vec<&Path> = match self.shift.kind {
            ShiftKind::MnistToUsps | ShiftKind::UspsToMnist => vec![
                &data.mnist_images,
                &data.mnist_labels,
                &data.usps_images,
                &data.usps_labels,
            ],
            _ => vec![
                &data.svhn_images,
                &data.svhn_labels,
                &data.mnist_images,
                &data.mnist_labels,
            ],
        };
        for f in files {
            data.resolve(f)?;
        }
        Ok(())
    }

    /// Serialises every field; [`parse_config_str`] reads it back to an equal value.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let s = &self.shift;
        let _ = writeln!(out, "shift = {}", s.kind);
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(n) = s.source_cap {
            let _ = writeln!(out, "source_samples = {n}");
        }
        if let Some(n) = s.target_cap {
            let _ = writeln!(out, "target_samples = {n}");
        }
        let _ = writeln!(out, "\n[synthetic]\nclasses = {}\nrotation_deg = {}", s.classes, s.rotation_deg);
        let m = &self.model;
        let _ = writeln!(out, "\n[model]\nconv1 = {}\nconv2 = {}\nhidden = {}", m.conv1, m.conv2, m.hidden);
        let a = &self.method;
        let _ = writeln!(
            out,
            "\n[adapt]\nloss = {}\ntying = {}\ntrain_source_mapping = {}",
            a.mapping_loss, a.tying, a.trains_source_mapping
        );
        let t = &self.schedule;
        let _ = writeln!(
            out,
            "\n[schedule]\npretrain_iters = {}\nadapt_iters = {}\nbatch_size = {}\nd_steps = {}\ncls_weight = {}\nlog_every = {}",
            t.pretrain_iters, t.adapt_iters, t.batch_size, t.d_steps, t.cls_weight, t.log_every
        );
        let _ = writeln!(
            out,
            "\n[optim]\nsource = {}\nmapping = {}\ndiscriminator = {}",
            t.source_opt, t.mapping_opt, t.disc_opt
        );
        let _ = match t.symmetric_mapping_opt {
            Some(opt) => writeln!(out, "symmetric_mapping = {opt}"),
            None => writeln!(out, "symmetric_mapping = same"),
        };
        if let Some(d) = &self.data {
            let _ = writeln!(out, "\n[data]\nroot = {}", d.root.display());
            for (k, v) in [
                ("mnist_images", &d.mnist_images),
                ("mnist_labels", &d.mnist_labels),
                ("usps_images", &d.usps_images),
                ("usps_labels", &d.usps_labels),
                ("svhn_images", &d.svhn_images),
                ("svhn_labels", &d.svhn_labels),
            ] {
                let _ = writeln!(out, "{k} = {}", v.display());
            }
        }
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(out, "\n[output]\ndir = {}", dir.display());
        }
        out
    }
}

fn line_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("line {line}: {msg}"))
}

fn typed<T: FromStr>(line: usize, key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| line_err(line, format!("`{key}` expects {what}, got {value:?}")))
}

/// Re-labels an error from a domain parser with the line it came from.
fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) => line_err(line, msg),
        other => line_err(line, other),
    })
}

/// Parses a configuration file; see the module docs for the format.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "config file",
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    parse_config_str(&text)
}

/// Parses configuration text, applies the data-root environment override,
/// and validates the result.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    let cfg = parse_with_root(text, env_root)?;
    cfg.validate()?;
    Ok(cfg)
}

/// `(line, value)` keyed by `section.key`.
type Entries = BTreeMap<String, (usize, String)>;

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["shift", "seed", "source_samples", "target_samples"]),
    ("synthetic", &["classes", "rotation_deg"]),
    ("model", &["conv1", "conv2", "hidden"]),
    ("adapt", &["loss", "tying", "train_source_mapping"]),
    (
        "schedule",
        &["pretrain_iters", "adapt_iters", "batch_size", "d_steps", "cls_weight", "log_every"],
    ),
    ("optim", &["source", "mapping", "symmetric_mapping", "discriminator"]),
    (
        "data",
        &[
            "root",
            "mnist_images",
            "mnist_labels",
            "usps_images",
            "usps_labels",
            "svhn_images",
            "svhn_labels",
        ],
    ),
    ("output", &["dir"]),
];

fn collect(text: &str) -> Result<Entries> {
    let mut section = String::new();
    let mut entries = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(line, format!("malformed section header {content:?}")))?
                .trim();
            if !KNOWN.iter().any(|(s, _)| *s == name) || name.is_empty() {
                let names: Vec<&str> = KNOWN.iter().map(|(s, _)| *s).filter(|s| !s.is_empty()).collect();
                return Err(line_err(
                    line,
                    format!("unknown section [{name}]; expected one of {}", names.join(", ")),
                ));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| line_err(line, format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let keys = KNOWN.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
        if !keys.contains(&key) {
            let place = if section.is_empty() {
                "at top level".to_string()
            } else {
                format!("in [{section}]")
            };
            return Err(line_err(
                line,
                format!("unknown key `{key}` {place}; expected one of {}", keys.join(", ")),
            ));
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if let Some((first, _)) = entries.get(&full) {
            return Err(line_err(line, format!("duplicate key `{full}` (first set on line {first})")));
        }
        entries.insert(full, (line, value.to_string()));
    }
    Ok(entries)
}

fn parse_with_root(text: &str, env_root: Option<PathBuf>) -> Result<ExperimentConfig> {
    let e = collect(text)?;
    let get = |k: &str| e.get(k).map(|(l, v)| (*l, v.as_str()));

    let (line, shift) = get("shift").ok_or_else(|| Error::config("missing required key `shift`"))?;
    let kind: ShiftKind = at_line(line, shift.parse())?;
    let seed = match get("seed") {
        Some((l, v)) => typed(l, "seed", v, "a non-negative integer")?,
        None => 0,
    };
    let mut cfg = ExperimentConfig::new(kind, seed);

    macro_rules! set {
        ($key:expr, $slot:expr, $what:expr) => {
            if let Some((l, v)) = get($key) {
                $slot = typed(l, $key, v, $what)?;
            }
        };
    }
    macro_rules! set_count {
        ($key:expr, $min:expr) => {
            match get($key) {
                Some((l, v)) => {
                    let n: usize = typed(l, $key, v, "a non-negative integer")?;
                    if n < $min {
                        return Err(line_err(l, format!("`{}` must be at least {}, got {n}", $key, $min)));
                    }
                    Some(n)
                }
                None => None,
            }
        };
    }
    cfg.shift.source_cap = set_count!("source_samples", 1);
    cfg.shift.target_cap = set_count!("target_samples", 1);
    if let Some(n) = set_count!("synthetic.classes", 2) {
        cfg.shift.classes = n;
    }
    set!("synthetic.rotation_deg", cfg.shift.rotation_deg, "a number");
    for (key, slot) in [
        ("model.conv1", &mut cfg.model.conv1),
        ("model.conv2", &mut cfg.model.conv2),
        ("model.hidden", &mut cfg.model.hidden),
    ] {
        if let Some(n) = set_count!(key, 1) {
            *slot = n;
        }
    }
    let s = &mut cfg.schedule;
    set!("schedule.pretrain_iters", s.pretrain_iters, "an integer");
    set!("schedule.adapt_iters", s.adapt_iters, "an integer");
    set!("schedule.batch_size", s.batch_size, "an integer");
    set!("schedule.d_steps", s.d_steps, "an integer");
    set!("schedule.cls_weight", s.cls_weight, "a number");
    set!("schedule.log_every", s.log_every, "an integer");
    for (key, slot) in [
        ("optim.source", &mut s.source_opt),
        ("optim.mapping", &mut s.mapping_opt),
        ("optim.discriminator", &mut s.disc_opt),
    ] {
        if let Some((l, v)) = get(key) {
            *slot = at_line(l, v.parse::<OptimizerKind>())?;
        }
    }
    match get("optim.symmetric_mapping") {
        // `same` reuses `mapping` in every mode
        Some((_, "same")) => s.symmetric_mapping_opt = None,
        Some((l, v)) => s.symmetric_mapping_opt = Some(at_line(l, v.parse::<OptimizerKind>())?),
        None => {}
    }
    if let Err(err) = cfg.schedule.validate() {
        let line = ["schedule.batch_size", "schedule.d_steps", "schedule.log_every"]
            .iter()
            .filter_map(|k| get(k))
            .find(|(_, v)| *v == "0")
            .map_or(0, |(l, _)| l);
        return Err(if line > 0 { line_err(line, err) } else { err });
    }

    // method: the loss picks a preset; explicit tying/train_source_mapping override it
    let loss_line = get("adapt.loss").map(|(l, _)| l);
    let loss = match get("adapt.loss") {
        Some((l, v)) => at_line(l, v.parse::<MappingLoss>())?,
        None => MappingLoss::Gan,
    };
    let mut method = AdaptMethod::preset_for(loss);
    if let Some((l, v)) = get("adapt.tying") {
        let plan: TyingPlan = at_line(l, v.parse())?;
        at_line(l, plan.tied_layers(&["conv1", "conv2", "fc"]))?;
        method.tying = plan;
    }
    set!("adapt.train_source_mapping", method.trains_source_mapping, "true or false");
    if let Err(err) = method.validate() {
        let line = get("adapt.tying")
            .or(get("adapt.train_source_mapping"))
            .map(|(l, _)| l)
            .or(loss_line);
        return Err(match line {
            Some(l) => line_err(l, err_msg(err)),
            None => err,
        });
    }
    cfg.method = method;

    let mut data: Option<DataPaths> = None;
    for key in KNOWN.iter().find(|(s, _)| *s == "data").map(|(_, k)| *k).unwrap_or(&[]) {
        if let Some((_, v)) = get(&format!("data.{key}")) {
            let d = data.get_or_insert_with(DataPaths::default);
            let p = PathBuf::from(v);
            match *key {
                "root" => d.root = p,
                "mnist_images" => d.mnist_images = p,
                "mnist_labels" => d.mnist_labels = p,
                "usps_images" => d.usps_images = p,
                "usps_labels" => d.usps_labels = p,
                "svhn_images" => d.svhn_images = p,
                _ => d.svhn_labels = p,
            }
        }
    }
    if let Some(root) = env_root {
        data.get_or_insert_with(DataPaths::default).root = root;
    }
    cfg.data = data;
    cfg.output_dir = get("output.dir").map(|(_, v)| PathBuf::from(v));
    Ok(cfg)
}

fn err_msg(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg = parse_with_root(text, None)?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn gan_untied_is_adda() {
        let cfg = parse("shift = synth-rot\n[adapt]\nloss = gan\ntying = untied\n").unwrap();
        assert_eq!(cfg.method, AdaptMethod::adda());
    }

    #[test]
    fn gan_with_shared_tying_is_rejected_with_line() {
        let err = parse("shift = synth-rot\n[adapt]\nloss = gan\ntying = shared\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn missing_shift_names_the_key() {
        let err = parse("seed = 3\n").unwrap_err().to_string();
        assert!(err.contains("`shift`"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_types_carry_line_numbers() {
        let err = parse("shift = synth-rot\n\n[schedule]\nbatchsize = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("batchsize"), "{err}");
        let err = parse("shift = synth-rot\n[schedule]\nbatch_size = many\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("integer"), "{err}");
        let err = parse("shift = synth-rot\n[nope]\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse("shift = synth-spin\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn loss_preset_supplies_tying() {
        let cfg = parse("shift = synth-rot\n[adapt]\nloss = confusion\n").unwrap();
        assert_eq!(cfg.method, AdaptMethod::domain_confusion());
    }

    #[test]
    fn echo_round_trips() {
        let text = "shift = synth-affine\nseed = 9\nsource_samples = 300\n[synthetic]\nclasses = 6\nrotation_deg = 12.5\n\
                    [adapt]\nloss = gan\ntying = partial:conv1\n[optim]\nmapping = adam(lr=0.001, beta1=0.9)\n\
                    [data]\nroot = /tmp/digits\n[output]\ndir = out/run\n";
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.shift.classes, 6);
        assert_eq!(cfg.method.tying, TyingPlan::Partial(vec!["conv1".into()]));
        let again = parse(&cfg.to_config_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn digit_shift_requires_data_root_and_files() {
        let err = parse("shift = mnist-usps\n").unwrap_err().to_string();
        assert!(err.contains("root"), "{err}");
        let err = parse("shift = mnist-usps\n[data]\nroot = /nonexistent/digits\n").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/digits/train-images-idx3-ubyte"), "{err}");
        let cfg = parse_with_root("shift = usps-mnist\n", Some("/env/root".into())).unwrap();
        assert_eq!(cfg.data.unwrap().root, PathBuf::from("/env/root"));
    }
}
