//! Datasets, IDX ingestion, the digit sampling protocol and synthetic shifts.

mod idx;
mod synth;

pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, read_idx_images, read_idx_labels, write_idx, IMAGE_MAGIC,
    LABEL_MAGIC, RGB_IMAGE_MAGIC,
};
pub use synth::{render_blobs, sector_of, PlaneMap};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 28;
pub const MNIST_PROTOCOL_SAMPLES: usize = 2000;
pub const USPS_PROTOCOL_SAMPLES: usize = 1800;

fn fingerprint_of(images: &Tensor, labels: Option<&[usize]>) -> String {
    let mut h = Sha256::new();
    for d in images.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in images.data() {
        h.update(v.to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            h.update((l as u32).to_le_bytes());
        }
    }
    crate::util::hex(&h.finalize()[..16])
}

fn check_images(images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!("dataset images must be N×1×H×W, got {s:?}")));
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("dataset pixels must lie in [0, 1]"));
    }
    Ok(())
}

/// Images with class labels: source training data or labelled evaluation data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: String, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_images(&images)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            name,
            images,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same images with labels withheld.
    pub fn without_labels(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            name: self.name.clone(),
            images: self.images.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(
            self.name.clone(),
            self.images.select_rows(indices)?,
            labels,
            self.num_classes,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Order-sensitive content hash over pixels and labels.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.images, Some(&self.labels))
    }
}

/// Images only; labels are never observed.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    name: String,
    images: Tensor,
}

impl UnlabeledDataset {
    pub fn new(name: String, images: Tensor) -> Result<Self> {
        check_images(&images)?;
        Ok(Self { name, images })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select_rows(indices)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.images, None)
    }
}

/// Bilinear resize to 28×28 with corner-aligned sampling; 28×28 input is
/// returned unchanged.
pub fn resize_to_28(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("resize expects N×C×H×W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == SIDE && w == SIDE {
        return Ok(images.clone());
    }
    if h < 8 || w < 8 {
        return Err(Error::dim(format!("cannot resize {h}×{w} images; need at least 8×8")));
    }
    let src = images.data();
    let coords = |len: usize| -> Vec<(usize, usize, f32)> {
        (0..SIDE)
            .map(|i| {
                let pos = i as f64 * (len - 1) as f64 / (SIDE - 1) as f64;
                let lo = (pos.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (coords(h), coords(w));
    let mut out = Vec::with_capacity(n * c * SIDE * SIDE);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, c, SIDE, SIDE], out)
}

/// Uniform sample of `n` distinct examples.
pub fn sample_without_replacement(ds: &LabeledDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    if n > ds.len() {
        return Err(Error::contract(format!(
            "cannot sample {n} examples from {} ({} available)",
            ds.name(),
            ds.len()
        )));
    }
    let mut idx = index::sample(rng, ds.len(), n).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the 2000 MNIST / 1800 USPS subsets used for digit adaptation.
pub fn protocol_sample(mnist: &LabeledDataset, usps: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        sample_without_replacement(mnist, MNIST_PROTOCOL_SAMPLES, &mut stream_rng(seed, 10))?,
        sample_without_replacement(usps, USPS_PROTOCOL_SAMPLES, &mut stream_rng(seed, 11))?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftKind {
    MnistToUsps,
    UspsToMnist,
    SvhnToMnist,
    SynthRot,
    SynthAffine,
}

impl ShiftKind {
    pub fn is_synthetic(self) -> bool {
        matches!(self, ShiftKind::SynthRot | ShiftKind::SynthAffine)
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::MnistToUsps => "mnist-usps",
            ShiftKind::UspsToMnist => "usps-mnist",
            ShiftKind::SvhnToMnist => "svhn-mnist",
            ShiftKind::SynthRot => "synth-rot",
            ShiftKind::SynthAffine => "synth-affine",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace("->", "-").replace('→', "-");
        Ok(match norm.as_str() {
            "mnist-usps" => ShiftKind::MnistToUsps,
            "usps-mnist" => ShiftKind::UspsToMnist,
            "svhn-mnist" => ShiftKind::SvhnToMnist,
            "synth-rot" => ShiftKind::SynthRot,
            "synth-affine" => ShiftKind::SynthAffine,
            _ => {
                return Err(Error::config(format!(
                    "unknown shift {s:?}; expected one of mnist-usps, usps-mnist, svhn-mnist, synth-rot, synth-affine"
                )))
            }
        })
    }
}

/// A named domain shift plus sampling controls.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Source examples to use; `None` means the shift's default.
    pub source_cap: Option<usize>,
    pub target_cap: Option<usize>,
    pub seed: u64,
    /// Synthetic shifts only.
    pub classes: usize,
    /// `synth-rot` only.
    pub rotation_deg: f64,
}

pub const SYNTH_DEFAULT_SAMPLES: usize = 2000;
pub const SYNTH_DEFAULT_CLASSES: usize = 4;
pub const SYNTH_DEFAULT_ROTATION: f64 = 35.0;

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        ShiftSpec {
            kind,
            source_cap: None,
            target_cap: None,
            seed,
            classes: SYNTH_DEFAULT_CLASSES,
            rotation_deg: SYNTH_DEFAULT_ROTATION,
        }
    }

    pub fn synth_rot(seed: u64) -> Self {
        Self::new(ShiftKind::SynthRot, seed)
    }
}

/// Source data, adaptation-facing target data, and the same target images
/// with labels for evaluation.
#[derive(Clone, Debug)]
pub struct ShiftData {
    pub source: LabeledDataset,
    pub target: UnlabeledDataset,
    pub target_eval: LabeledDataset,
}

/// Generates a synthetic shift.
pub fn synth_shift(spec: &ShiftSpec) -> Result<ShiftData> {
    let map = match spec.kind {
        ShiftKind::SynthRot => PlaneMap::rotation(spec.rotation_deg),
        ShiftKind::SynthAffine => PlaneMap::affine_shift(),
        other => {
            return Err(Error::config(format!(
                "{other} is not a synthetic shift"
            )))
        }
    };
    let ns = spec.source_cap.unwrap_or(SYNTH_DEFAULT_SAMPLES);
    let nt = spec.target_cap.unwrap_or(SYNTH_DEFAULT_SAMPLES);
    let source = render_blobs(
        spec.classes,
        ns,
        &PlaneMap::IDENTITY,
        &mut stream_rng(spec.seed, 20),
        &format!("{}-source", spec.kind),
    )?;
    let target_eval = render_blobs(
        spec.classes,
        nt,
        &map,
        &mut stream_rng(spec.seed, 21),
        &format!("{}-target", spec.kind),
    )?;
    Ok(ShiftData {
        source,
        target: target_eval.without_labels(),
        target_eval,
    })
}

/// File locations for the digit datasets, relative to `root` unless absolute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPaths {
    pub root: PathBuf,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub usps_images: PathBuf,
    pub usps_labels: PathBuf,
    pub svhn_images: PathBuf,
    pub svhn_labels: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            root: PathBuf::from("data"),
            mnist_images: "train-images-idx3-ubyte".into(),
            mnist_labels: "train-labels-idx1-ubyte".into(),
            usps_images: "usps-train-images-idx3-ubyte".into(),
            usps_labels: "usps-train-labels-idx1-ubyte".into(),
            svhn_images: "svhn-train-images-idx4-ubyte".into(),
            svhn_labels: "svhn-train-labels-idx1-ubyte".into(),
        }
    }
}

impl DataPaths {
    /// Resolves a file, accepting a `.gz` sibling; names the expected path when neither exists.
    pub fn resolve(&self, file: &Path) -> Result<PathBuf> {
        let p = if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.root.join(file)
        };
        if p.exists() {
            return Ok(p);
        }
        let gz = PathBuf::from(format!("{}.gz", p.display()));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::NotFound {
            what: "dataset file",
            path: p,
        })
    }

    fn load(&self, images: &Path, labels: &Path, name: &str) -> Result<LabeledDataset> {
        let ds = load_idx(&self.resolve(images)?, &self.resolve(labels)?)?;
        LabeledDataset::new(name.into(), ds.images, ds.labels, ds.num_classes.max(10))
    }

    pub fn mnist(&self) -> Result<LabeledDataset> {
        self.load(&self.mnist_images, &self.mnist_labels, "mnist")
    }

    pub fn usps(&self) -> Result<LabeledDataset> {
        self.load(&self.usps_images, &self.usps_labels, "usps")
    }

    /// SVHN encodes digit 0 as label 10; it is mapped back to 0.
    pub fn svhn(&self) -> Result<LabeledDataset> {
        let ds = self.load(&self.svhn_images, &self.svhn_labels, "svhn")?;
        let labels = ds.labels.iter().map(|&l| if l == 10 { 0 } else { l }).collect();
        LabeledDataset::new("svhn".into(), ds.images, labels, 10)
    }
}

fn capped(ds: LabeledDataset, cap: Option<usize>, default: Option<usize>, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    match cap.or(default) {
        Some(n) => sample_without_replacement(&ds, n, rng),
        None => Ok(ds),
    }
}

/// Materialises any shift: synthetic ones are generated, digit shifts are
/// read from `paths` and sampled per the protocol (or the caps, if set).
pub fn load_shift(spec: &ShiftSpec, paths: &DataPaths) -> Result<ShiftData> {
    if spec.kind.is_synthetic() {
        return synth_shift(spec);
    }
    let (mut rs, mut rt) = (stream_rng(spec.seed, 10), stream_rng(spec.seed, 11));
    let (source, target_eval) = match spec.kind {
        ShiftKind::MnistToUsps => (
            capped(paths.mnist()?, spec.source_cap, Some(MNIST_PROTOCOL_SAMPLES), &mut rs)?,
            capped(paths.usps()?, spec.target_cap, Some(USPS_PROTOCOL_SAMPLES), &mut rt)?,
        ),
        ShiftKind::UspsToMnist => (
            capped(paths.usps()?, spec.source_cap, Some(USPS_PROTOCOL_SAMPLES), &mut rs)?,
            capped(paths.mnist()?, spec.target_cap, Some(MNIST_PROTOCOL_SAMPLES), &mut rt)?,
        ),
        ShiftKind::SvhnToMnist => (
            capped(paths.svhn()?, spec.source_cap, None, &mut rs)?,
            capped(paths.mnist()?, spec.target_cap, None, &mut rt)?,
        ),
        ShiftKind::SynthRot | ShiftKind::SynthAffine => unreachable!(),
    };
    Ok(ShiftData {
        target: target_eval.without_labels(),
        source,
        target_eval,
    })
}
