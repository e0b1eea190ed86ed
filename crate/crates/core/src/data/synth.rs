//! Rendered single-blob images with a controllable geometric domain shift.
//!
//! Class `k` places a small round Gaussian blob at angle `360°·k/K` around
//! the image centre. Angular jitter is truncated at ±0.24 of the class
//! spacing, so each class occupies a narrow arc and neighbouring arcs are
//! separated by empty gaps. The target domain renders the same scene after
//! a fixed linear map of the image plane about its centre (a rotation for
//! `synth-rot`, a shear plus rotation for `synth-affine`), so the target is
//! exactly the source image warped by that map.
//!
//! Under a 35° rotation with four classes roughly a quarter of the target
//! mass crosses into the neighbouring source sector, which leaves a
//! source-only model near 0.75 while the class arcs stay aligned up to a
//! rotation an adapted encoder can learn.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CENTER: f64 = (SIDE as f64 - 1.0) / 2.0;
const RADIUS: f64 = 10.5;
const RADIUS_JITTER: f64 = 0.5;
const BLOB_STD: f64 = 1.4;
// angular jitter as fractions of the class spacing
const JITTER_STD: f64 = 0.6;
const JITTER_LIMIT: f64 = 0.24;

/// 2×2 linear map of image-plane offsets from the centre (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneMap(pub [[f64; 2]; 2]);

impl PlaneMap {
    pub const IDENTITY: PlaneMap = PlaneMap([[1.0, 0.0], [0.0, 1.0]]);

    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        PlaneMap([[c, -s], [s, c]])
    }

    /// The fixed map used by `synth-affine`: a 0.4 horizontal shear with
    /// 0.9 vertical scaling, followed by a 20° rotation.
    pub fn affine_shift() -> Self {
        PlaneMap::rotation(20.0).then_after(PlaneMap([[1.0, 0.4], [0.0, 0.9]]))
    }

    /// `self ∘ inner`
    fn then_after(self, inner: PlaneMap) -> Self {
        let (a, b) = (self.0, inner.0);
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        PlaneMap(m)
    }

    fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let m = self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, limit: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
        if z.abs() <= limit {
            return z;
        }
    }
}

/// Renders one blob. `center` and `cov` are in source coordinates; `map`
/// warps both into the output image.
fn render(center: [f64; 2], cov: [[f64; 2]; 2], map: &PlaneMap, out: &mut [f32]) {
    let c = map.apply(center);
    let m = map.0;
    // cov' = M cov Mᵀ
    let mut mc = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            mc[i][j] = m[i][0] * cov[0][j] + m[i][1] * cov[1][j];
        }
    }
    let mut cv = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cv[i][j] = mc[i][0] * m[j][0] + mc[i][1] * m[j][1];
        }
    }
    let det = cv[0][0] * cv[1][1] - cv[0][1] * cv[1][0];
    let inv = [
        [cv[1][1] / det, -cv[0][1] / det],
        [-cv[1][0] / det, cv[0][0] / det],
    ];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = x as f64 - CENTER - c[0];
            let dy = y as f64 - CENTER - c[1];
            let q = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy);
            out[y * SIDE + x] = quantize((-0.5 * q).exp());
        }
    }
}

/// Rounds an intensity to 8 bits as stored digit images are. This also
/// zeroes the Gaussian tails, which would otherwise be subnormal floats
/// and slow every product they enter.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Draws `n` balanced examples of `classes` blob classes, warped by `map`.
pub fn render_blobs(classes: usize, n: usize, map: &PlaneMap, rng: &mut ChaCha8Rng, name: &str) -> Result<LabeledDataset> {
    if classes < 2 || n == 0 {
        return Err(Error::config(format!(
            "synthetic shift needs ≥ 2 classes and ≥ 1 sample, got {classes} and {n}"
        )));
    }
    let spacing = 360.0 / classes as f64;
    let cov = [[BLOB_STD * BLOB_STD, 0.0], [0.0, BLOB_STD * BLOB_STD]];
    let mut pixels = vec![0.0f32; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_mut(SIDE * SIDE).enumerate() {
        let k = i % classes;
        let angle = k as f64 * spacing + truncated_normal(rng, JITTER_STD * spacing, JITTER_LIMIT * spacing);
        let r = RADIUS + truncated_normal(rng, RADIUS_JITTER, 2.0 * RADIUS_JITTER);
        let (s, c) = angle.to_radians().sin_cos();
        render([r * c, r * s], cov, map, img);
        labels.push(k);
    }
    LabeledDataset::new(name.to_string(), Tensor::new(vec![n, 1, SIDE, SIDE], pixels)?, labels, classes)
}

/// Angle-sector classifier for blob images: the Bayes rule for the source
/// geometry, used to validate the construction.
pub fn sector_of(image: &[f32], classes: usize) -> usize {
    let (mut sx, mut sy, mut total) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let w = image[y * SIDE + x] as f64;
            sx += w * (x as f64 - CENTER);
            sy += w * (y as f64 - CENTER);
            total += w;
        }
    }
    if total == 0.0 {
        return 0;
    }
    let angle = sy.atan2(sx).to_degrees().rem_euclid(360.0);
    let spacing = 360.0 / classes as f64;
    (((angle + spacing / 2.0) / spacing).floor() as usize) % classes
}
