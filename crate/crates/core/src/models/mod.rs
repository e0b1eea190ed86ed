//! Parameterised networks: the encoder mappings, the shared classifier, the
//! domain discriminator, and layerwise tying between two encoders.

mod encoder;
mod heads;
mod tying;

pub use encoder::{build_lenet_encoder, init_target_from_source, Encoder, LeNetSpec, Role};
pub use heads::{build_classifier, build_discriminator, ClassifierHead, Discriminator};
pub use tying::{apply_tying_plan, TyingPlan};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor, Var};

pub const FEATURE_DIM: usize = 500;

/// One named layer: a weight and a bias, tied or copied as a unit.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: &'static str,
    pub weight: Param,
    pub bias: Param,
}

impl Layer {
    fn glorot(name: &'static str, weight_shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let bias_len = match weight_shape.len() {
            2 => weight_shape[1],
            _ => weight_shape[0],
        };
        Layer {
            name,
            weight: Param::new(Tensor::uniform(weight_shape, bound, rng)),
            bias: Param::new(Tensor::zeros(&[bias_len])),
        }
    }

    /// Affine layer with `weight[in×out]`.
    pub(crate) fn linear(name: &'static str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::glorot(name, &[fan_in, fan_out], fan_in, fan_out, rng)
    }

    /// Square-kernel convolution with `weight[out×in×k×k]`.
    pub(crate) fn conv(name: &'static str, in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::glorot(name, &[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k, rng)
    }

    pub(crate) fn vars(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (
            tape.param_if(&self.weight, trainable),
            tape.param_if(&self.bias, trainable),
        )
    }

    pub(crate) fn deep_copy(&self) -> Self {
        Layer {
            name: self.name,
            weight: self.weight.deep_copy(),
            bias: self.bias.deep_copy(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn shares_storage_with(&self, other: &Layer) -> bool {
        self.weight.ptr_eq(&other.weight) && self.bias.ptr_eq(&other.bias)
    }
}

/// Behaviour shared by every network made of named [`Layer`]s.
pub trait Module {
    fn layers(&self) -> &[Layer];

    fn params(&self) -> Vec<Param> {
        self.layers()
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    fn param_count(&self) -> usize {
        self.layers().iter().map(Layer::param_count).sum()
    }

    /// Parameter values keyed as `prefix.layer.w` / `prefix.layer.b`.
    fn state_dict(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for l in self.layers() {
            out.insert(format!("{prefix}.{}.w", l.name), l.weight.value().clone());
            out.insert(format!("{prefix}.{}.b", l.name), l.bias.value().clone());
        }
        out
    }

    /// Overwrites every parameter from `state`; all keys under `prefix` must be present with matching shapes.
    fn load_state_dict(&self, state: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for l in self.layers() {
            for (suffix, p) in [("w", &l.weight), ("b", &l.bias)] {
                let key = format!("{prefix}.{}.{suffix}", l.name);
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::config(format!("checkpoint lacks tensor {key}")))?;
                p.assign(t)?;
            }
        }
        Ok(())
    }

    fn zero_grad(&self) {
        self.params().iter().for_each(Param::zero_grad);
    }
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Order-sensitive digest of every parameter value, for freeze checks.
pub fn fingerprint<M: Module + ?Sized>(m: &M) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for l in m.layers() {
        h.update(l.name.as_bytes());
        for p in [&l.weight, &l.bias] {
            for v in p.value().data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    crate::util::hex(&h.finalize()[..16])
}
