use super::{rng_for, Layer, Module, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// Channel widths of the LeNet variant. The default is the digit network
/// (20 and 50 filters, 500 hidden units); narrower variants exist for tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeNetSpec {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for LeNetSpec {
    fn default() -> Self {
        LeNetSpec {
            conv1: 20,
            conv2: 50,
            hidden: FEATURE_DIM,
        }
    }
}

pub const INPUT_SIDE: usize = 28;
const KERNEL: usize = 5;
// 28 -conv5-> 24 -pool-> 12 -conv5-> 8 -pool-> 4
const FINAL_SIDE: usize = 4;

/// Image-to-feature mapping: conv5 → pool2 → conv5 → pool2 → affine → ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    role: Role,
    spec: LeNetSpec,
    layers: Vec<Layer>,
}

impl Module for Encoder {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

pub fn build_lenet_encoder(seed: u64) -> Encoder {
    Encoder::lenet(LeNetSpec::default(), Role::Source, seed)
}

/// Value copy of `source` in the target role. No storage is shared.
pub fn init_target_from_source(source: &Encoder) -> Encoder {
    Encoder {
        role: Role::Target,
        spec: source.spec,
        layers: source.layers.iter().map(Layer::deep_copy).collect(),
    }
}

impl Encoder {
    pub fn lenet(spec: LeNetSpec, role: Role, seed: u64) -> Self {
        let mut rng = rng_for(seed, 1);
        let flat = spec.conv2 * FINAL_SIDE * FINAL_SIDE;
        let layers = vec![
            Layer::conv("conv1", 1, spec.conv1, KERNEL, &mut rng),
            Layer::conv("conv2", spec.conv1, spec.conv2, KERNEL, &mut rng),
            Layer::linear("fc", flat, spec.hidden, &mut rng),
        ];
        Encoder { role, spec, layers }
    }

    /// Independent copy with the same role.
    pub fn deep_copy(&self) -> Self {
        Encoder {
            role: self.role,
            spec: self.spec,
            layers: self.layers.iter().map(Layer::deep_copy).collect(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn spec(&self) -> LeNetSpec {
        self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.hidden
    }

    pub fn layer_names(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.name).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Maps `N×1×28×28` images to `N×hidden` features.
    pub fn forward(&self, tape: &mut Tape, images: Var, trainable: bool) -> Result<Var> {
        let s = tape.shape(images);
        if s.len() != 4 || s[1] != 1 || s[2] != INPUT_SIDE || s[3] != INPUT_SIDE {
            return Err(Error::dim(format!(
                "encoder expects N×1×{INPUT_SIDE}×{INPUT_SIDE} input, got {s:?}"
            )));
        }
        let (w1, b1) = self.layers[0].vars(tape, trainable);
        let (w2, b2) = self.layers[1].vars(tape, trainable);
        let (w3, b3) = self.layers[2].vars(tape, trainable);
        let h = tape.conv2d(images, w1, b1, 1, 0)?;
        let h = tape.maxpool2(h)?;
        let h = tape.conv2d(h, w2, b2, 1, 0)?;
        let h = tape.maxpool2(h)?;
        let h = tape.flatten(h)?;
        let h = tape.linear(h, w3, b3)?;
        Ok(tape.relu(h))
    }
}
