use super::{rng_for, Layer, Module, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Single affine layer from features to `K` class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    layers: Vec<Layer>,
    num_classes: usize,
}

impl Module for ClassifierHead {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

pub fn build_classifier(num_classes: usize, seed: u64) -> Result<ClassifierHead> {
    ClassifierHead::new(FEATURE_DIM, num_classes, seed)
}

impl ClassifierHead {
    pub fn new(feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = rng_for(seed, 2);
        Ok(ClassifierHead {
            layers: vec![Layer::linear("fc", feature_dim, num_classes, &mut rng)],
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn deep_copy(&self) -> Self {
        ClassifierHead {
            layers: self.layers.iter().map(Layer::deep_copy).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn forward(&self, tape: &mut Tape, features: Var, trainable: bool) -> Result<Var> {
        let (w, b) = self.layers[0].vars(tape, trainable);
        tape.linear(features, w, b)
    }
}

/// Three-layer MLP on encoder features producing one logit per row.
/// `sigmoid(logit)` is the probability that the row is a source feature.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Layer>,
}

impl Module for Discriminator {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

pub fn build_discriminator(seed: u64) -> Discriminator {
    Discriminator::new(FEATURE_DIM, 500, seed)
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 3);
        Discriminator {
            layers: vec![
                Layer::linear("fc1", feature_dim, hidden, &mut rng),
                Layer::linear("fc2", hidden, hidden, &mut rng),
                Layer::linear("fc3", hidden, 1, &mut rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, features: Var, trainable: bool) -> Result<Var> {
        let (w1, b1) = self.layers[0].vars(tape, trainable);
        let (w2, b2) = self.layers[1].vars(tape, trainable);
        let (w3, b3) = self.layers[2].vars(tape, trainable);
        let h = tape.linear(features, w1, b1)?;
        let h = tape.relu(h);
        let h = tape.linear(h, w2, b2)?;
        let h = tape.relu(h);
        tape.linear(h, w3, b3)
    }
}
