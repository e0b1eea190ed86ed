use std::fmt;

use super::{Encoder, Layer, Module};
use crate::error::{Error, Result};

/// Layerwise equality constraints between a source and a target encoder.
/// A tied layer shares weight and bias storage; an untied one is independent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TyingPlan {
    AllShared,
    AllUntied,
    Partial(Vec<String>),
}

impl TyingPlan {
    pub fn tied_layers(&self, schema: &[&str]) -> Result<Vec<String>> {
        match self {
            TyingPlan::AllShared => Ok(schema.iter().map(|s| s.to_string()).collect()),
            TyingPlan::AllUntied => Ok(Vec::new()),
            TyingPlan::Partial(names) => {
                for n in names {
                    if !schema.contains(&n.as_str()) {
                        return Err(Error::config(format!(
                            "unknown layer {n:?} in tying plan; valid layers: {}",
                            schema.join(", ")
                        )));
                    }
                }
                Ok(names.clone())
            }
        }
    }

    pub fn is_all_shared(&self) -> bool {
        matches!(self, TyingPlan::AllShared)
    }
}

impl fmt::Display for TyingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TyingPlan::AllShared => f.write_str("shared"),
            TyingPlan::AllUntied => f.write_str("untied"),
            TyingPlan::Partial(names) => write!(f, "partial:{}", names.join(",")),
        }
    }
}

impl std::str::FromStr for TyingPlan {
    type Err = Error;

    /// `shared`, `untied` or `partial:conv1,conv2`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared" => Ok(TyingPlan::AllShared),
            "untied" => Ok(TyingPlan::AllUntied),
            other => match other.strip_prefix("partial:") {
                Some(list) => {
                    let names: Vec<String> = list
                        .split(',')
                        .map(|n| n.trim().to_string())
                        .filter(|n| !n.is_empty())
                        .collect();
                    if names.is_empty() {
                        return Err(Error::config("partial tying needs at least one layer name"));
                    }
                    Ok(TyingPlan::Partial(names))
                }
                None => Err(Error::config(format!(
                    "unknown tying {other:?}; expected shared, untied or partial:<layers>"
                ))),
            },
        }
    }
}

fn check_schema(source: &Encoder, target: &Encoder) -> Result<()> {
    let same = source.layers().len() == target.layers().len()
        && source.layers().iter().zip(target.layers()).all(|(a, b)| {
            a.name == b.name && a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
        });
    if same {
        Ok(())
    } else {
        Err(Error::config("source and target encoders have different layer schemas"))
    }
}

/// Makes the target's planned layers alias the source's storage. Layers not in
/// the plan are given their own storage if they were previously shared.
pub fn apply_tying_plan(source: &Encoder, target: &mut Encoder, plan: &TyingPlan) -> Result<()> {
    check_schema(source, target)?;
    let tied = plan.tied_layers(&source.layer_names())?;
    for (src, dst) in source.layers().iter().zip(target.layers_mut()) {
        if tied.iter().any(|n| n == src.name) {
            *dst = Layer {
                name: src.name,
                weight: src.weight.clone(),
                bias: src.bias.clone(),
            };
        } else if dst.weight.ptr_eq(&src.weight) || dst.bias.ptr_eq(&src.bias) {
            *dst = dst.deep_copy();
        }
    }
    Ok(())
}
