//! Convolutional building blocks, the two ERFNet-style generators and the patch
//! discriminator.

mod erfnet;
mod layers;
mod patchgan;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use erfnet::{Erfnet, ErfnetSchedule, ReconstructionNet, SegmentationNet, Stage};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d};
pub use patchgan::PatchDiscriminator;

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean normal used for convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Network size: the full ERFNet-style configuration or a small one for desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Full,
    Tiny,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "tiny" => Ok(Scale::Tiny),
            other => Err(Error::Config(format!("unknown scale `{other}`"))),
        }
    }
}

/// Floating-point precision of parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Whether a forward pass is part of training (batch statistics, dropout) or inference.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Visits trainable parameters and persistent buffers under hierarchical names.
pub trait Module {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor)) {}

    fn set_buffer(&mut self, _name: &str, _value: Tensor) -> Result<bool> {
        Ok(false)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All trainable parameters of a module, in name order.
pub fn named_vars(m: &dyn Module) -> BTreeMap<String, Var> {
    let mut out = BTreeMap::new();
    m.visit_vars("", &mut |name, var| {
        out.insert(name, var.clone());
    });
    out
}

/// All non-trainable state (batch-norm running statistics), in name order.
pub fn named_buffers(m: &dyn Module) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    m.visit_buffers("", &mut |name, t| {
        out.insert(name, t.clone());
    });
    out
}

pub fn parameter_count(m: &dyn Module) -> usize {
    named_vars(m).values().map(|v| v.elem_count()).sum()
}

/// Overwrites parameters and buffers from a name-to-tensor map. Every parameter must be
/// present with a matching shape.
pub fn load_state(m: &mut dyn Module, state: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in named_vars(m) {
        let value = state
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        if value.dims() != var.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: expected {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
    }
    for (name, current) in named_buffers(m) {
        let value = state
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("missing buffer `{name}`")))?;
        let value = value.to_dtype(current.dtype())?;
        m.set_buffer(&name, value)?;
    }
    Ok(())
}

/// Order-sensitive digest of all parameter bits; equal digests mean bitwise-equal weights
/// with overwhelming probability.
pub fn fingerprint(m: &dyn Module) -> Result<u64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, var) in named_vars(m) {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let values = var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        for v in values {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    Ok(h)
}

/// Checks that a spatial size is supported by the networks (positive multiple of 8).
pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} must be a positive multiple of 8"
        )));
    }
    Ok(())
}
