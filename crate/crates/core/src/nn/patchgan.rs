//! Least-squares PatchGAN discriminator with instance normalisation.

use candle_core::{DType, Device, Var};

use super::layers::{instance_norm, leaky_relu, sigmoid, Conv2d};
use super::{check_spatial, join, Module, Scale};
use crate::error::{Error, Result};
use crate::tensor::{Image, RealismMap, IMAGE_CHANNELS};

const IN_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.2;

/// Smallest supported input side length.
pub const MIN_SIDE: usize = 32;

/// Four 4x4 convolution stages with strides 2, 2, 2, 1, instance normalisation from the
/// second stage on, and a final single-channel projection squashed into `[0, 1]`.
///
/// An `H x W` input yields an `(H/8 - 2) x (W/8 - 2)` patch map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn channels(scale: Scale) -> [usize; 4] {
        match scale {
            Scale::Full => [64, 128, 256, 512],
            Scale::Tiny => [16, 32, 64, 64],
        }
    }

    pub fn new(scale: Scale, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let channels = Self::channels(scale);
        let strides = [2, 2, 2, 1];
        let mut stages = Vec::with_capacity(4);
        let mut c_in = IMAGE_CHANNELS;
        for (c_out, stride) in channels.into_iter().zip(strides) {
            stages.push(Conv2d::new(c_in, c_out, (4, 4), stride, (1, 1), 1, dtype, device)?);
            c_in = c_out;
        }
        let head = Conv2d::new(c_in, 1, (4, 4), 1, (1, 1), 1, dtype, device)?;
        let d = Self { stages, head };
        d.init_weights(seed)?;
        Ok(d)
    }

    pub fn init_weights(&self, seed: u64) -> Result<()> {
        let mut rng = crate::seed::rng_for(seed, crate::seed::Stream::Init, 1);
        for conv in self.stages.iter().chain(std::iter::once(&self.head)) {
            conv.init(&mut rng)?;
        }
        Ok(())
    }

    /// Patch map size for an `h x w` input.
    pub fn output_dims(h: usize, w: usize) -> Result<(usize, usize)> {
        check_spatial(h, w)?;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        Ok((h / 8 - 2, w / 8 - 2))
    }

    pub fn forward(&self, x: &Image) -> Result<RealismMap> {
        let t = x.tensor();
        let unbatched = t.rank() == 3;
        let t = if unbatched { t.unsqueeze(0)? } else { t.clone() };
        let (_, c, h, w) = t.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("discriminator expects 3 channels, got {c}")));
        }
        Self::output_dims(h, w)?;
        let mut y = t;
        for (i, conv) in self.stages.iter().enumerate() {
            y = conv.forward(&y)?;
            if i > 0 {
                y = instance_norm(&y, IN_EPS)?;
            }
            y = leaky_relu(&y, SLOPE)?;
        }
        let p = sigmoid(&self.head.forward(&y)?)?.squeeze(1)?;
        RealismMap::new(if unbatched { p.squeeze(0)? } else { p })
    }
}

impl Module for PatchDiscriminator {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, conv) in self.stages.iter().enumerate() {
            conv.visit_vars(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_vars(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    #[test]
    fn geometry_formula() {
        assert_eq!(PatchDiscriminator::output_dims(64, 64).unwrap(), (6, 6));
        assert_eq!(PatchDiscriminator::output_dims(256, 512).unwrap(), (30, 62));
        assert!(PatchDiscriminator::output_dims(24, 64).is_err());
        assert!(PatchDiscriminator::output_dims(60, 64).is_err());
    }

    #[test]
    fn tiny_forward_shape_and_range() {
        let d = PatchDiscriminator::new(Scale::Tiny, 3, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let p = d.forward(&Image::new(x).unwrap()).unwrap();
        assert_eq!(p.tensor().dims(), &[2, 6, 6]);
        let v = crate::tensor::to_host(p.tensor()).unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
