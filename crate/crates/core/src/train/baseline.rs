use candle_core::{Device, Tensor};

use super::{dropout_counter, init_seed, TrainConfig, INIT_G};
use crate::error::Result;
use crate::loss::seg_loss;
use crate::nn::{named_vars, Mode, SegmentationNet};
use crate::optim::Adam;
use crate::seed::{rng_for, Stream};
use crate::tensor::{softmax, Image, OneHotMask};

/// Plain supervised segmentation training of `G` alone.
///
/// Uses the same initialisation, dropout streams and optimiser settings as [`super::Trainer`],
/// so with no noise and `alpha = gamma = 1` both produce the same segmentation network.
pub struct SupervisedTrainer {
    pub config: TrainConfig,
    pub g: SegmentationNet,
    opt: Adam,
    pub iteration: u64,
    device: Device,
}

impl SupervisedTrainer {
    pub fn new(config: TrainConfig, classes: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let g = SegmentationNet::new(
            config.scale,
            classes,
            init_seed(config.seed, INIT_G),
            config.precision.dtype(),
            device,
        )?;
        let vars = named_vars(&g)
            .into_iter()
            .map(|(k, v)| (format!("g.{k}"), v))
            .collect();
        let opt = Adam::new(vars, config.adam)?;
        Ok(Self {
            config,
            g,
            opt,
            iteration: 0,
            device: device.clone(),
        })
    }

    /// One cross-entropy step; returns the segmentation loss before the update.
    pub fn run_iteration(&mut self, images: &Image, masks: &OneHotMask, lr: f64) -> Result<f64> {
        let dtype = self.config.precision.dtype();
        let x = Image::new(images.tensor().to_device(&self.device)?.to_dtype(dtype)?)?;
        let y_bar = OneHotMask::new(masks.tensor().to_device(&self.device)?.to_dtype(dtype)?)?;
        let mut rng = rng_for(self.config.seed, Stream::Dropout, dropout_counter(self.iteration, 0));
        let logits = self.g.forward(&x, &mut Mode::Train(&mut rng))?;
        let j_seg: Tensor = seg_loss(&softmax(&logits)?, &y_bar)?;
        let value = j_seg.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let grads = j_seg.backward()?;
        self.opt.step(&grads, lr)?;
        self.iteration += 1;
        Ok(value)
    }
}
