//! ERFNet encoder-decoder, driven by a stage schedule so that the full-size and tiny
//! variants share one code path.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{dropout2d, BatchNorm2d, Conv2d, ConvTranspose2d};
use super::{check_spatial, join, Mode, Module, Scale};
use crate::error::{Error, Result};
use crate::tensor::{Image, SegLogits, IMAGE_CHANNELS};

const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    /// Strided 3x3 convolution concatenated with 2x2 max pooling; halves the resolution.
    Down { out: usize },
    /// Factorised residual block (3x1, 1x3, dilated 3x1, dilated 1x3).
    NonBottleneck { dilation: usize, dropout: f64 },
    /// 3x3 transposed convolution; doubles the resolution.
    Up { out: usize },
}

/// Layer plan of one encoder-decoder. A final 2x2 transposed convolution maps the last
/// stage to `out_channels` at full resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfnetSchedule {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stages: Vec<Stage>,
}

impl ErfnetSchedule {
    /// The published ERFNet layout with `first_features` maps after the first downsampler
    /// (16 in the original network).
    pub fn full(in_channels: usize, out_channels: usize, first_features: usize) -> Self {
        use Stage::*;
        let mut stages = vec![Down { out: first_features }, Down { out: 64 }];
        stages.extend(std::iter::repeat_n(NonBottleneck { dilation: 1, dropout: 0.03 }, 5));
        stages.push(Down { out: 128 });
        for _ in 0..2 {
            for dilation in [2, 4, 8, 16] {
                stages.push(NonBottleneck { dilation, dropout: 0.3 });
            }
        }
        stages.push(Up { out: 64 });
        stages.extend(std::iter::repeat_n(NonBottleneck { dilation: 1, dropout: 0.0 }, 2));
        stages.push(Up { out: 16 });
        stages.extend(std::iter::repeat_n(NonBottleneck { dilation: 1, dropout: 0.0 }, 2));
        Self {
            in_channels,
            out_channels,
            stages,
        }
    }

    /// Three downsampling stages with at most 16 feature maps.
    pub fn tiny(in_channels: usize, out_channels: usize) -> Self {
        use Stage::*;
        let nb = |dilation, dropout| NonBottleneck { dilation, dropout };
        Self {
            in_channels,
            out_channels,
            stages: vec![
                Down { out: 8 },
                nb(1, 0.03),
                Down { out: 12 },
                nb(1, 0.03),
                Down { out: 16 },
                nb(2, 0.1),
                nb(4, 0.1),
                Up { out: 12 },
                nb(1, 0.0),
                Up { out: 8 },
                nb(1, 0.0),
            ],
        }
    }

    /// Segmentation generator: image in, one logit map per class out.
    pub fn segmenter(scale: Scale, classes: usize) -> Self {
        match scale {
            Scale::Full => Self::full(IMAGE_CHANNELS, classes, 16),
            Scale::Tiny => Self::tiny(IMAGE_CHANNELS, classes),
        }
    }

    /// Reconstruction generator: class maps in, image out, 32 maps after the first stage
    /// at full scale.
    pub fn reconstructor(scale: Scale, classes: usize) -> Self {
        match scale {
            Scale::Full => Self::full(classes, IMAGE_CHANNELS, 32),
            Scale::Tiny => Self::tiny(classes, IMAGE_CHANNELS),
        }
    }

    pub fn first_stage_features(&self) -> Option<usize> {
        self.stages.iter().find_map(|s| match s {
            Stage::Down { out } => Some(*out),
            _ => None,
        })
    }

    /// Number of resolution halvings, including the final upsampling output layer.
    pub fn downsamplings(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Down { .. }))
            .count()
    }

    fn validate(&self) -> Result<usize> {
        let mut channels = self.in_channels;
        let mut depth = 0i64;
        for (i, stage) in self.stages.iter().enumerate() {
            match *stage {
                Stage::Down { out } => {
                    if out <= channels {
                        return Err(Error::Config(format!(
                            "stage {i}: downsampler must increase the feature count, {channels} -> {out}"
                        )));
                    }
                    channels = out;
                    depth += 1;
                }
                Stage::Up { out } => {
                    channels = out;
                    depth -= 1;
                }
                Stage::NonBottleneck { dropout, .. } => {
                    if !(0.0..1.0).contains(&dropout) {
                        return Err(Error::Config(format!("stage {i}: dropout {dropout}")));
                    }
                }
            }
        }
        if depth != 1 {
            return Err(Error::Config(format!(
                "schedule must leave exactly one halving for the output layer, found {depth}"
            )));
        }
        Ok(channels)
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl DownBlock {
    fn forward(&mut self, x: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let conv = self.conv.forward(x)?;
        let pool = x.max_pool2d(2)?;
        let y = Tensor::cat(&[&conv, &pool], 1)?;
        self.bn.forward(&y, mode.is_train())?.relu().map_err(Into::into)
    }
}

#[derive(Debug, Clone)]
struct NonBottleneck {
    conv3x1_1: Conv2d,
    conv1x3_1: Conv2d,
    bn1: BatchNorm2d,
    conv3x1_2: Conv2d,
    conv1x3_2: Conv2d,
    bn2: BatchNorm2d,
    dropout: f64,
}

impl NonBottleneck {
    fn forward(&mut self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let train = mode.is_train();
        let y = self.conv3x1_1.forward(x)?.relu()?;
        let y = self.conv1x3_1.forward(&y)?;
        let y = self.bn1.forward(&y, train)?.relu()?;
        let y = self.conv3x1_2.forward(&y)?.relu()?;
        let y = self.conv1x3_2.forward(&y)?;
        let y = self.bn2.forward(&y, train)?;
        let y = dropout2d(&y, self.dropout, mode)?;
        Ok(y.add(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: ConvTranspose2d,
    bn: BatchNorm2d,
}

impl UpBlock {
    fn forward(&mut self, x: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(self.bn.forward(&y, mode.is_train())?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Down(DownBlock),
    NonBottleneck(NonBottleneck),
    Up(UpBlock),
}

/// ERFNet-style encoder-decoder.
#[derive(Debug, Clone)]
pub struct Erfnet {
    schedule: ErfnetSchedule,
    blocks: Vec<Block>,
    output: ConvTranspose2d,
}

impl Erfnet {
    pub fn new(schedule: ErfnetSchedule, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let last = schedule.validate()?;
        let mut channels = schedule.in_channels;
        let mut blocks = Vec::with_capacity(schedule.stages.len());
        for stage in &schedule.stages {
            let block = match *stage {
                Stage::Down { out } => {
                    let b = Block::Down(DownBlock {
                        conv: Conv2d::new(channels, out - channels, (3, 3), 2, (1, 1), 1, dtype, device)?,
                        bn: BatchNorm2d::new(out, BN_EPS, dtype, device)?,
                    });
                    channels = out;
                    b
                }
                Stage::NonBottleneck { dilation, dropout } => {
                    let c = channels;
                    let d = dilation;
                    Block::NonBottleneck(NonBottleneck {
                        conv3x1_1: Conv2d::new(c, c, (3, 1), 1, (1, 0), 1, dtype, device)?,
                        conv1x3_1: Conv2d::new(c, c, (1, 3), 1, (0, 1), 1, dtype, device)?,
                        bn1: BatchNorm2d::new(c, BN_EPS, dtype, device)?,
                        conv3x1_2: Conv2d::new(c, c, (3, 1), 1, (d, 0), d, dtype, device)?,
                        conv1x3_2: Conv2d::new(c, c, (1, 3), 1, (0, d), d, dtype, device)?,
                        bn2: BatchNorm2d::new(c, BN_EPS, dtype, device)?,
                        dropout,
                    })
                }
                Stage::Up { out } => {
                    let b = Block::Up(UpBlock {
                        conv: ConvTranspose2d::new(channels, out, 3, 2, 1, 1, dtype, device)?,
                        bn: BatchNorm2d::new(out, BN_EPS, dtype, device)?,
                    });
                    channels = out;
                    b
                }
            };
            blocks.push(block);
        }
        debug_assert_eq!(channels, last);
        let output = ConvTranspose2d::new(last, schedule.out_channels, 2, 2, 0, 0, dtype, device)?;
        let mut net = Self {
            schedule,
            blocks,
            output,
        };
        net.init_weights(seed)?;
        Ok(net)
    }

    pub fn schedule(&self) -> &ErfnetSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.output.weight.dtype()
    }

    /// Redraws every convolution weight from `N(0, 0.02^2)` and resets biases and
    /// normalisation state; deterministic in `seed`.
    pub fn init_weights(&mut self, seed: u64) -> Result<()> {
        let mut rng = crate::seed::rng_for(seed, crate::seed::Stream::Init, 0);
        for block in &mut self.blocks {
            match block {
                Block::Down(b) => {
                    b.conv.init(&mut rng)?;
                    b.bn.init()?;
                }
                Block::NonBottleneck(b) => {
                    for conv in [&b.conv3x1_1, &b.conv1x3_1, &b.conv3x1_2, &b.conv1x3_2] {
                        conv.init(&mut rng)?;
                    }
                    b.bn1.init()?;
                    b.bn2.init()?;
                }
                Block::Up(b) => {
                    b.conv.init(&mut rng)?;
                    b.bn.init()?;
                }
            }
        }
        self.output.init(&mut rng)
    }

    /// Runs the network on `(B, C, H, W)` or `(C, H, W)` input.
    pub fn forward(&mut self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let unbatched = x.rank() == 3;
        let x = if unbatched { x.unsqueeze(0)? } else { x.clone() };
        let (_, c, h, w) = x.dims4()?;
        if c != self.schedule.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.schedule.in_channels
            )));
        }
        check_spatial(h, w)?;
        let mut y = x;
        for block in &mut self.blocks {
            y = match block {
                Block::Down(b) => b.forward(&y, mode)?,
                Block::NonBottleneck(b) => b.forward(&y, mode)?,
                Block::Up(b) => b.forward(&y, mode)?,
            };
        }
        let y = self.output.forward(&y)?;
        Ok(if unbatched { y.squeeze(0)? } else { y })
    }
}

impl Module for Erfnet {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Down(b) => {
                    b.conv.visit_vars(&join(&p, "conv"), f);
                    b.bn.visit_vars(&join(&p, "bn"), f);
                }
                Block::NonBottleneck(b) => {
                    b.conv3x1_1.visit_vars(&join(&p, "conv3x1_1"), f);
                    b.conv1x3_1.visit_vars(&join(&p, "conv1x3_1"), f);
                    b.bn1.visit_vars(&join(&p, "bn1"), f);
                    b.conv3x1_2.visit_vars(&join(&p, "conv3x1_2"), f);
                    b.conv1x3_2.visit_vars(&join(&p, "conv1x3_2"), f);
                    b.bn2.visit_vars(&join(&p, "bn2"), f);
                }
                Block::Up(b) => {
                    b.conv.visit_vars(&join(&p, "conv"), f);
                    b.bn.visit_vars(&join(&p, "bn"), f);
                }
            }
        }
        self.output.visit_vars(&join(prefix, "output"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Down(b) => b.bn.visit_buffers(&join(&p, "bn"), f),
                Block::NonBottleneck(b) => {
                    b.bn1.visit_buffers(&join(&p, "bn1"), f);
                    b.bn2.visit_buffers(&join(&p, "bn2"), f);
                }
                Block::Up(b) => b.bn.visit_buffers(&join(&p, "bn"), f),
            }
        }
    }

    fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<bool> {
        let Some(rest) = name.strip_prefix("blocks.") else {
            return Ok(false);
        };
        let Some((index, rest)) = rest.split_once('.') else {
            return Ok(false);
        };
        let Ok(index) = index.parse::<usize>() else {
            return Ok(false);
        };
        let Some(block) = self.blocks.get_mut(index) else {
            return Ok(false);
        };
        let (layer, field) = rest.split_once('.').unwrap_or((rest, ""));
        match (block, layer) {
            (Block::Down(b), "bn") => b.bn.set_buffer(field, value),
            (Block::Up(b), "bn") => b.bn.set_buffer(field, value),
            (Block::NonBottleneck(b), "bn1") => b.bn1.set_buffer(field, value),
            (Block::NonBottleneck(b), "bn2") => b.bn2.set_buffer(field, value),
            _ => Ok(false),
        }
    }
}

/// The segmentation generator: image to per-class logits.
#[derive(Debug, Clone)]
pub struct SegmentationNet(pub Erfnet);

/// The reconstruction generator: per-class maps to image.
#[derive(Debug, Clone)]
pub struct ReconstructionNet(pub Erfnet);

impl SegmentationNet {
    pub fn new(scale: Scale, classes: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self(Erfnet::new(ErfnetSchedule::segmenter(scale, classes), seed, dtype, device)?))
    }

    pub fn forward(&mut self, x: &Image, mode: &mut Mode<'_>) -> Result<SegLogits> {
        SegLogits::new(self.0.forward(x.tensor(), mode)?)
    }
}

impl ReconstructionNet {
    pub fn new(scale: Scale, classes: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let schedule = ErfnetSchedule::reconstructor(scale, classes);
        if let (Scale::Full, Some(first)) = (scale, schedule.first_stage_features()) {
            if first <= classes {
                return Err(Error::Config(format!(
                    "first stage of the reconstruction generator needs more than {classes} maps, got {first}"
                )));
            }
        }
        Ok(Self(Erfnet::new(schedule, seed, dtype, device)?))
    }

    pub fn forward(&mut self, y: &SegLogits, mode: &mut Mode<'_>) -> Result<Image> {
        Image::new(self.0.forward(y.tensor(), mode)?)
    }
}

impl Module for SegmentationNet {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.0.visit_vars(prefix, f)
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.0.visit_buffers(prefix, f)
    }
    fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<bool> {
        self.0.set_buffer(name, value)
    }
}

impl Module for ReconstructionNet {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.0.visit_vars(prefix, f)
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.0.visit_buffers(prefix, f)
    }
    fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<bool> {
        self.0.set_buffer(name, value)
    }
}
