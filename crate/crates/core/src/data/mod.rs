//! Paired image / segmentation data: procedural scenes for desk-scale runs and a loader
//! for the Cityscapes directory layout.

pub mod cityscapes;
pub mod export;
pub mod synth;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalClasses;
use crate::nn::check_spatial;
use crate::tensor::{one_hot_batch, Image, LabelMap, OneHotMask};

pub use cityscapes::CityscapesDataset;
pub use synth::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Source {
    /// Procedural scenes; `train_count` / `val_count` samples per split.
    Synthetic { train_count: usize, val_count: usize },
    /// A Cityscapes root containing `leftImg8bit/` and `gtFine/`.
    Cityscapes { dir: PathBuf },
}

/// Where samples come from and at which geometry they are delivered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        check_spatial(self.height, self.width)?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if let Source::Cityscapes { .. } = self.source {
            if self.classes != cityscapes::CLASSES {
                return Err(Error::Config(format!(
                    "cityscapes data has {} classes, config says {}",
                    cityscapes::CLASSES,
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Evaluation class set: void / background is excluded for Cityscapes, every class
    /// counts for synthetic scenes.
    pub fn default_eval_classes(&self) -> EvalClasses {
        match self.source {
            Source::Synthetic { .. } => EvalClasses::All,
            Source::Cityscapes { .. } => EvalClasses::ExcludeBackground,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.source {
            Source::Synthetic { .. } => (0..self.classes)
                .map(|c| {
                    if c + 1 == self.classes {
                        "background".to_string()
                    } else {
                        let kind = ["rect", "disc", "triangle"][c % 3];
                        format!("{kind}-{c}")
                    }
                })
                .collect(),
            Source::Cityscapes { .. } => cityscapes::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// One image with its class map; the image is `(3, H, W)` in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

/// Random-access paired dataset.
pub trait Dataset {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<Sample>;

    fn classes(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Procedural dataset; train and val draw from disjoint scene indices (even / odd).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    seed: u64,
    split: Split,
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
    device: Device,
}

impl SyntheticDataset {
    pub fn new(spec: &DatasetSpec, split: Split, device: &Device) -> Result<Self> {
        spec.validate()?;
        let Source::Synthetic {
            train_count,
            val_count,
        } = spec.source
        else {
            return Err(Error::Config("not a synthetic dataset spec".into()));
        };
        Ok(Self {
            seed: spec.seed,
            split,
            count: match split {
                Split::Train => train_count,
                Split::Val => val_count,
            },
            height: spec.height,
            width: spec.width,
            classes: spec.classes,
            device: device.clone(),
        })
    }

    /// Global scene index behind sample `index` of this split.
    pub fn scene_index(&self, index: usize) -> u64 {
        2 * index as u64
            + match self.split {
                Split::Train => 0,
                Split::Val => 1,
            }
    }

    pub fn scene(&self, index: usize) -> Scene {
        Scene::generate(
            self.seed,
            self.scene_index(index),
            self.height,
            self.width,
            self.classes,
        )
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<Sample> {
        if index >= self.count {
            return Err(Error::Invalid(format!(
                "sample {index} out of range for {} samples",
                self.count
            )));
        }
        let scene = self.scene(index);
        let image = Tensor::from_vec(scene.pixels(), (3, self.height, self.width), &self.device)?;
        Ok(Sample {
            image: Image::new(image)?,
            labels: scene.labels(),
        })
    }

    fn classes(&self) -> usize {
        self.classes
    }
}

/// Opens the split described by `spec`.
pub fn open(spec: &DatasetSpec, split: Split, device: &Device) -> Result<Box<dyn Dataset>> {
    spec.validate()?;
    Ok(match &spec.source {
        Source::Synthetic { .. } => Box::new(SyntheticDataset::new(spec, split, device)?),
        Source::Cityscapes { dir } => Box::new(CityscapesDataset::open(
            dir,
            split,
            spec.height,
            spec.width,
            device,
        )?),
    })
}

/// Stacks samples `indices` into an image batch and a one-hot batch.
pub fn collate(
    dataset: &dyn Dataset,
    indices: &[usize],
    dtype: DType,
) -> Result<(Image, OneHotMask, Vec<LabelMap>)> {
    let samples = indices
        .iter()
        .map(|&i| dataset.get(i))
        .collect::<Result<Vec<_>>>()?;
    let images = samples
        .iter()
        .map(|s| s.image.tensor().to_dtype(dtype))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let image = Image::new(Tensor::stack(&images, 0)?)?;
    let labels: Vec<LabelMap> = samples.into_iter().map(|s| s.labels).collect();
    let device = image.tensor().device().clone();
    let mask = one_hot_batch(&labels, dataset.classes(), dtype, &device)?;
    Ok((image, mask, labels))
}
