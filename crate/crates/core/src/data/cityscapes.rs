//! Loader for the Cityscapes `leftImg8bit` / `gtFine` directory layout.
//!
//! Label ids are mapped with the standard train-id table: 19 evaluated classes, with every
//! other id (void, ignored and license-plate ids) folded into channel 19.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{Image, LabelMap};

/// 19 train classes plus the void channel.
pub const CLASSES: usize = 20;
pub const VOID: u32 = 19;

pub const CLASS_NAMES: [&str; CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
    "void",
];

/// Train id for each label id 0..=33; `VOID` for ids that are not evaluated.
const TRAIN_IDS: [u32; 34] = [
    VOID, VOID, VOID, VOID, VOID, VOID, VOID, // 0-6: unlabeled .. ground
    0, 1, // 7 road, 8 sidewalk
    VOID, VOID, // 9 parking, 10 rail track
    2, 3, 4, // 11 building, 12 wall, 13 fence
    VOID, VOID, VOID, // 14 guard rail, 15 bridge, 16 tunnel
    5, // 17 pole
    VOID, // 18 polegroup
    6, 7, 8, 9, 10, 11, 12, 13, 14, 15, // 19-28
    VOID, VOID, // 29 caravan, 30 trailer
    16, 17, 18, // 31 train, 32 motorcycle, 33 bicycle
];

/// Maps a Cityscapes label id to its channel.
pub fn train_id(label_id: u8) -> Option<u32> {
    TRAIN_IDS.get(label_id as usize).copied()
}

/// A discovered (image, label) file pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub image: PathBuf,
    pub labels: PathBuf,
}

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
const LABEL_SUFFIX: &str = "_gtFine_labelIds.png";

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Lists every image of `split` under `root` with its label file, in sorted order.
pub fn discover(root: &Path, split: Split) -> Result<Vec<Pair>> {
    let images = root.join("leftImg8bit").join(split.name());
    let labels = root.join("gtFine").join(split.name());
    let mut pairs = Vec::new();
    for city in sorted_entries(&images)? {
        if !city.is_dir() {
            continue;
        }
        let city_name = city.file_name().unwrap_or_default().to_owned();
        for file in sorted_entries(&city)? {
            let Some(name) = file.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) else {
                continue;
            };
            let label = labels.join(&city_name).join(format!("{stem}{LABEL_SUFFIX}"));
            if !label.is_file() {
                return Err(Error::file(&file, format!("missing label file {}", label.display())));
            }
            pairs.push(Pair {
                image: file,
                labels: label,
            });
        }
    }
    Ok(pairs)
}

/// Reads an RGB image, resizes it bilinearly to `(height, width)` and scales it to
/// `[-1, 1]`, returned as `(3, H, W)` values.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::file(path, e.to_string()))?
        .to_rgb8();
    let img = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    let mut out = vec![0f32; 3 * height * width];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * height * width + y as usize * width + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Reads a `labelIds` image, resizes it with nearest-neighbour sampling and maps ids to
/// channels. Ids outside the Cityscapes table are an error naming the file.
pub fn load_labels(path: &Path, height: usize, width: usize) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::file(path, e.to_string()))?
        .to_luma8();
    let img = image::imageops::resize(&img, width as u32, height as u32, FilterType::Nearest);
    let mut data = Vec::with_capacity(height * width);
    for px in img.pixels() {
        let id = px.0[0];
        data.push(train_id(id).ok_or_else(|| Error::file(path, format!("unknown label id {id}")))?);
    }
    Ok(LabelMap {
        height,
        width,
        data,
    })
}

#[derive(Debug, Clone)]
pub struct CityscapesDataset {
    pairs: Vec<Pair>,
    height: usize,
    width: usize,
    device: Device,
}

impl CityscapesDataset {
    pub fn open(root: &Path, split: Split, height: usize, width: usize, device: &Device) -> Result<Self> {
        Ok(Self {
            pairs: discover(root, split)?,
            height,
            width,
            device: device.clone(),
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }
}

impl Dataset for CityscapesDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let pair = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("sample {index} out of range")))?;
        let pixels = load_image(&pair.image, self.height, self.width)?;
        let image = Tensor::from_vec(pixels, (3, self.height, self.width), &self.device)?;
        Ok(Sample {
            image: Image::new(image)?,
            labels: load_labels(&pair.labels, self.height, self.width)?,
        })
    }

    fn classes(&self) -> usize {
        CLASSES
    }
}
