//! Latent SNR, noise level selection, PSNR and intersection-over-union metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{chw, to_host, Image, LabelMap, SegLogits};

/// Peak-to-peak pixel range of images normalised to `[-1, 1]`.
pub const PIXEL_RANGE: f64 = 2.0;

fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Latent signal-to-noise ratio in dB: total clean energy over total perturbation energy.
///
/// Returns `f64::INFINITY` when the perturbation is exactly zero.
pub fn measure_snr(clean: &SegLogits, noisy: &SegLogits) -> Result<f64> {
    if clean.tensor().dims() != noisy.tensor().dims() {
        return Err(Error::Shape(format!(
            "snr operands differ: {:?} vs {:?}",
            clean.tensor().dims(),
            noisy.tensor().dims()
        )));
    }
    let c = to_host(clean.tensor())?;
    let n = to_host(noisy.tensor())?;
    snr_from_host(&c, &n)
}

pub(crate) fn snr_from_host(clean: &[f64], noisy: &[f64]) -> Result<f64> {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::ZeroEnergy("latent signal of SNR measurement"));
    }
    let noise: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c).powi(2)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(db(signal / noise))
}

/// Noise standard deviation that yields `snr_db` for a signal of the given total energy
/// spread over `pixels` pixel positions.
pub fn sigma_from_energy(energy: f64, pixels: usize, snr_db: f64) -> Result<f64> {
    if energy <= 0.0 || !energy.is_finite() {
        return Err(Error::ZeroEnergy("logits used to set the noise level"));
    }
    Ok(10f64.powf((10.0 * energy.log10() - snr_db) / 20.0) / (pixels as f64).sqrt())
}

/// [`sigma_from_energy`] for one unbatched logit tensor, with `|I| = H * W`.
pub fn sigma_for_snr(clean: &SegLogits, snr_db: f64) -> Result<f64> {
    if clean.is_batched() {
        return Err(Error::Shape("sigma_for_snr expects a single (S, H, W) sample".into()));
    }
    let (_, h, w) = clean.chw();
    let energy: f64 = to_host(clean.tensor())?.iter().map(|v| v * v).sum();
    sigma_from_energy(energy, h * w, snr_db)
}

/// The SNR implied by a noise level through `energy / (|I| * sigma^2)`.
pub fn snr_from_sigma(energy: f64, pixels: usize, sigma: f64) -> f64 {
    db(energy / (pixels as f64 * sigma * sigma))
}

/// Peak signal-to-noise ratio with a peak-to-peak range of 2; `f64::INFINITY` when the
/// images are identical.
pub fn compute_psnr(reference: &Image, reconstruction: &Image) -> Result<f64> {
    if reference.tensor().dims() != reconstruction.tensor().dims() {
        return Err(Error::Shape(format!(
            "psnr operands differ: {:?} vs {:?}",
            reference.tensor().dims(),
            reconstruction.tensor().dims()
        )));
    }
    let a = to_host(reference.tensor())?;
    let b = to_host(reconstruction.tensor())?;
    Ok(psnr_from_host(&a, &b))
}

pub(crate) fn psnr_from_host(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    psnr_from_mse(mse)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        db(PIXEL_RANGE * PIXEL_RANGE / mse)
    }
}

/// Per-image PSNR for every sample of a batch.
pub fn psnr_per_image(reference: &Image, reconstruction: &Image) -> Result<Vec<f64>> {
    let (c, h, w) = chw(reference.tensor())?;
    let a = to_host(reference.tensor())?;
    let b = to_host(reconstruction.tensor())?;
    if a.len() != b.len() {
        return Err(Error::Shape("psnr operands differ in size".into()));
    }
    let n = c * h * w;
    Ok(a.chunks(n)
        .zip(b.chunks(n))
        .map(|(x, y)| psnr_from_host(x, y))
        .collect())
}

/// How classes without any ground truth or prediction enter the mean IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    /// Undefined IoUs count as zero and the mean runs over the whole class set.
    #[default]
    Strict,
    /// The mean runs over classes with a defined IoU only.
    SkipUndefined,
}

/// Which classes enter the mean IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalClasses {
    All,
    /// Every class but the last (background / void) channel; pixels whose ground truth is
    /// background are ignored.
    ExcludeBackground,
}

impl EvalClasses {
    pub fn class_ids(&self, classes: usize) -> Vec<usize> {
        match self {
            EvalClasses::All => (0..classes).collect(),
            EvalClasses::ExcludeBackground => (0..classes.saturating_sub(1)).collect(),
        }
    }

    /// Pixels to leave out of the confusion counts for this ground truth.
    pub fn ignore_mask(&self, truth: &LabelMap, classes: usize) -> Option<Vec<bool>> {
        match self {
            EvalClasses::All => None,
            EvalClasses::ExcludeBackground => Some(
                truth
                    .data
                    .iter()
                    .map(|&l| l as usize == classes - 1)
                    .collect(),
            ),
        }
    }
}

/// Running per-class true positive, false positive and false negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self, class: usize) -> (u64, u64, u64) {
        (self.tp[class], self.fp[class], self.fn_[class])
    }

    /// Adds one prediction / ground-truth pair. Pixels flagged in `ignore` are skipped.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        truth: &LabelMap,
        ignore: Option<&[bool]>,
    ) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        if let Some(mask) = ignore {
            if mask.len() != truth.data.len() {
                return Err(Error::Shape("ignore mask size differs from label map".into()));
            }
        }
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if ignore.is_some_and(|m| m[i]) {
                continue;
            }
            for label in [p, t] {
                if label as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: label as i64,
                        row: i / truth.width,
                        col: i % truth.width,
                        classes: self.classes,
                    });
                }
            }
            let (p, t) = (p as usize, t as usize);
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    /// Combines counts from an independently accumulated shard.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {} classes into {}",
                other.classes, self.classes
            )));
        }
        for s in 0..self.classes {
            self.tp[s] += other.tp[s];
            self.fp[s] += other.fp[s];
            self.fn_[s] += other.fn_[s];
        }
        Ok(())
    }

    /// Intersection over union of `class`; `None` if it never occurs in either map.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }

    /// Mean IoU over all classes.
    pub fn miou(&self, mode: MeanMode) -> Result<f64> {
        let all: Vec<usize> = (0..self.classes).collect();
        self.miou_over(&all, mode)
    }

    /// Mean IoU over the given class subset.
    pub fn miou_over(&self, classes: &[usize], mode: MeanMode) -> Result<f64> {
        let ious: Vec<Option<f64>> = classes.iter().map(|&c| self.iou(c)).collect();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Invalid("mean IoU: every class IoU is undefined".into()));
        }
        Ok(match mode {
            MeanMode::Strict => defined.iter().sum::<f64>() / classes.len() as f64,
            MeanMode::SkipUndefined => defined.iter().sum::<f64>() / defined.len() as f64,
        })
    }
}
