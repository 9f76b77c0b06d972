//! Noise injection into the latent segmentation logits of the forward cycle.
//!
//! All injectors pass gradients straight through: quantization and additive Gaussian
//! noise backpropagate as the identity, max-only masking passes the gradient of the
//! kept element and blocks the zeroed ones.

use std::fmt;
use std::str::FromStr;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::tensor::{chw, to_host, SegLogits};

/// Target SNRs at or above this value are treated as noiseless.
pub const MAX_SNR_DB: f64 = 300.0;

pub const MAX_BITS: u32 = 16;

/// Which perturbation to apply to the logits before reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseSpec {
    None,
    MaxOnly,
    Quantize { bits: u32 },
    Gaussian { snr_db: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Quantize { bits } if !(1..=MAX_BITS).contains(&bits) => Err(
                Error::Config(format!("quantizer bits must be in 1..={MAX_BITS}, got {bits}")),
            ),
            NoiseSpec::Gaussian { snr_db } if !snr_db.is_finite() => Err(Error::Config(
                format!("gaussian target SNR must be finite, got {snr_db}"),
            )),
            _ => Ok(()),
        }
    }

    /// Short kind name used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            NoiseSpec::None => "none",
            NoiseSpec::MaxOnly => "max-only",
            NoiseSpec::Quantize { .. } => "quantization",
            NoiseSpec::Gaussian { .. } => "gaussian",
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::None => write!(f, "none"),
            NoiseSpec::MaxOnly => write!(f, "max-only"),
            NoiseSpec::Quantize { bits } => write!(f, "quant:{bits}"),
            NoiseSpec::Gaussian { snr_db } => write!(f, "gauss:{snr_db}"),
        }
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = match s {
            "none" => NoiseSpec::None,
            "max-only" => NoiseSpec::MaxOnly,
            _ => {
                if let Some(bits) = s.strip_prefix("quant:") {
                    let bits = bits
                        .parse()
                        .map_err(|_| Error::Config(format!("bad bit count in noise `{s}`")))?;
                    NoiseSpec::Quantize { bits }
                } else if let Some(snr) = s.strip_prefix("gauss:") {
                    let snr_db = snr
                        .parse()
                        .map_err(|_| Error::Config(format!("bad SNR in noise `{s}`")))?;
                    NoiseSpec::Gaussian { snr_db }
                } else {
                    return Err(Error::Config(format!(
                        "unknown noise `{s}`; expected none, max-only, quant:<n> or gauss:<snr_db>"
                    )));
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for NoiseSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseSpec> for String {
    fn from(spec: NoiseSpec) -> String {
        spec.to_string()
    }
}

/// Reconstruction levels of an `n`-bit uniform quantizer on `[-1, 1]`, endpoints included.
pub fn build_codebook(bits: u32) -> Result<Vec<f64>> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Invalid(format!(
            "codebook needs 1..={MAX_BITS} bits, got {bits}"
        )));
    }
    // (2k - L) / L equals -1 + 2k / L but is exactly antisymmetric in floating point, so
    // midpoints such as 0 are true ties between mirrored levels
    let last = (1i64 << bits) - 1;
    Ok((0..=last)
        .map(|k| (2 * k - last) as f64 / last as f64)
        .collect())
}

/// Nearest codebook level by squared error, lower level on exact ties.
///
/// The level index is estimated in closed form and then settled by comparing the squared
/// error of the neighbouring candidates, so the result is exactly what an exhaustive
/// search over the codebook returns.
pub fn quantize_scalar(x: f64, codebook: &[f64]) -> f64 {
    let last = codebook.len() - 1;
    let guess = ((x + 1.0) * last as f64 / 2.0).round();
    let guess = if guess.is_nan() {
        0
    } else {
        guess.clamp(0.0, last as f64) as usize
    };
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(last);
    let mut best = lo;
    let mut best_err = (x - codebook[lo]).powi(2);
    for (k, level) in codebook.iter().enumerate().take(hi + 1).skip(lo + 1) {
        let err = (x - level).powi(2);
        if err < best_err {
            best = k;
            best_err = err;
        }
    }
    codebook[best]
}

struct UniformQuantizer {
    codebook: Vec<f64>,
}

impl CustomOp1 for UniformQuantizer {
    fn name(&self) -> &'static str {
        "uniform-quantizer"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("quantizer input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                v[start..end]
                    .iter()
                    .map(|&x| quantize_scalar(x as f64, &self.codebook) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                v[start..end]
                    .iter()
                    .map(|&x| quantize_scalar(x, &self.codebook))
                    .collect(),
            ),
            _ => candle_core::bail!("quantizer supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    // straight-through: the quantizer is the identity for backpropagation
    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.clone()))
    }
}

/// Elementwise `n`-bit uniform quantization with a straight-through gradient.
pub fn quantize(logits: &SegLogits, bits: u32) -> Result<SegLogits> {
    let codebook = build_codebook(bits)?;
    let out = logits
        .tensor()
        .contiguous()?
        .apply_op1(UniformQuantizer { codebook })?;
    SegLogits::new(out)
}

/// Keeps each pixel's largest class score (lowest index on ties) and zeroes the rest.
pub fn max_only(logits: &SegLogits) -> Result<SegLogits> {
    let t = logits.tensor();
    let (s, h, w) = chw(t)?;
    let batch = if t.rank() == 4 { t.dim(0)? } else { 1 };
    let values = to_host(t)?;
    let plane = h * w;
    let mut mask = vec![0u8; values.len()];
    for b in 0..batch {
        let base = b * s * plane;
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s {
                if values[base + c * plane + i] > values[base + best * plane + i] {
                    best = c;
                }
            }
            mask[base + best * plane + i] = 1;
        }
    }
    let mask = Tensor::from_vec(mask, t.shape(), t.device())?;
    let zeros = t.zeros_like()?;
    SegLogits::new(mask.where_cond(t, &zeros)?)
}

/// Standard deviation of the additive noise for each sample of `logits`.
fn per_sample_sigma(logits: &Tensor, snr_db: f64) -> Result<Vec<f64>> {
    let samples: Vec<Tensor> = if logits.rank() == 4 {
        (0..logits.dim(0)?).map(|b| logits.get(b)).collect::<candle_core::Result<_>>()?
    } else {
        vec![logits.clone()]
    };
    samples
        .iter()
        .map(|sample| {
            metrics::sigma_for_snr(&SegLogits::new(sample.clone())?, snr_db)
        })
        .collect()
}

/// Adds i.i.d. zero-mean Gaussian noise to every element, with a per-sample standard
/// deviation chosen so that the sample reaches `snr_db` in the `|I| * sigma^2` sense.
pub fn gaussian_inject<R: Rng + ?Sized>(
    logits: &SegLogits,
    snr_db: f64,
    rng: &mut R,
) -> Result<SegLogits> {
    let t = logits.tensor();
    let sigmas = per_sample_sigma(t, snr_db)?;
    if snr_db >= MAX_SNR_DB {
        return Ok(logits.clone());
    }
    let per_sample = t.elem_count() / sigmas.len();
    let mut noise = Vec::with_capacity(t.elem_count());
    for sigma in &sigmas {
        for _ in 0..per_sample {
            let z: f64 = rng.sample(StandardNormal);
            noise.push(sigma * z);
        }
    }
    let noise = Tensor::from_vec(noise, t.shape(), t.device())?.to_dtype(t.dtype())?;
    SegLogits::new(t.add(&noise)?)
}

/// Applies the injector selected by `spec`.
pub fn inject<R: Rng + ?Sized>(logits: &SegLogits, spec: &NoiseSpec, rng: &mut R) -> Result<SegLogits> {
    spec.validate()?;
    match *spec {
        NoiseSpec::None => Ok(logits.clone()),
        NoiseSpec::MaxOnly => max_only(logits),
        NoiseSpec::Quantize { bits } => quantize(logits, bits),
        NoiseSpec::Gaussian { snr_db } => gaussian_inject(logits, snr_db, rng),
    }
}
