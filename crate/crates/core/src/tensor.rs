//! Tensor-valued domain types shared by the networks, losses and metrics.
//!
//! Every type wraps a [`candle_core::Tensor`] laid out as `(channels, height, width)`,
//! optionally with a leading batch axis. The class / colour axis is therefore always
//! `rank - 3`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Colour channel count of every image in this crate.
pub const IMAGE_CHANNELS: usize = 3;

fn check_rank(t: &Tensor, what: &str) -> Result<()> {
    match t.rank() {
        3 | 4 => Ok(()),
        r => Err(Error::Shape(format!(
            "{what} must be (C, H, W) or (B, C, H, W), got rank {r}"
        ))),
    }
}

/// Index of the channel axis for a rank 3 or rank 4 tensor.
pub fn channel_axis(t: &Tensor) -> usize {
    t.rank() - 3
}

/// `(channels, height, width)` of a rank 3 or rank 4 tensor, ignoring the batch axis.
pub fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = t.dims();
    match dims.len() {
        3 => Ok((dims[0], dims[1], dims[2])),
        4 => Ok((dims[1], dims[2], dims[3])),
        r => Err(Error::Shape(format!("expected rank 3 or 4, got rank {r}"))),
    }
}

/// Copies a tensor to the host as `f64`, flattened in row-major order.
pub fn to_host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Fails with [`Error::NonFinite`] naming `what` if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if to_host(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

macro_rules! tensor_newtype {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> Result<Self> {
                check_rank(&t, $what)?;
                Ok(Self(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            /// `(channels, height, width)`, ignoring any batch axis.
            pub fn chw(&self) -> (usize, usize, usize) {
                chw(&self.0).expect("rank checked at construction")
            }

            pub fn is_batched(&self) -> bool {
                self.0.rank() == 4
            }
        }
    };
}

tensor_newtype!(
    /// Colour image with `C = 3` channels. Dataset images lie in `[-1, 1]`; generator
    /// outputs are unbounded and only clamped on export.
    Image,
    "image"
);
tensor_newtype!(
    /// Pre-softmax class scores with one channel per class, background included.
    SegLogits,
    "segmentation logits"
);
tensor_newtype!(
    /// Per-pixel class probabilities.
    SegProbs,
    "segmentation probabilities"
);
tensor_newtype!(
    /// Ground-truth segmentation with exactly one `1` per pixel along the class axis.
    OneHotMask,
    "one-hot mask"
);

impl Image {
    pub fn check_channels(&self) -> Result<()> {
        let (c, _, _) = self.chw();
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "image must have {IMAGE_CHANNELS} channels, got {c}"
            )));
        }
        Ok(())
    }
}

impl SegProbs {
    /// Verifies the probability-simplex invariant within `tol`.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let sums = self.0.sum_keepdim(channel_axis(&self.0))?;
        let lo = to_host(&self.0.flatten_all()?.min(0)?)?[0];
        let hi = to_host(&self.0.flatten_all()?.max(0)?)?[0];
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Invalid(format!(
                "probabilities outside [0, 1]: min {lo}, max {hi}"
            )));
        }
        for s in to_host(&sums)? {
            if (s - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("pixel probabilities sum to {s}")));
            }
        }
        Ok(())
    }
}

impl OneHotMask {
    /// Verifies that every element is 0 or 1 and every pixel holds exactly one 1.
    pub fn check_one_hot(&self) -> Result<()> {
        let values = to_host(&self.0)?;
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("one-hot mask has non-binary entries".into()));
        }
        let sums = to_host(&self.0.sum_keepdim(channel_axis(&self.0))?)?;
        if sums.iter().any(|&s| s != 1.0) {
            return Err(Error::Invalid(
                "one-hot mask pixel without exactly one active class".into(),
            ));
        }
        Ok(())
    }
}

/// Discriminator output: per-patch realism probabilities, shape `(H_D, W_D)` or
/// `(B, H_D, W_D)`.
#[derive(Debug, Clone)]
pub struct RealismMap(Tensor);

impl RealismMap {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.rank() {
            2 | 3 => Ok(Self(t)),
            r => Err(Error::Shape(format!(
                "realism map must be (H_D, W_D) or (B, H_D, W_D), got rank {r}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(H_D, W_D)`.
    pub fn patch_dims(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[d.len() - 2], d[d.len() - 1])
    }
}

/// Host-side integer class map of shape `(H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }
}

/// Per-pixel softmax along the class axis, stabilised by subtracting the pixel maximum.
pub fn softmax(logits: &SegLogits) -> Result<SegProbs> {
    ensure_finite(logits.tensor(), "softmax input")?;
    let t = logits.tensor();
    let axis = channel_axis(t);
    let max = t.max_keepdim(axis)?.detach();
    let exp = t.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(axis)?;
    SegProbs::new(exp.broadcast_div(&sum)?)
}

/// Encodes a label map into a `(S, H, W)` one-hot tensor.
pub fn one_hot_encode(
    labels: &LabelMap,
    classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<OneHotMask> {
    let plane = labels.height * labels.width;
    let mut data = vec![0f32; classes * plane];
    for (i, &label) in labels.data.iter().enumerate() {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label: label as i64,
                row: i / labels.width,
                col: i % labels.width,
                classes,
            });
        }
        data[label as usize * plane + i] = 1.0;
    }
    let t = Tensor::from_vec(data, (classes, labels.height, labels.width), device)?;
    OneHotMask::new(t.to_dtype(dtype)?)
}

/// Stacks per-sample one-hot masks into one batched mask.
pub fn one_hot_batch(
    labels: &[LabelMap],
    classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<OneHotMask> {
    let masks = labels
        .iter()
        .map(|l| one_hot_encode(l, classes, dtype, device).map(OneHotMask::into_tensor))
        .collect::<Result<Vec<_>>>()?;
    OneHotMask::new(Tensor::stack(&masks, 0)?)
}

fn argmax_plane(values: &[f64], classes: usize, height: usize, width: usize) -> LabelMap {
    let plane = height * width;
    let data = (0..plane)
        .map(|i| {
            let mut best = 0usize;
            for s in 1..classes {
                // strict comparison keeps the lowest index on ties
                if values[s * plane + i] > values[best * plane + i] {
                    best = s;
                }
            }
            best as u32
        })
        .collect();
    LabelMap {
        height,
        width,
        data,
    }
}

/// Per-pixel index of the largest class score of a `(S, H, W)` tensor; ties resolve to
/// the lowest class index.
pub fn argmax_mask(t: &Tensor) -> Result<LabelMap> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "argmax_mask expects (S, H, W), got rank {}",
            t.rank()
        )));
    }
    let (s, h, w) = t.dims3()?;
    let values = to_host(t)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("argmax input".into()));
    }
    Ok(argmax_plane(&values, s, h, w))
}

/// [`argmax_mask`] over every sample of a rank 3 or rank 4 tensor.
pub fn argmax_masks(t: &Tensor) -> Result<Vec<LabelMap>> {
    match t.rank() {
        3 => Ok(vec![argmax_mask(t)?]),
        4 => (0..t.dim(0)?).map(|b| argmax_mask(&t.get(b)?)).collect(),
        r => Err(Error::Shape(format!("expected rank 3 or 4, got rank {r}"))),
    }
}

/// Maps 8-bit pixel values linearly onto `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_image(
    raw: &[i32],
    shape: (usize, usize, usize),
    device: &Device,
) -> Result<Image> {
    let (c, h, w) = shape;
    if raw.len() != c * h * w {
        return Err(Error::Shape(format!(
            "raw image of shape {c}x{h}x{w} needs {} values, got {}",
            c * h * w,
            raw.len()
        )));
    }
    let data = raw
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if (0..=255).contains(&v) {
                Ok((v as f64 / 127.5 - 1.0) as f32)
            } else {
                Err(Error::PixelOutOfRange {
                    value: v as i64,
                    index,
                })
            }
        })
        .collect::<Result<Vec<f32>>>()?;
    Image::new(Tensor::from_vec(data, (c, h, w), device)?)
}

/// Inverse of [`normalize_image`] for export, clamping to the representable range.
pub fn denormalize_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Softmax over the last axis of a host vector; used as an independent reference in tests.
#[doc(hidden)]
pub fn softmax_reference(values: &[f64]) -> Vec<f64> {
    let exp: Vec<f64> = values.iter().map(|v| v.exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}
