//! Segmentation, adversarial, reconstruction and discriminator objectives.
//!
//! Every loss returns a scalar tensor so it can be backpropagated. Batched inputs are
//! averaged over the batch, which for these per-pixel normalised losses is the same as
//! normalising by `B * H * W`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{chw, Image, OneHotMask, RealismMap, SegProbs};

/// Floor applied to probabilities before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mixing factors of the forward cycle (`alpha`), backward cycle (`beta`) and total
/// generator objective (`gamma`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0 / 11.0,
            gamma: 20.0 / 31.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("loss weight {name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Number of pixel positions including the batch axis.
fn pixel_count(t: &Tensor) -> Result<usize> {
    let (_, h, w) = chw(t)?;
    let batch = if t.rank() == 4 { t.dim(0)? } else { 1 };
    Ok(batch * h * w)
}

fn cross_entropy(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_dims(probs, target, "cross entropy operands")?;
    let n = pixel_count(probs)?;
    let log = probs.maximum(PROB_FLOOR)?.log()?;
    let total = target.mul(&log)?.sum_all()?;
    Ok(total.affine(-1.0 / n as f64, 0.0)?)
}

/// Mean cross entropy between predicted probabilities and the one-hot ground truth.
pub fn seg_loss(y: &SegProbs, y_bar: &OneHotMask) -> Result<Tensor> {
    cross_entropy(y.tensor(), y_bar.tensor())
}

/// Cross entropy of the backward-cycle reconstruction against the ground truth.
pub fn rec_loss_seg(y_rec: &SegProbs, y_bar: &OneHotMask) -> Result<Tensor> {
    cross_entropy(y_rec.tensor(), y_bar.tensor())
}

/// Least-squares adversarial loss of the generator: mean of `(p - 1)^2`.
pub fn adv_loss(p: &RealismMap) -> Result<Tensor> {
    Ok(p.tensor().affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

/// L1 image reconstruction loss, summed over all `C * H * W` elements and normalised by
/// `H * W` only.
pub fn rec_loss_image(x_rec: &Image, x_bar: &Image) -> Result<Tensor> {
    same_dims(x_rec.tensor(), x_bar.tensor(), "image reconstruction operands")?;
    let n = pixel_count(x_bar.tensor())?;
    let total = x_rec.tensor().sub(x_bar.tensor())?.abs()?.sum_all()?;
    Ok(total.affine(1.0 / n as f64, 0.0)?)
}

/// Least-squares discriminator loss: real patches pushed to 1, pooled generated patches
/// pushed to 0.
pub fn discriminator_loss(p_real: &RealismMap, p_gen: &RealismMap) -> Result<Tensor> {
    same_dims(p_real.tensor(), p_gen.tensor(), "discriminator loss operands")?;
    let real = p_real.tensor().affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake = p_gen.tensor().sqr()?.mean_all()?;
    Ok(real.add(&fake)?)
}

/// Forward-cycle, backward-cycle and total generator objectives.
#[derive(Debug, Clone)]
pub struct GeneratorLoss<T> {
    pub forward: T,
    pub backward: T,
    pub total: T,
}

/// Weighted composition of the four generator losses as differentiable tensors.
pub fn generator_loss(
    j_seg: &Tensor,
    j_rec_x: &Tensor,
    j_adv: &Tensor,
    j_rec_y: &Tensor,
    w: &LossWeights,
) -> Result<GeneratorLoss<Tensor>> {
    w.validate()?;
    let mix = |a: &Tensor, b: &Tensor, k: f64| -> Result<Tensor> {
        Ok(a.affine(k, 0.0)?.add(&b.affine(1.0 - k, 0.0)?)?)
    };
    let forward = mix(j_seg, j_rec_x, w.alpha)?;
    let backward = mix(j_adv, j_rec_y, w.beta)?;
    let total = mix(&forward, &backward, w.gamma)?;
    Ok(GeneratorLoss {
        forward,
        backward,
        total,
    })
}

/// [`generator_loss`] on plain numbers.
pub fn generator_loss_values(
    j_seg: f64,
    j_rec_x: f64,
    j_adv: f64,
    j_rec_y: f64,
    w: &LossWeights,
) -> Result<GeneratorLoss<f64>> {
    w.validate()?;
    let forward = w.alpha * j_seg + (1.0 - w.alpha) * j_rec_x;
    let backward = w.beta * j_adv + (1.0 - w.beta) * j_rec_y;
    let total = w.gamma * forward + (1.0 - w.gamma) * backward;
    Ok(GeneratorLoss {
        forward,
        backward,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cpu() -> Device {
        Device::Cpu
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn probs(values: Vec<f64>, shape: (usize, usize, usize)) -> SegProbs {
        SegProbs::new(Tensor::from_vec(values, shape, &cpu()).unwrap()).unwrap()
    }

    fn mask(values: Vec<f64>, shape: (usize, usize, usize)) -> OneHotMask {
        OneHotMask::new(Tensor::from_vec(values, shape, &cpu()).unwrap()).unwrap()
    }

    fn realism(v: f64) -> RealismMap {
        RealismMap::new(Tensor::full(v, (3, 5), &cpu()).unwrap()).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let truth = mask(vec![1.0, 0.0, 0.0, 1.0], (2, 1, 2));
        assert_eq!(scalar(&seg_loss(&probs(vec![1.0, 0.0, 0.0, 1.0], (2, 1, 2)), &truth).unwrap()), 0.0);

        let uniform = probs(vec![0.25; 16], (4, 2, 2));
        let truth4 = mask(
            vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
            (4, 2, 2),
        );
        assert!((scalar(&seg_loss(&uniform, &truth4).unwrap()) - 4f64.ln()).abs() < 1e-12);

        // pixel 0: (0.8, 0.2) with class 0; pixel 1: (0.4, 0.6) with class 1
        let y = probs(vec![0.8, 0.4, 0.2, 0.6], (2, 1, 2));
        let expected = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((scalar(&seg_loss(&y, &truth).unwrap()) - expected).abs() < 1e-12);
        assert_eq!(
            scalar(&seg_loss(&y, &truth).unwrap()),
            scalar(&rec_loss_seg(&y, &truth).unwrap())
        );
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let truth = mask(vec![1.0, 0.0], (2, 1, 1));
        let y = probs(vec![0.0, 1.0], (2, 1, 1));
        let v = scalar(&seg_loss(&y, &truth).unwrap());
        assert!((v + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let truth = mask(vec![1.0, 0.0], (2, 1, 1));
        let y = probs(vec![0.5; 4], (2, 1, 2));
        assert!(matches!(seg_loss(&y, &truth), Err(Error::Shape(_))));
    }

    #[test]
    fn adversarial_cases() {
        assert_eq!(scalar(&adv_loss(&realism(1.0)).unwrap()), 0.0);
        assert_eq!(scalar(&adv_loss(&realism(0.0)).unwrap()), 1.0);
        assert_eq!(scalar(&adv_loss(&realism(0.5)).unwrap()), 0.25);
    }

    #[test]
    fn discriminator_cases() {
        let d = |a, b| scalar(&discriminator_loss(&realism(a), &realism(b)).unwrap());
        assert_eq!(d(1.0, 0.0), 0.0);
        assert_eq!(d(0.5, 0.5), 0.5);
        assert_eq!(d(0.0, 1.0), 2.0);
    }

    #[test]
    fn image_reconstruction_normaliser_excludes_channels() {
        let a = Image::new(Tensor::zeros((3, 4, 4), DType::F64, &cpu()).unwrap()).unwrap();
        assert_eq!(scalar(&rec_loss_image(&a, &a).unwrap()), 0.0);
        let b = Image::new(Tensor::full(0.5f64, (3, 4, 4), &cpu()).unwrap()).unwrap();
        assert!((scalar(&rec_loss_image(&b, &a).unwrap()) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn generator_weights() {
        let ones = generator_loss_values(1.0, 1.0, 1.0, 1.0, &LossWeights::default()).unwrap();
        assert!((ones.total - 1.0).abs() < 1e-15);
        let degenerate = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        };
        assert_eq!(generator_loss_values(2.5, 9.0, 7.0, 3.0, &degenerate).unwrap().total, 2.5);
        let g = generator_loss_values(2.0, 0.0, 0.0, 1.0, &LossWeights::default()).unwrap();
        assert!((g.total - 30.0 / 31.0).abs() < 1e-12);

        let t = |v: f64| Tensor::new(v, &cpu()).unwrap();
        let tensors =
            generator_loss(&t(2.0), &t(0.0), &t(0.0), &t(1.0), &LossWeights::default()).unwrap();
        assert!((scalar(&tensors.total) - 30.0 / 31.0).abs() < 1e-12);

        let bad = LossWeights {
            alpha: 1.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
