use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{join, Mode, Module, INIT_STD};
use crate::error::Result;

pub(crate) fn normal_tensor(
    dims: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)
}

fn reset_var(var: &Var, value: Tensor) -> Result<()> {
    var.set(&value)?;
    Ok(())
}

/// 2-d convolution with independent height / width padding and a bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: (usize, usize),
    dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        dilation: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            weight: Var::zeros((out_channels, in_channels, kernel.0, kernel.1), dtype, device)?,
            bias: Var::zeros(out_channels, dtype, device)?,
            stride,
            padding,
            dilation,
        })
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = self.weight.as_tensor();
        reset_var(&self.weight, normal_tensor(w.dims(), INIT_STD, w.dtype(), w.device(), rng)?)?;
        reset_var(&self.bias, self.bias.as_tensor().zeros_like()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.padding;
        let x = if ph == pw {
            x.clone()
        } else {
            x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?
        };
        let padding = if ph == pw { ph } else { 0 };
        let y = x.conv2d(self.weight.as_tensor(), padding, self.stride, self.dilation, 1)?;
        let out = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out, 1, 1))?)?)
    }
}

impl Module for Conv2d {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Transposed 2-d convolution with a bias, square kernel.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            weight: Var::zeros((in_channels, out_channels, kernel, kernel), dtype, device)?,
            bias: Var::zeros(out_channels, dtype, device)?,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = self.weight.as_tensor();
        reset_var(&self.weight, normal_tensor(w.dims(), INIT_STD, w.dtype(), w.device(), rng)?)?;
        reset_var(&self.bias, self.bias.as_tensor().zeros_like()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(
            self.weight.as_tensor(),
            self.padding,
            self.output_padding,
            self.stride,
            1,
        )?;
        let out = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out, 1, 1))?)?)
    }
}

impl Module for ConvTranspose2d {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Batch normalisation with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            gamma: Var::ones(channels, dtype, device)?,
            beta: Var::zeros(channels, dtype, device)?,
            running_mean: Tensor::zeros(channels, dtype, device)?,
            running_var: Tensor::ones(channels, dtype, device)?,
            eps,
            momentum: 0.1,
        })
    }

    pub fn init(&mut self) -> Result<()> {
        reset_var(&self.gamma, self.gamma.as_tensor().ones_like()?)?;
        reset_var(&self.beta, self.beta.as_tensor().zeros_like()?)?;
        self.running_mean = self.running_mean.zeros_like()?;
        self.running_var = self.running_var.ones_like()?;
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            self.running_mean = self
                .running_mean
                .affine(1.0 - m, 0.0)?
                .add(&mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            self.running_var = self
                .running_var
                .affine(1.0 - m, 0.0)?
                .add(&var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.reshape((1, c, 1, 1))?,
                self.running_var.reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

impl Module for BatchNorm2d {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<bool> {
        match name.rsplit('.').next() {
            Some("running_mean") => self.running_mean = value,
            Some("running_var") => self.running_var = value,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Per-sample, per-channel normalisation without affine parameters.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&var.affine(1.0, eps)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic sigmoid via `tanh`, which stays finite in both value and gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Channel-wise dropout: whole feature maps are zeroed with probability `p` during
/// training and the survivors rescaled by `1 / (1 - p)`.
pub fn dropout2d(x: &Tensor, p: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let (b, c, _, _) = x.dims4()?;
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..b * c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, (b, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&mask)?)
}
