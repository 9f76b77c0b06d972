//! Batch protocol, optimiser schedule and epoch loop.
//!
//! One iteration runs six steps in a fixed order:
//!
//! 1. load the batch `(x̄, ȳ)`;
//! 2. forward cycle `x̄ → G → ỹ → {softmax → y, noise → ŷ → F → x̂}` and backward cycle
//!    `ȳ → F → x → G → softmax → y_rec`, plus `D(x)`;
//! 3. generator objective;
//! 4. joint Adam step on `G` and `F` (the discriminator is untouched);
//! 5. discriminator objective on `D(x̄)` and `D(pool(x))`;
//! 6. Adam step on `D` only.

mod baseline;
pub mod checkpoint;
mod run;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossWeights};
use crate::metrics::measure_snr;
use crate::nn::{
    fingerprint, load_state, named_buffers, named_vars, Mode, PatchDiscriminator, Precision,
    ReconstructionNet, Scale, SegmentationNet,
};
use crate::noise::{inject, NoiseSpec};
use crate::optim::{Adam, AdamConfig};
use crate::pool::{ImagePool, PoolPolicy, DEFAULT_CAPACITY};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::tensor::{ensure_finite, softmax, Image, OneHotMask, SegLogits};

pub use baseline::SupervisedTrainer;
pub use run::{
    checkpoint_name, epoch_batches, latest_checkpoint, read_metrics_csv, train, train_on, EpochSummary,
    MetricsRow, RunManifest, RunOutcome, RunStatus, Seeds, TrainOptions, METRICS_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_constant_lr: usize,
    pub lr_initial: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub scale: Scale,
    pub precision: Precision,
    pub pool_capacity: usize,
    pub pool_policy: PoolPolicy,
    /// Write a checkpoint every this many epochs (and always after the last one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 200,
            epochs_constant_lr: 100,
            lr_initial: 2e-4,
            batch_size: 4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            noise: NoiseSpec::None,
            seed: 0,
            scale: Scale::Full,
            precision: Precision::F32,
            pool_capacity: DEFAULT_CAPACITY,
            pool_policy: PoolPolicy::Uniform,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs_total == 0 {
            bad.push("epochs_total must be at least 1".to_string());
        }
        if self.epochs_constant_lr > self.epochs_total {
            bad.push(format!(
                "epochs_constant_lr ({}) exceeds epochs_total ({})",
                self.epochs_constant_lr, self.epochs_total
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            bad.push(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if self.pool_capacity == 0 {
            bad.push("pool_capacity must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            bad.push("checkpoint_every must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            bad.push(format!("adam betas must lie in [0, 1), got {} and {}", a.beta1, a.beta2));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            bad.push(format!("adam_eps must be positive, got {}", a.eps));
        }
        if let Err(e) = self.weights.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.noise.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Learning rate for 1-based epoch `e`: constant, then linear decay reaching zero at the
/// last epoch.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> Result<f64> {
    if e == 0 || e > cfg.epochs_total {
        return Err(Error::Invalid(format!(
            "epoch {e} outside 1..={}",
            cfg.epochs_total
        )));
    }
    if e <= cfg.epochs_constant_lr {
        return Ok(cfg.lr_initial);
    }
    let remaining = (cfg.epochs_total - e) as f64;
    let span = (cfg.epochs_total - cfg.epochs_constant_lr) as f64;
    Ok(cfg.lr_initial * remaining / span)
}

/// Per-network seeds derived from the run seed.
pub(crate) fn init_seed(seed: u64, net: u64) -> u64 {
    derive_seed(seed, Stream::Init, net)
}

pub(crate) const INIT_G: u64 = 0;
pub(crate) const INIT_F: u64 = 1;
pub(crate) const INIT_D: u64 = 2;

/// Dropout stream counter for forward pass `pass` of iteration `iteration`.
pub(crate) fn dropout_counter(iteration: u64, pass: u64) -> u64 {
    iteration * 4 + pass
}

/// The three networks of the cycle.
#[derive(Debug)]
pub struct Networks {
    pub g: SegmentationNet,
    pub f: ReconstructionNet,
    pub d: PatchDiscriminator,
}

impl Networks {
    pub fn new(scale: Scale, classes: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            g: SegmentationNet::new(scale, classes, init_seed(seed, INIT_G), dtype, device)?,
            f: ReconstructionNet::new(scale, classes, init_seed(seed, INIT_F), dtype, device)?,
            d: PatchDiscriminator::new(scale, init_seed(seed, INIT_D), dtype, device)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.g.0.schedule().out_channels
    }

    fn prefixed<T>(prefix: &'static str, map: BTreeMap<String, T>) -> impl Iterator<Item = (String, T)> {
        map.into_iter().map(move |(k, v)| (format!("{prefix}.{k}"), v))
    }

    /// Parameters of `G` and `F`, which share one optimiser.
    pub fn generator_vars(&self) -> BTreeMap<String, Var> {
        Self::prefixed("g", named_vars(&self.g))
            .chain(Self::prefixed("f", named_vars(&self.f)))
            .collect()
    }

    pub fn discriminator_vars(&self) -> BTreeMap<String, Var> {
        Self::prefixed("d", named_vars(&self.d)).collect()
    }

    /// Every parameter and buffer under `g.`, `f.` and `d.` prefixes.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, v) in self.generator_vars().into_iter().chain(self.discriminator_vars()) {
            out.insert(k, v.as_tensor().clone());
        }
        out.extend(Self::prefixed("g", named_buffers(&self.g)));
        out.extend(Self::prefixed("f", named_buffers(&self.f)));
        out
    }

    pub fn load(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let strip = |prefix: &str| -> BTreeMap<String, Tensor> {
            state
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        load_state(&mut self.g, &strip("g."))?;
        load_state(&mut self.f, &strip("f."))?;
        load_state(&mut self.d, &strip("d."))
    }

    /// Digest of the `G` and `F` parameters.
    pub fn generator_fingerprint(&self) -> Result<u64> {
        Ok(fingerprint(&self.g)? ^ fingerprint(&self.f)?.rotate_left(17))
    }

    pub fn discriminator_fingerprint(&self) -> Result<u64> {
        fingerprint(&self.d)
    }
}

/// The six protocol steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    LoadInputs = 1,
    Forward = 2,
    GeneratorLoss = 3,
    GeneratorUpdate = 4,
    DiscriminatorLoss = 5,
    DiscriminatorUpdate = 6,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::LoadInputs,
        Step::Forward,
        Step::GeneratorLoss,
        Step::GeneratorUpdate,
        Step::DiscriminatorLoss,
        Step::DiscriminatorUpdate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Generators,
    Discriminator,
}

/// Evidence recorded when a step finishes: parameter digests when instrumented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub step: Step,
    pub generators: Option<u64>,
    pub discriminator: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossRecord {
    pub j_seg: f64,
    pub j_adv: f64,
    pub j_rec_x: f64,
    pub j_rec_y: f64,
    pub j_forward: f64,
    pub j_backward: f64,
    pub j_gen: f64,
    pub j_disc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    /// Digests before step 1, when instrumented.
    pub initial: Option<(u64, u64)>,
    pub steps: Vec<StepRecord>,
    /// Optimiser steps in the order they happened.
    pub updates: Vec<(Step, Group)>,
    pub losses: LossRecord,
    /// Latent SNR between clean and perturbed logits over the batch.
    pub latent_snr_db: f64,
}

impl IterationTrace {
    /// Protocol violations: wrong step order, wrong update sequence, or a network whose
    /// parameters changed while they were supposed to be frozen.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let order: Vec<Step> = self.steps.iter().map(|s| s.step).collect();
        if order != Step::ALL {
            out.push(format!("step order {order:?}"));
        }
        if self.updates != [(Step::GeneratorUpdate, Group::Generators), (Step::DiscriminatorUpdate, Group::Discriminator)] {
            out.push(format!("update sequence {:?}", self.updates));
        }
        let Some((g0, d0)) = self.initial else {
            return out;
        };
        let fp = |step: Step| {
            self.steps
                .iter()
                .find(|s| s.step == step)
                .and_then(|s| s.generators.zip(s.discriminator))
        };
        for step in Step::ALL {
            let Some((g, d)) = fp(step) else {
                out.push(format!("step {step:?} has no parameter digest"));
                continue;
            };
            // D is frozen until its own update
            if step < Step::DiscriminatorUpdate && d != d0 {
                out.push(format!("discriminator changed by step {step:?}"));
            }
            // G and F are frozen before step 4 and after it
            if step < Step::GeneratorUpdate && g != g0 {
                out.push(format!("generators changed by step {step:?}"));
            }
            if step > Step::GeneratorUpdate {
                if let Some((g4, _)) = fp(Step::GeneratorUpdate) {
                    if g != g4 {
                        out.push(format!("generators changed by step {step:?}"));
                    }
                }
            }
        }
        out
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// All mutable training state of the cycle model.
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks,
    opt_gen: Adam,
    opt_disc: Adam,
    pub pool: ImagePool,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    /// Record parameter digests at every step (costs a host copy of all weights).
    pub instrument: bool,
    device: Device,
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let nets = Networks::new(config.scale, classes, config.seed, dtype, device)?;
        let opt_gen = Adam::new(nets.generator_vars(), config.adam)?;
        let opt_disc = Adam::new(nets.discriminator_vars(), config.adam)?;
        let pool = ImagePool::new(
            config.pool_capacity,
            config.pool_policy,
            derive_seed(config.seed, Stream::Pool, 0),
        )?;
        Ok(Self {
            config,
            nets,
            opt_gen,
            opt_disc,
            pool,
            epoch: 0,
            iteration: 0,
            instrument: false,
            device: device.clone(),
        })
    }

    pub fn classes(&self) -> usize {
        self.nets.classes()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_gen, &self.opt_disc)
    }

    pub(crate) fn optimizers_mut(&mut self) -> (&mut Adam, &mut Adam) {
        (&mut self.opt_gen, &mut self.opt_disc)
    }

    fn digests(&self) -> Result<Option<(u64, u64)>> {
        if !self.instrument {
            return Ok(None);
        }
        Ok(Some((
            self.nets.generator_fingerprint()?,
            self.nets.discriminator_fingerprint()?,
        )))
    }

    fn record(&self, steps: &mut Vec<StepRecord>, step: Step) -> Result<()> {
        let d = self.digests()?;
        steps.push(StepRecord {
            step,
            generators: d.map(|d| d.0),
            discriminator: d.map(|d| d.1),
        });
        Ok(())
    }

    /// Runs the six-step protocol on one batch with learning rate `lr`.
    pub fn run_iteration(&mut self, images: &Image, masks: &OneHotMask, lr: f64) -> Result<IterationTrace> {
        let initial = self.digests()?;
        let mut steps = Vec::with_capacity(6);
        let mut updates = Vec::with_capacity(2);
        let seed = self.config.seed;
        let it = self.iteration;
        let dtype = self.config.precision.dtype();

        // 1. inputs
        let x_bar = Image::new(images.tensor().to_device(&self.device)?.to_dtype(dtype)?)?;
        let y_bar = OneHotMask::new(masks.tensor().to_device(&self.device)?.to_dtype(dtype)?)?;
        if !x_bar.is_batched() || x_bar.tensor().dim(0)? == 0 {
            return Err(Error::Shape("run_iteration needs a non-empty (B, 3, H, W) batch".into()));
        }
        self.record(&mut steps, Step::LoadInputs)?;

        // 2. forward and backward cycle
        let mut rng = rng_for(seed, Stream::Dropout, dropout_counter(it, 0));
        let y_tilde = self.nets.g.forward(&x_bar, &mut Mode::Train(&mut rng))?;
        let y = softmax(&y_tilde)?;
        let mut noise_rng = rng_for(seed, Stream::Noise, it);
        let y_hat = inject(&y_tilde, &self.config.noise, &mut noise_rng)?;
        let mut rng = rng_for(seed, Stream::Dropout, dropout_counter(it, 1));
        let x_rec = self.nets.f.forward(&y_hat, &mut Mode::Train(&mut rng))?;

        let mut rng = rng_for(seed, Stream::Dropout, dropout_counter(it, 2));
        let x = self
            .nets
            .f
            .forward(&SegLogits::new(y_bar.tensor().clone())?, &mut Mode::Train(&mut rng))?;
        let mut rng = rng_for(seed, Stream::Dropout, dropout_counter(it, 3));
        let y_tilde_rec = self.nets.g.forward(&x, &mut Mode::Train(&mut rng))?;
        let y_rec = softmax(&y_tilde_rec)?;
        let p_gen = self.nets.d.forward(&x)?;
        let latent_snr_db = measure_snr(&y_tilde, &y_hat)?;
        self.record(&mut steps, Step::Forward)?;

        // 3. generator objective
        let j_seg = loss::seg_loss(&y, &y_bar)?;
        let j_rec_x = loss::rec_loss_image(&x_rec, &x_bar)?;
        let j_adv = loss::adv_loss(&p_gen)?;
        let j_rec_y = loss::rec_loss_seg(&y_rec, &y_bar)?;
        let gen = loss::generator_loss(&j_seg, &j_rec_x, &j_adv, &j_rec_y, &self.config.weights)?;
        let mut losses = LossRecord {
            j_seg: scalar(&j_seg)?,
            j_adv: scalar(&j_adv)?,
            j_rec_x: scalar(&j_rec_x)?,
            j_rec_y: scalar(&j_rec_y)?,
            j_forward: scalar(&gen.forward)?,
            j_backward: scalar(&gen.backward)?,
            j_gen: scalar(&gen.total)?,
            j_disc: 0.0,
        };
        if !losses.j_gen.is_finite() {
            let named: [(&str, &Tensor); 9] = [
                ("segmentation logits", y_tilde.tensor()),
                ("perturbed logits", y_hat.tensor()),
                ("forward reconstruction", x_rec.tensor()),
                ("rendered image", x.tensor()),
                ("backward segmentation logits", y_tilde_rec.tensor()),
                ("generated patch map", p_gen.tensor()),
                ("j_seg", &j_seg),
                ("j_rec_x", &j_rec_x),
                ("j_adv", &j_adv),
            ];
            for (name, t) in named {
                ensure_finite(t, name)?;
            }
            ensure_finite(&j_rec_y, "j_rec_y")?;
            return Err(Error::NonFinite("j_gen".into()));
        }
        self.record(&mut steps, Step::GeneratorLoss)?;

        // 4. generator update
        let grads = gen.total.backward()?;
        self.opt_gen.step(&grads, lr)?;
        updates.push((Step::GeneratorUpdate, Group::Generators));
        drop(grads);
        self.record(&mut steps, Step::GeneratorUpdate)?;

        // 5. discriminator objective against the pooled history
        let p_real = self.nets.d.forward(&x_bar)?;
        let x_prime = self.pool.push_and_sample_batch(&x)?;
        let p_gen_pool = self.nets.d.forward(&x_prime)?;
        let j_disc = loss::discriminator_loss(&p_real, &p_gen_pool)?;
        losses.j_disc = scalar(&j_disc)?;
        if !losses.j_disc.is_finite() {
            ensure_finite(p_real.tensor(), "real patch map")?;
            ensure_finite(p_gen_pool.tensor(), "pooled patch map")?;
            return Err(Error::NonFinite("j_disc".into()));
        }
        self.record(&mut steps, Step::DiscriminatorLoss)?;

        // 6. discriminator update
        let grads = j_disc.backward()?;
        self.opt_disc.step(&grads, lr)?;
        updates.push((Step::DiscriminatorUpdate, Group::Discriminator));
        self.record(&mut steps, Step::DiscriminatorUpdate)?;

        self.iteration += 1;
        Ok(IterationTrace {
            epoch: self.epoch + 1,
            iteration: it,
            lr,
            initial,
            steps,
            updates,
            losses,
            latent_snr_db,
        })
    }
}
