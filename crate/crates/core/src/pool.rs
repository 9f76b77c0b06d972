//! Ring buffer of generated images used to update the discriminator with a history of
//! generator outputs.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub const DEFAULT_CAPACITY: usize = 50;

/// How the pool answers a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoolPolicy {
    /// Overwrite the oldest slot, then return a uniformly drawn stored image.
    #[default]
    Uniform,
    /// Fill up first; afterwards with probability 1/2 return the new image, otherwise swap
    /// it with a random stored one and return the old image.
    KeepOrSwap,
}

impl std::str::FromStr for PoolPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PoolPolicy::Uniform),
            "keep-or-swap" => Ok(PoolPolicy::KeepOrSwap),
            other => Err(Error::Config(format!("unknown pool policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    policy: PoolPolicy,
    slots: Vec<Tensor>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, policy: PoolPolicy, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("image pool capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            policy,
            slots: Vec::with_capacity(capacity),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn policy(&self) -> PoolPolicy {
        self.policy
    }

    /// Stored images in slot order.
    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Position in the pool's random stream, for checkpointing.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores contents and random stream position saved from another pool.
    pub fn restore(&mut self, slots: Vec<Tensor>, cursor: usize, word_pos: u128) -> Result<()> {
        if slots.len() > self.capacity || cursor >= self.capacity {
            return Err(Error::Invalid(format!(
                "pool state with {} slots and cursor {cursor} exceeds capacity {}",
                slots.len(),
                self.capacity
            )));
        }
        self.slots = slots.into_iter().map(|t| t.detach()).collect();
        self.cursor = cursor;
        self.rng.set_word_pos(word_pos);
        Ok(())
    }

    /// Inserts one `(C, H, W)` image and returns an image to show the discriminator.
    ///
    /// The stored copy is detached from the autograd graph, so the returned image never
    /// carries gradient back into the generator that produced it.
    pub fn push_and_sample(&mut self, x: &Image) -> Result<Image> {
        if x.is_batched() {
            return Err(Error::Shape("push_and_sample takes one (C, H, W) image".into()));
        }
        if let Some(first) = self.slots.first() {
            if first.dims() != x.tensor().dims() {
                return Err(Error::Shape(format!(
                    "pool holds {:?} images, got {:?}",
                    first.dims(),
                    x.tensor().dims()
                )));
            }
        }
        // force a copy so later in-place updates of the source cannot alias the pool
        let x = x.tensor().detach().copy()?;
        let out = match self.policy {
            PoolPolicy::Uniform => {
                if self.slots.len() < self.capacity {
                    self.slots.push(x);
                } else {
                    self.slots[self.cursor] = x;
                }
                self.cursor = (self.cursor + 1) % self.capacity;
                let k = self.rng.random_range(0..self.slots.len());
                self.slots[k].clone()
            }
            PoolPolicy::KeepOrSwap => {
                if self.slots.len() < self.capacity {
                    self.slots.push(x.clone());
                    self.cursor = self.slots.len() % self.capacity;
                    x
                } else if self.rng.random::<f64>() < 0.5 {
                    let k = self.rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.slots[k], x)
                } else {
                    x
                }
            }
        };
        Image::new(out)
    }

    /// [`push_and_sample`](Self::push_and_sample) for every image of a `(B, C, H, W)` batch.
    pub fn push_and_sample_batch(&mut self, batch: &Image) -> Result<Image> {
        if !batch.is_batched() {
            return self.push_and_sample(batch);
        }
        let t = batch.tensor();
        let picked = (0..t.dim(0)?)
            .map(|b| {
                let single = Image::new(t.get(b)?)?;
                self.push_and_sample(&single).map(Image::into_tensor)
            })
            .collect::<Result<Vec<_>>>()?;
        Image::new(Tensor::stack(&picked, 0)?)
    }
}
