//! Inversion discriminator: a query encoder and its momentum shadow, scoring an
//! (inversion, input) pair by the cosine similarity of their embeddings.

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::ImageBatch;
use crate::nn::{cosine_rows, leaky_relu, resize_bilinear, Conv2d, Linear};
use crate::params::{ParamStore, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub embed_dim: usize,
    pub momentum: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 16,
            max_channels: 64,
            embed_dim: 256,
            momentum: 0.999,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return Err(Error::Config(format!(
                "discriminator resolution {} must be a power of two ≥ 4",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// From-RGB 1×1 conv, stride-2 3×3 convs down to 4×4, then a linear embedding.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    resolution: usize,
    from_rgb: Conv2d,
    downs: Vec<Conv2d>,
    head: Linear,
}

impl ConvEncoder {
    pub fn new(scope: &Scope, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let steps = (cfg.resolution / 4).trailing_zeros() as usize;
        let ch = |i: usize| (cfg.base_channels << i).min(cfg.max_channels);
        let from_rgb = Conv2d::new(&scope.pp("from_rgb"), 3, ch(0), 1, 1, 0)?;
        let downs = (0..steps)
            .map(|i| Conv2d::new(&scope.pp(format!("down{i}")), ch(i), ch(i + 1), 3, 2, 1))
            .collect::<Result<_>>()?;
        let head = Linear::new(&scope.pp("head"), ch(steps) * 16, cfg.embed_dim, true)?;
        Ok(Self {
            resolution: cfg.resolution,
            from_rgb,
            downs,
            head,
        })
    }

    pub fn forward(&self, img: &ImageBatch) -> Result<Tensor> {
        if img.side() != self.resolution {
            return shape_err(format!(
                "discriminator expects {0}x{0} images, got {1}x{1}",
                self.resolution,
                img.side()
            ));
        }
        let mut x = leaky_relu(&self.from_rgb.forward(img.tensor())?, 0.2)?;
        for d in &self.downs {
            x = leaky_relu(&d.forward(&x)?, 0.2)?;
        }
        self.head.forward(&x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Query,
    Momentum,
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    query_store: ParamStore,
    momentum_store: ParamStore,
    query: ConvEncoder,
    momentum_enc: ConvEncoder,
    momentum: f64,
}

impl DualEncoder {
    /// The momentum encoder starts as an exact copy of the query encoder and is
    /// built from a frozen view, so it never enters an autograd graph.
    pub fn new(
        query_store: &ParamStore,
        momentum_store: &ParamStore,
        cfg: &DiscriminatorConfig,
    ) -> Result<Self> {
        let query = ConvEncoder::new(&query_store.root(), cfg)?;
        let momentum_enc = ConvEncoder::new(&momentum_store.frozen().root(), cfg)?;
        momentum_store.copy_from(query_store)?;
        Ok(Self {
            query_store: query_store.clone(),
            momentum_store: momentum_store.clone(),
            query,
            momentum_enc,
            momentum: cfg.momentum,
        })
    }

    pub fn query_store(&self) -> &ParamStore {
        &self.query_store
    }

    pub fn momentum_store(&self) -> &ParamStore {
        &self.momentum_store
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn encode(&self, img: &ImageBatch, branch: Branch) -> Result<Tensor> {
        match branch {
            Branch::Query => self.query.forward(img),
            Branch::Momentum => Ok(self.momentum_enc.forward(&img.detach())?.detach()),
        }
    }

    /// `cos(m_q(a_i), m_k(b_i))` per pair, `[batch]`.
    pub fn score(&self, a: &ImageBatch, b: &ImageBatch) -> Result<Tensor> {
        if a.batch() != b.batch() {
            return shape_err(format!(
                "score needs equal batch sizes, got {} and {}",
                a.batch(),
                b.batch()
            ));
        }
        let qa = self.encode(a, Branch::Query)?;
        let kb = self.encode(b, Branch::Momentum)?;
        cosine_with_check(&qa, &kb)
    }

    /// `k ← m·k + (1 − m)·q`, element-wise. The query encoder is untouched.
    pub fn momentum_update(&self) -> Result<()> {
        let m = self.momentum;
        for (name, k) in self.momentum_store.vars() {
            let q = self
                .query_store
                .var(&name)
                .ok_or_else(|| Error::Shape(format!("query encoder has no parameter `{name}`")))?;
            let next = ((k.as_tensor() * m)? + (q.as_tensor() * (1.0 - m))?)?;
            k.set(&next)?;
        }
        Ok(())
    }
}

pub fn cosine_with_check(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    for (t, side) in [(a, "query embedding"), (b, "momentum embedding")] {
        let norms = t
            .sqr()?
            .sum(D::Minus1)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        if norms.iter().any(|&n| n <= 1e-24) {
            return Err(Error::ZeroNorm(side));
        }
    }
    cosine_rows(a, b)
}

/// Single-encoder scalar discriminator, the conventional alternative to the
/// inversion discriminator.
#[derive(Debug, Clone)]
pub struct PlainDiscriminator {
    encoder: ConvEncoder,
    out: Linear,
}

impl PlainDiscriminator {
    pub fn new(scope: &Scope, cfg: &DiscriminatorConfig) -> Result<Self> {
        Ok(Self {
            encoder: ConvEncoder::new(&scope.pp("encoder"), cfg)?,
            out: Linear::new(&scope.pp("out"), cfg.embed_dim, 1, true)?,
        })
    }

    /// Realness score per image, `[batch]`.
    pub fn score(&self, img: &ImageBatch) -> Result<Tensor> {
        let e = leaky_relu(&self.encoder.forward(img)?, 0.2)?;
        Ok(self.out.forward(&e)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_resize: bool,
    pub flip: bool,
    pub color_jitter: bool,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_resize: true,
            flip: true,
            color_jitter: true,
            min_crop: 0.75,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    Ok(x.index_select(&Tensor::from_vec(idx, w, x.device())?, 3)?)
}

fn strong(x: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (_, _, side, _) = x.dims4()?;
    let mut y = x.clone();
    if cfg.crop_resize {
        let frac = rng.random_range(cfg.min_crop.clamp(0.05, 1.0)..=1.0);
        let crop = ((side as f64 * frac).round() as usize).clamp(1, side);
        let oy = rng.random_range(0..=side - crop);
        let ox = rng.random_range(0..=side - crop);
        y = y.narrow(2, oy, crop)?.narrow(3, ox, crop)?.contiguous()?;
        if crop != side {
            y = resize_bilinear(&y, side, side, false)?;
        }
    }
    if cfg.flip && rng.random_bool(0.5) {
        y = flip_horizontal(&y)?;
    }
    if cfg.color_jitter {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness);
        let c = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        let mean = y.mean_keepdim(1)?.mean_keepdim(2)?.mean_keepdim(3)?;
        y = ((y.broadcast_sub(&mean)? * c)?.broadcast_add(&mean)? + b)?;
    }
    Ok(y.clamp(-1.0, 1.0)?)
}

fn weak(x: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if cfg.flip && rng.random_bool(0.5) {
        flip_horizontal(x)
    } else {
        Ok(x.clone())
    }
}

/// Unbalanced augmentation: the first batch gets the strong pipeline, the second
/// the weak one, each sample drawing its own transform from `seed`.
pub fn augment_pair(
    a: &ImageBatch,
    b: &ImageBatch,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(ImageBatch, ImageBatch)> {
    if a.tensor().dims() != b.tensor().dims() {
        return shape_err(format!(
            "augment_pair needs equal shapes, got {:?} and {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        ));
    }
    if !cfg.enabled {
        return Ok((a.clone(), b.clone()));
    }
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let mut outs_a = Vec::with_capacity(a.batch());
    let mut outs_b = Vec::with_capacity(a.batch());
    for i in 0..a.batch() {
        outs_a.push(strong(&a.tensor().narrow(0, i, 1)?, cfg, &mut rng_a)?);
        outs_b.push(weak(&b.tensor().narrow(0, i, 1)?, cfg, &mut rng_b)?);
    }
    Ok((
        ImageBatch::new(Tensor::cat(&outs_a, 0)?)?,
        ImageBatch::new(Tensor::cat(&outs_b, 0)?)?,
    ))
}
