//! Training objectives.
//!
//! Every loss returns a scalar tensor so it can be differentiated. The
//! perceptual and identity losses take pluggable feature networks; the frozen,
//! randomly initialized ones defined here stand in for pretrained networks.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::map2style::LatentCodes;
use crate::nn::{cosine_rows, downsample_box, leaky_relu, Conv2d, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Pixel MSE.
    pub l2: f64,
    /// Perceptual distance.
    pub lpips: f64,
    /// Identity distance.
    pub id: f64,
    /// Distribution alignment.
    pub da: f64,
    /// Adversarial (encoder side).
    pub adv: f64,
    /// Pull toward the mean style vector; only used in super-resolution mode.
    pub sr_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 1.0,
            lpips: 0.8,
            id: 0.1,
            da: 0.1,
            adv: 1e-4,
            sr_reg: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l2", self.l2),
            ("lpips", self.lpips),
            ("id", self.id),
            ("da", self.da),
            ("adv", self.adv),
            ("sr_reg", self.sr_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

pub fn pixel_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y, "pixel loss")?;
    Ok((x - y)?.sqr()?.mean_all()?)
}

pub trait FeatureExtractor {
    /// One or more `[batch, channels, h, w]` feature maps.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// The image itself as a single feature map.
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Frozen, seeded stack of strided convolutions.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    convs: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, dtype: DType, dev: &candle_core::Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, dev).frozen();
        let scope = store.root();
        let widths = [3, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&scope.pp(format!("conv{i}")), w[0], w[1], 3, 2, 1))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, 0.2)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn unit_normalize_channels(f: &Tensor) -> Result<Tensor> {
    let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(f.broadcast_div(&(norm + 1e-10)?)?)
}

/// Mean over layers of the spatially averaged squared distance between
/// channel-normalized feature vectors.
pub fn perceptual_loss(x: &Tensor, y: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(x, y, "perceptual loss")?;
    let fa = fx.features(x)?;
    let fb = fx.features(y)?;
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::Config("feature extractor returned no feature maps".into()));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (unit_normalize_channels(a)? - unit_normalize_channels(b)?)?
            .sqr()?
            .sum(1)?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok((total.unwrap() / fa.len() as f64)?)
}

pub trait IdentityEmbedder {
    /// `[batch, e_dim]`; any scale, normalized by the loss.
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
}

/// Box-pools the image to 16×16 and applies a frozen seeded projection.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    proj: Linear,
    pooled_side: usize,
}

impl RandomProjectionEmbedder {
    pub fn new(seed: u64, e_dim: usize, dtype: DType, dev: &candle_core::Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, dev).frozen();
        let pooled_side = 16;
        Ok(Self {
            proj: Linear::new(&store.root().pp("proj"), 3 * pooled_side * pooled_side, e_dim, false)?,
            pooled_side,
        })
    }
}

impl IdentityEmbedder for RandomProjectionEmbedder {
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, _) = x.dims4()?;
        let pooled = if h > self.pooled_side {
            downsample_box(x, h / self.pooled_side)?
        } else {
            x.clone()
        };
        self.proj.forward(&pooled.reshape((b, ()))?)
    }
}

fn check_nonzero_rows(e: &Tensor, what: &'static str) -> Result<()> {
    let norms = e.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if norms.iter().any(|&n| n <= 1e-24) {
        return Err(Error::ZeroNorm(what));
    }
    Ok(())
}

/// `1 - cos(embed(x), embed(y))`, averaged over the batch.
pub fn id_loss(x: &Tensor, y: &Tensor, embedder: &dyn IdentityEmbedder) -> Result<Tensor> {
    same_shape(x, y, "identity loss")?;
    let ex = embedder.embed(x)?;
    let ey = embedder.embed(y)?;
    check_nonzero_rows(&ex, "identity embedding")?;
    check_nonzero_rows(&ey, "identity embedding")?;
    Ok((1.0 - cosine_rows(&ex, &ey)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaStrategy {
    /// Each flattened code row against `w[row % m]`.
    #[default]
    PerVector,
    /// Batch-averaged softmax distributions on both sides.
    MeanDistribution,
}

/// KL divergence from softmax-normalized latent codes to softmax-normalized
/// style vectors.
pub fn da_loss(codes: &LatentCodes, w: &Tensor, strategy: DaStrategy) -> Result<Tensor> {
    let (m, d) = w.dims2()?;
    if m == 0 {
        return Err(Error::Config("distribution alignment needs at least one style vector".into()));
    }
    if d != codes.style_dim() {
        return shape_err(format!(
            "style vectors have dim {d}, codes have {}",
            codes.style_dim()
        ));
    }
    let rows = codes.tensor().reshape(((), d))?;
    match strategy {
        DaStrategy::PerVector => {
            let r = rows.dims()[0];
            let idx: Vec<u32> = (0..r).map(|i| (i % m) as u32).collect();
            let idx = Tensor::from_vec(idx, r, w.device())?;
            let paired = w.index_select(&idx, 0)?;
            let log_p = candle_nn::ops::log_softmax(&rows, D::Minus1)?;
            let log_q = candle_nn::ops::log_softmax(&paired, D::Minus1)?;
            let kl = (log_p.exp()? * (&log_p - log_q)?)?.sum(D::Minus1)?;
            Ok(kl.relu()?.mean_all()?)
        }
        DaStrategy::MeanDistribution => {
            let p = candle_nn::ops::softmax(&rows, D::Minus1)?.mean(0)?;
            let q = candle_nn::ops::softmax(w, D::Minus1)?.mean(0)?;
            Ok((&p * (p.log()? - q.log()?)?)?.sum_all()?.relu()?)
        }
    }
}

/// Least-squares discriminator objective on cosine scores: real pairs pushed to
/// +1, inverted pairs to −1.
pub fn adv_d_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_real, d_fake, "discriminator loss")?;
    Ok(((d_real - 1.0)?.sqr()? + (d_fake + 1.0)?.sqr()?)?.mean_all()?)
}

/// Least-squares encoder objective: inverted pairs pushed to +1.
pub fn adv_g_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok((d_fake - 1.0)?.sqr()?.mean_all()?)
}

/// Element-wise mean squared deviation of every code row from `w_avg`.
pub fn sr_regularization(codes: &LatentCodes, w_avg: &Tensor) -> Result<Tensor> {
    if w_avg.dims() != [codes.style_dim()] {
        return shape_err(format!(
            "mean style vector has shape {:?}, codes have dim {}",
            w_avg.dims(),
            codes.style_dim()
        ));
    }
    Ok(codes.tensor().broadcast_sub(w_avg)?.sqr()?.mean_all()?)
}

/// Scalar loss components of one forward pass. Absent terms are skipped.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub pixel: Tensor,
    pub perceptual: Option<Tensor>,
    pub id: Option<Tensor>,
    pub da: Option<Tensor>,
    pub adv: Option<Tensor>,
    pub sr_reg: Option<Tensor>,
}

impl LossTerms {
    pub fn pixel_only(pixel: Tensor) -> Self {
        Self {
            pixel,
            perceptual: None,
            id: None,
            da: None,
            adv: None,
            sr_reg: None,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("pixel", &self.pixel)];
        for (name, t) in [
            ("perceptual", &self.perceptual),
            ("id", &self.id),
            ("da", &self.da),
            ("adv", &self.adv),
            ("sr_reg", &self.sr_reg),
        ] {
            if let Some(t) = t {
                v.push((name, t));
            }
        }
        v
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ1·L2 + λ2·LPIPS + λ3·ID + λ4·DA + λ5·adv (+ λ_sr·reg)`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    for (name, t) in terms.named() {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let mut total = (&terms.pixel * w.l2)?;
    for (t, k) in [
        (&terms.perceptual, w.lpips),
        (&terms.id, w.id),
        (&terms.da, w.da),
        (&terms.adv, w.adv),
        (&terms.sr_reg, w.sr_reg),
    ] {
        if let Some(t) = t {
            total = (total + (t * k)?)?;
        }
    }
    Ok(total)
}
