//! Miniature style-based generator: mapping network, affine style injection and
//! a noise-free synthesis network from a learned 4×4 constant.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::ImageBatch;
use crate::map2style::{n_styles_for, LatentCodes};
use crate::nn::{leaky_relu, resize_bilinear, Conv2d, Linear};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub style_dim: usize,
    pub base_resolution: usize,
    pub output_resolution: usize,
    /// Feature channels per resolution, starting at `base_resolution`.
    pub channels: Vec<usize>,
    pub mapping_depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        Self {
            style_dim: 512,
            base_resolution: 4,
            output_resolution: 64,
            channels: vec![64, 64, 32, 32, 16],
            mapping_depth: 8,
        }
    }

    pub fn n_resolutions(&self) -> usize {
        (self.output_resolution / self.base_resolution).trailing_zeros() as usize + 1
    }

    pub fn n_styles(&self) -> usize {
        n_styles_for(self.output_resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.output_resolution.is_power_of_two()
            || self.base_resolution != 4
            || self.output_resolution < self.base_resolution
        {
            return bad(format!(
                "output resolution {} must be a power of two ≥ base resolution 4",
                self.output_resolution
            ));
        }
        if self.channels.len() != self.n_resolutions() {
            return bad(format!(
                "{} channel entries for {} resolutions",
                self.channels.len(),
                self.n_resolutions()
            ));
        }
        if self.style_dim == 0 || self.channels.contains(&0) {
            return bad("zero-sized generator dimension".into());
        }
        Ok(())
    }
}

/// Affine-modulated 3×3 block: instance-normalize, scale/shift from the style
/// code, convolve, leaky ReLU. Optionally upsamples 2× first.
#[derive(Debug, Clone)]
struct StyledConv {
    affine: Linear,
    conv: Conv2d,
    upsample: bool,
    in_c: usize,
}

impl StyledConv {
    fn new(scope: &Scope, style_dim: usize, in_c: usize, out_c: usize, upsample: bool) -> Result<Self> {
        Ok(Self {
            affine: Linear::new(&scope.pp("affine"), style_dim, 2 * in_c, true)?,
            conv: Conv2d::new(&scope.pp("conv"), in_c, out_c, 3, 1, 1)?,
            upsample,
            in_c,
        })
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let x = if self.upsample {
            let (_, _, h, wd) = x.dims4()?;
            resize_bilinear(x, 2 * h, 2 * wd, false)?
        } else {
            x.clone()
        };
        let (b, c, h, wd) = x.dims4()?;
        let flat = x.reshape((b, c, h * wd))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let style = self.affine.forward(w)?; // [b, 2c]
        let scale = (style.narrow(1, 0, self.in_c)? + 1.0)?.unsqueeze(2)?;
        let shift = style.narrow(1, self.in_c, self.in_c)?.unsqueeze(2)?;
        let modulated = normed.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let y = self.conv.forward(&modulated.reshape((b, c, h, wd))?)?;
        leaky_relu(&y, 0.2)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    mapping: Vec<Linear>,
    constant: Tensor,
    blocks: Vec<StyledConv>,
    to_rgb: Conv2d,
}

impl Generator {
    pub fn new(scope: &Scope, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.style_dim;
        let he = Init::Normal {
            std: (2.0 / (1.04 * d as f64)).sqrt(),
        };
        let mapping = (0..cfg.mapping_depth)
            .map(|i| -> Result<Linear> {
                let s = scope.pp(format!("mapping.fc{i}"));
                Ok(Linear::from_parts(
                    s.get((d, d), "weight", he)?,
                    Some(s.get(d, "bias", Init::Zeros)?),
                ))
            })
            .collect::<Result<_>>()?;
        let c0 = cfg.channels[0];
        let constant = scope.get((1, c0, 4, 4), "synthesis.const", Init::Normal { std: 1.0 })?;
        let mut blocks = Vec::with_capacity(cfg.n_styles());
        let mut in_c = c0;
        for (r, &out_c) in cfg.channels.iter().enumerate() {
            for j in 0..2 {
                let idx = 2 * r + j;
                let upsample = r > 0 && j == 0;
                blocks.push(StyledConv::new(
                    &scope.pp(format!("synthesis.block{idx:02}")),
                    d,
                    in_c,
                    out_c,
                    upsample,
                )?);
                in_c = out_c;
            }
        }
        let to_rgb = Conv2d::new(&scope.pp("synthesis.to_rgb"), in_c, 3, 1, 1, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            mapping,
            constant,
            blocks,
            to_rgb,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.constant.dtype()
    }

    pub fn device(&self) -> &Device {
        self.constant.device()
    }

    /// `z: [n, style_dim]` → `w: [n, style_dim]`.
    pub fn mapping(&self, z: &Tensor) -> Result<Tensor> {
        if z.dim(D::Minus1)? != self.cfg.style_dim {
            return shape_err(format!(
                "mapping expects style_dim {}, got {:?}",
                self.cfg.style_dim,
                z.dims()
            ));
        }
        let mut x = z.clone();
        let last = self.mapping.len().saturating_sub(1);
        for (i, fc) in self.mapping.iter().enumerate() {
            x = fc.forward(&x)?;
            if i < last {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }

    /// `n` style vectors from standard-normal `z` drawn with a seeded RNG.
    pub fn sample_w(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Config("sample_w needs n ≥ 1".into()));
        }
        let d = self.cfg.style_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::from_vec(z, (n, d), self.device())?.to_dtype(self.dtype())?;
        self.mapping(&z)
    }

    /// Mean style vector over `n` seeded samples, `[style_dim]`.
    pub fn mean_w(&self, n: usize, seed: u64) -> Result<Tensor> {
        Ok(self.sample_w(n, seed)?.mean(0)?)
    }

    pub fn synthesize(&self, codes: &LatentCodes) -> Result<ImageBatch> {
        Ok(self.synthesize_trace(codes)?.0)
    }

    /// The image plus each block's output activation, in block order.
    pub fn synthesize_trace(&self, codes: &LatentCodes) -> Result<(ImageBatch, Vec<Tensor>)> {
        let n = self.cfg.n_styles();
        if codes.n_styles() != n || codes.style_dim() != self.cfg.style_dim {
            return shape_err(format!(
                "generator consumes {n}x{} codes, got {}x{}",
                self.cfg.style_dim,
                codes.n_styles(),
                codes.style_dim()
            ));
        }
        let b = codes.batch();
        let c0 = self.cfg.channels[0];
        let mut x = self.constant.broadcast_as((b, c0, 4, 4))?.contiguous()?;
        let mut trace = Vec::with_capacity(n);
        for (i, block) in self.blocks.iter().enumerate() {
            let w = codes.tensor().narrow(1, i, 1)?.squeeze(1)?;
            x = block.forward(&x, &w)?;
            trace.push(x.clone());
        }
        let img = self.to_rgb.forward(&x)?.tanh()?;
        Ok((ImageBatch::new(img)?, trace))
    }
}

/// Rows listed in `layers` come from `b`, the rest from `a`.
pub fn style_mix(a: &LatentCodes, b: &LatentCodes, layers: &[usize]) -> Result<LatentCodes> {
    if a.tensor().dims() != b.tensor().dims() {
        return shape_err(format!(
            "cannot mix codes of shape {:?} and {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        ));
    }
    let n = a.n_styles();
    if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
        return Err(Error::StyleIndex { index: bad, len: n });
    }
    let rows = (0..n)
        .map(|i| {
            let src = if layers.contains(&i) { b } else { a };
            src.tensor().narrow(1, i, 1)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LatentCodes::new(Tensor::cat(&rows, 1)?)
}
