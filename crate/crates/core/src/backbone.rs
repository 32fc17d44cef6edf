//! Four-stage hierarchical windowed-attention encoder.

use candle_core::Tensor;

use crate::attention::{QueryKind, WindowAttention};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{EncoderConfig, ImageBatch, PatchEmbed, TokenGrid};
use crate::nn::{LayerNorm, Linear};
use crate::params::Scope;

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(&scope.pp("fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn forward(&self, x: &candle_core::Tensor) -> Result<candle_core::Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
/// Without an attention layer it degenerates to a residual MLP block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: Option<LayerNorm>,
    attn: Option<WindowAttention>,
    norm2: LayerNorm,
    mlp: Mlp,
    shift: usize,
}

impl TransformerBlock {
    pub fn new(
        scope: &Scope,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        kind: QueryKind,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Some(LayerNorm::new(&scope.pp("norm1"), dim)?),
            attn: Some(WindowAttention::new(&scope.pp("attn"), dim, heads, window, kind)?),
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, 4)?,
            shift,
        })
    }

    /// A block with the attention sub-layer removed.
    pub fn mlp_only(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: None,
            attn: None,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, 4)?,
            shift: 0,
        })
    }

    pub fn from_parts(
        norm1: LayerNorm,
        attn: WindowAttention,
        norm2: LayerNorm,
        mlp: Mlp,
        shift: usize,
    ) -> Self {
        Self {
            norm1: Some(norm1),
            attn: Some(attn),
            norm2,
            mlp,
            shift,
        }
    }

    pub fn attention(&self) -> Option<&WindowAttention> {
        self.attn.as_ref()
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    /// Received-attention map of this block for `grid`, `[batch, h, w]`.
    pub fn received_attention(&self, grid: &TokenGrid) -> Result<Option<Tensor>> {
        match (&self.norm1, &self.attn) {
            (Some(norm1), Some(attn)) => {
                let normed = grid.with_data(norm1.forward(grid.data())?)?;
                Ok(Some(attn.received_attention(&normed, self.shift)?))
            }
            _ => Ok(None),
        }
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let mut x = grid.data().clone();
        if let (Some(norm1), Some(attn)) = (&self.norm1, &self.attn) {
            let normed = grid.with_data(norm1.forward(&x)?)?;
            x = (x + attn.forward(&normed, self.shift)?.data())?;
        }
        let y = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        grid.with_data(y)
    }
}

/// Gathers each 2×2 block into one token of width `4·dim`, ordered
/// `(row 0, col 0), (row 1, col 0), (row 0, col 1), (row 1, col 1)`.
pub fn merge_gather(grid: &TokenGrid) -> Result<TokenGrid> {
    let (h, w) = (grid.h(), grid.w());
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("patch merging needs an even grid, got {h}x{w}"));
    }
    let (b, c) = (grid.batch(), grid.dim());
    let t = grid
        .data()
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 4, 2, 5))?
        .contiguous()?
        .reshape((b, (h / 2) * (w / 2), 4 * c))?;
    TokenGrid::new(t, h / 2, w / 2)
}

#[derive(Debug, Clone)]
pub struct PatchMerging {
    norm: Option<LayerNorm>,
    reduction: Linear,
}

impl PatchMerging {
    /// `dim` → `out_dim` per merged token (normally `out_dim == 2 * dim`).
    pub fn new(scope: &Scope, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: Some(LayerNorm::new(&scope.pp("norm"), 4 * dim)?),
            reduction: Linear::new(&scope.pp("reduction"), 4 * dim, out_dim, false)?,
        })
    }

    pub fn from_parts(norm: Option<LayerNorm>, reduction: Linear) -> Self {
        Self { norm, reduction }
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let g = merge_gather(grid)?;
        if g.dim() != self.reduction.in_dim() {
            return shape_err(format!(
                "patch merging expects input dim {}, got {}",
                self.reduction.in_dim() / 4,
                grid.dim()
            ));
        }
        let x = match &self.norm {
            Some(n) => n.forward(g.data())?,
            None => g.data().clone(),
        };
        g.with_data(self.reduction.forward(&x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    side: usize,
    dim: usize,
    blocks: Vec<TransformerBlock>,
}

impl Stage {
    /// Blocks alternate between unshifted and half-window-shifted attention. A
    /// window covering the whole grid is never shifted.
    pub fn new(scope: &Scope, cfg: &EncoderConfig, stage: usize) -> Result<Self> {
        let ws = cfg.effective_window(stage);
        let side = cfg.stage_side(stage);
        let dim = cfg.stage_dims[stage];
        let blocks = (0..cfg.stage_depths[stage])
            .map(|i| {
                let shift = if i % 2 == 1 && ws < side { ws / 2 } else { 0 };
                TransformerBlock::new(
                    &scope.pp(format!("block{i}")),
                    dim,
                    cfg.stage_heads[stage],
                    ws,
                    shift,
                    QueryKind::Projected,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { side, dim, blocks })
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        if grid.h() != self.side || grid.w() != self.side || grid.dim() != self.dim {
            return shape_err(format!(
                "stage expects a {0}x{0}x{1} grid, got {2}x{3}x{4}",
                self.side,
                self.dim,
                grid.h(),
                grid.w(),
                grid.dim()
            ));
        }
        let mut x = grid.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// Backbone outputs, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<TokenGrid>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<TokenGrid>) -> Result<Self> {
        if levels.is_empty() {
            return shape_err("empty pyramid");
        }
        for pair in levels.windows(2) {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if fine.len() != 4 * coarse.len() || fine.h() != 2 * coarse.h() {
                return shape_err(format!(
                    "pyramid level {}x{} is not twice the side of the next level {}x{}",
                    fine.h(),
                    fine.w(),
                    coarse.h(),
                    coarse.w()
                ));
            }
            if fine.batch() != coarse.batch() {
                return shape_err("pyramid levels disagree on batch size");
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[TokenGrid] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &TokenGrid {
        &self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: EncoderConfig,
    embed: PatchEmbed,
    stages: Vec<Stage>,
    merges: Vec<PatchMerging>,
}

impl Backbone {
    pub fn new(scope: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(&scope.pp("patch_embed"), cfg.patch_size, cfg.stage_dims[0])?;
        let stages = (0..4)
            .map(|s| Stage::new(&scope.pp(format!("stage{s}")), cfg, s))
            .collect::<Result<_>>()?;
        let merges = (0..3)
            .map(|s| {
                PatchMerging::new(
                    &scope.pp(format!("merge{s}")),
                    cfg.stage_dims[s],
                    cfg.stage_dims[s + 1],
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            merges,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Received-attention maps of every block of `stage`, in block order.
    pub fn attention_maps(&self, img: &ImageBatch, stage: usize) -> Result<Vec<Tensor>> {
        if stage >= self.stages.len() {
            return Err(Error::Config(format!("stage {stage} out of range 0..4")));
        }
        let mut x = self.embed.forward(img)?;
        for s in 0..stage {
            x = self.stages[s].forward(&x)?;
            x = self.merges[s].forward(&x)?;
        }
        let mut maps = Vec::new();
        for block in self.stages[stage].blocks() {
            if let Some(m) = block.received_attention(&x)? {
                maps.push(m);
            }
            x = block.forward(&x)?;
        }
        Ok(maps)
    }

    pub fn encode_pyramid(&self, img: &ImageBatch) -> Result<FeaturePyramid> {
        if img.side() != self.cfg.input_resolution {
            return Err(Error::Shape(format!(
                "encoder expects {0}x{0} images, got {1}x{1}",
                self.cfg.input_resolution,
                img.side()
            )));
        }
        let mut x = self.embed.forward(img)?;
        let mut levels = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.merges[s - 1].forward(&x)?;
            }
            x = stage.forward(&x)?;
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels)
    }
}
