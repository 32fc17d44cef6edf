//! Per-style towers mapping fused pyramid levels to extended-latent codes.
//!
//! A tower alternates patch merging with a transformer block until 16 tokens
//! remain, then applies merge-shaped linear reductions down to a single token and
//! projects it to `style_dim`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::QueryKind;
use crate::backbone::{merge_gather, FeaturePyramid, PatchMerging, TransformerBlock};
use crate::error::{shape_err, Error, Result};
use crate::geometry::TokenGrid;
use crate::nn::{leaky_relu, Linear};
use crate::params::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerBlockKind {
    /// Window attention with a learnable query bank.
    LearnableQuery,
    /// Plain window self-attention.
    WindowSelfAttention,
    /// No attention at all; residual MLP blocks only.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2StyleConfig {
    pub style_dim: usize,
    pub n_styles: usize,
    /// `level_groups[level]` lists the style indices owned by pyramid `level` (finest first).
    pub level_groups: Vec<Vec<usize>>,
    pub lq_window: usize,
    pub block: TowerBlockKind,
}

/// Styles a generator of the given output side consumes.
pub fn n_styles_for(output_resolution: usize) -> usize {
    2 * (output_resolution.trailing_zeros() as usize - 1)
}

/// Splits `n_styles` over `levels` pyramid levels. Index 0 goes to the coarsest
/// level; remainders go to the middle levels first. For 14 styles over 4 levels:
/// coarsest 0–2, then 3–6, 7–10, and the finest level 11–13.
pub fn default_level_groups(n_styles: usize, levels: usize) -> Vec<Vec<usize>> {
    let base = n_styles / levels;
    let mut sizes = vec![base; levels]; // coarsest first
    let mut order: Vec<usize> = (1..levels.saturating_sub(1)).collect();
    order.push(0);
    if levels > 1 {
        order.push(levels - 1);
    }
    for &k in order.iter().cycle().take(n_styles % levels) {
        sizes[k] += 1;
    }
    let mut groups = vec![Vec::new(); levels];
    let mut next = 0;
    for (k, size) in sizes.into_iter().enumerate() {
        groups[levels - 1 - k] = (next..next + size).collect();
        next += size;
    }
    groups
}

impl Map2StyleConfig {
    pub fn for_resolution(output_resolution: usize, style_dim: usize) -> Self {
        let n_styles = n_styles_for(output_resolution);
        Self {
            style_dim,
            n_styles,
            level_groups: default_level_groups(n_styles, 4),
            lq_window: 2,
            block: TowerBlockKind::LearnableQuery,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_styles];
        for group in &self.level_groups {
            for &s in group {
                if s >= self.n_styles {
                    return Err(Error::Config(format!(
                        "style index {s} out of range for {} styles",
                        self.n_styles
                    )));
                }
                if std::mem::replace(&mut seen[s], true) {
                    return Err(Error::Config(format!("style index {s} assigned twice")));
                }
            }
        }
        if let Some(gap) = seen.iter().position(|&x| !x) {
            return Err(Error::Config(format!("style index {gap} has no pyramid level")));
        }
        Ok(())
    }

    pub fn owner_level(&self, style: usize) -> Option<usize> {
        self.level_groups.iter().position(|g| g.contains(&style))
    }
}

/// Codes in extended latent space, `[batch, n_styles, style_dim]`.
#[derive(Debug, Clone)]
pub struct LatentCodes(Tensor);

impl LatentCodes {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return shape_err(format!("latent codes must be 3-D, got {:?}", t.dims()));
        }
        Ok(Self(t))
    }

    /// Every row equal to the corresponding `w` (`[batch, style_dim]`).
    pub fn broadcast_w(w: &Tensor, n_styles: usize) -> Result<Self> {
        let (b, d) = w.dims2()?;
        Self::new(w.unsqueeze(1)?.broadcast_as((b, n_styles, d))?.contiguous()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn n_styles(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn style_dim(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

#[derive(Debug, Clone)]
pub struct Tower {
    input_side: usize,
    input_dim: usize,
    stages: Vec<(PatchMerging, TransformerBlock)>,
    reductions: Vec<Linear>,
    proj: Linear,
}

fn heads_for(dim: usize) -> usize {
    (dim / 32).max(1)
}

impl Tower {
    pub fn new(
        scope: &Scope,
        side: usize,
        dim: usize,
        style_dim: usize,
        lq_window: usize,
        kind: TowerBlockKind,
    ) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(Error::Config(format!(
                "tower input side {side} cannot be merged down to 16 tokens"
            )));
        }
        let merges = Self::merge_depth(side);
        let mut width = dim;
        let mut s = side;
        let mut stages = Vec::with_capacity(merges);
        for k in 0..merges {
            let st = scope.pp(format!("stage{k}"));
            let out = (2 * width).min(style_dim.max(width));
            let merge = PatchMerging::new(&st.pp("merge"), width, out)?;
            width = out;
            s /= 2;
            let bs = st.pp("block");
            let block = match kind {
                TowerBlockKind::LearnableQuery => TransformerBlock::new(
                    &bs,
                    width,
                    heads_for(width),
                    lq_window.min(s),
                    0,
                    QueryKind::Learned,
                )?,
                TowerBlockKind::WindowSelfAttention => TransformerBlock::new(
                    &bs,
                    width,
                    heads_for(width),
                    lq_window.min(s),
                    0,
                    QueryKind::Projected,
                )?,
                TowerBlockKind::Mlp => TransformerBlock::mlp_only(&bs, width)?,
            };
            stages.push((merge, block));
        }
        let reductions = (0..Self::reduction_depth(side))
            .map(|k| Linear::new(&scope.pp(format!("reduce{k}")), 4 * width, width, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_side: side,
            input_dim: dim,
            stages,
            reductions,
            proj: Linear::new(&scope.pp("proj"), width, style_dim, true)?,
        })
    }

    /// Merges needed to bring a `side × side` grid down to 16 tokens (none if already ≤ 16).
    pub fn merge_depth(side: usize) -> usize {
        (side.trailing_zeros() as usize).saturating_sub(2)
    }

    /// Linear reductions from `min(16, side²)` tokens down to one.
    pub fn reduction_depth(side: usize) -> usize {
        side.min(4).trailing_zeros() as usize
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.stages.iter().map(|(_, b)| b)
    }

    /// `[batch, style_dim]`.
    pub fn forward(&self, grid: &TokenGrid) -> Result<Tensor> {
        if grid.h() != self.input_side || grid.w() != self.input_side || grid.dim() != self.input_dim {
            return shape_err(format!(
                "tower expects a {0}x{0}x{1} grid, got {2}x{3}x{4}",
                self.input_side,
                self.input_dim,
                grid.h(),
                grid.w(),
                grid.dim()
            ));
        }
        let mut x = grid.clone();
        for (merge, block) in &self.stages {
            x = block.forward(&merge.forward(&x)?)?;
        }
        for red in &self.reductions {
            let g = merge_gather(&x)?;
            x = g.with_data(leaky_relu(&red.forward(g.data())?, 0.2)?)?;
        }
        debug_assert_eq!(x.len(), 1);
        self.proj.forward(&x.data().squeeze(1)?)
    }

    /// Token count after each merge stage, starting with the input.
    pub fn token_trace(&self, grid: &TokenGrid) -> Result<Vec<usize>> {
        let mut x = grid.clone();
        let mut counts = vec![x.len()];
        for (merge, block) in &self.stages {
            x = block.forward(&merge.forward(&x)?)?;
            counts.push(x.len());
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone)]
pub struct Map2Style {
    cfg: Map2StyleConfig,
    towers: Vec<Tower>,
    owner: Vec<usize>,
}

impl Map2Style {
    /// `dims[i]`, `sides[i]` describe fused pyramid level `i`, finest first.
    pub fn new(scope: &Scope, cfg: &Map2StyleConfig, dims: &[usize], sides: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if cfg.level_groups.len() != dims.len() {
            return Err(Error::Config(format!(
                "{} level groups for a {}-level pyramid",
                cfg.level_groups.len(),
                dims.len()
            )));
        }
        let mut towers = Vec::with_capacity(cfg.n_styles);
        let mut owner = Vec::with_capacity(cfg.n_styles);
        for s in 0..cfg.n_styles {
            let lvl = cfg.owner_level(s).expect("validated partition");
            towers.push(Tower::new(
                &scope.pp(format!("tower{s:02}")),
                sides[lvl],
                dims[lvl],
                cfg.style_dim,
                cfg.lq_window,
                cfg.block,
            )?);
            owner.push(lvl);
        }
        Ok(Self {
            cfg: cfg.clone(),
            towers,
            owner,
        })
    }

    pub fn config(&self) -> &Map2StyleConfig {
        &self.cfg
    }

    pub fn towers(&self) -> &[Tower] {
        &self.towers
    }

    pub fn extract_latents(&self, fused: &FeaturePyramid) -> Result<LatentCodes> {
        let rows = self
            .towers
            .iter()
            .zip(&self.owner)
            .map(|(t, &lvl)| t.forward(fused.level(lvl)))
            .collect::<Result<Vec<_>>>()?;
        LatentCodes::new(Tensor::stack(&rows, 1)?)
    }
}
