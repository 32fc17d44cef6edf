//! Multi-scale connections: every pyramid level receives residual contributions
//! from all coarser levels, each routed through its own chain of upsample blocks.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Result};
use crate::geometry::TokenGrid;
use crate::nn::{resize_bilinear, LayerNorm, Linear};
use crate::params::{Init, Scope};

/// Bilinear 2× upsampling, linear channel alignment, layer norm, then a gated
/// absolute position table.
#[derive(Debug, Clone)]
pub struct UpsampleBlock {
    align: Linear,
    norm: LayerNorm,
    abs_pos: Tensor,
    pos_gate: Tensor,
    out_side: usize,
}

impl UpsampleBlock {
    pub fn new(scope: &Scope, dim_in: usize, dim_out: usize, out_side: usize) -> Result<Self> {
        Ok(Self {
            align: Linear::new(&scope.pp("align"), dim_in, dim_out, true)?,
            norm: LayerNorm::new(&scope.pp("norm"), dim_out)?,
            abs_pos: scope.get(
                (out_side * out_side, dim_out),
                "abs_pos",
                Init::Normal { std: 0.02 },
            )?,
            pos_gate: scope.get(1, "pos_gate", Init::Zeros)?,
            out_side,
        })
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        if 2 * grid.h() != self.out_side || 2 * grid.w() != self.out_side {
            return shape_err(format!(
                "upsample block targets {0}x{0}, input is {1}x{2}",
                self.out_side,
                grid.h(),
                grid.w()
            ));
        }
        if grid.dim() != self.align.in_dim() {
            return shape_err(format!(
                "upsample block expects dim {}, got {}",
                self.align.in_dim(),
                grid.dim()
            ));
        }
        let up = resize_bilinear(&grid.to_channels_first()?, self.out_side, self.out_side, true)?;
        let up = TokenGrid::from_channels_first(&up)?;
        let x = self.norm.forward(&self.align.forward(up.data())?)?;
        let pos = self.abs_pos.broadcast_mul(&self.pos_gate)?;
        TokenGrid::new(x.broadcast_add(&pos)?, self.out_side, self.out_side)
    }
}

#[derive(Debug, Clone)]
pub struct PyramidFusion {
    /// Keyed by `(source level, target level)`, source coarser than target.
    chains: BTreeMap<(usize, usize), Vec<UpsampleBlock>>,
    levels: usize,
}

impl PyramidFusion {
    /// `dims[i]`, `sides[i]` describe pyramid level `i`, finest first.
    pub fn new(scope: &Scope, dims: &[usize], sides: &[usize]) -> Result<Self> {
        let levels = dims.len();
        if sides.len() != levels {
            return shape_err("fusion dims and sides disagree in length");
        }
        let mut chains = BTreeMap::new();
        for src in 1..levels {
            for dst in 0..src {
                let cs = scope.pp(format!("chain_{src}_to_{dst}"));
                let blocks = (dst..src)
                    .rev()
                    .enumerate()
                    .map(|(k, lvl)| {
                        UpsampleBlock::new(&cs.pp(format!("up{k}")), dims[lvl + 1], dims[lvl], sides[lvl])
                    })
                    .collect::<Result<Vec<_>>>()?;
                chains.insert((src, dst), blocks);
            }
        }
        Ok(Self { chains, levels })
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn chain(&self, src: usize, dst: usize) -> Option<&[UpsampleBlock]> {
        self.chains.get(&(src, dst)).map(|v| v.as_slice())
    }

    /// Top-down: the coarsest level passes through; every finer level adds the
    /// upsampled, already-fused versions of all coarser levels.
    pub fn fuse(&self, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        if pyr.len() != self.levels {
            return shape_err(format!(
                "fusion built for {} levels, pyramid has {}",
                self.levels,
                pyr.len()
            ));
        }
        let n = self.levels;
        let mut fused: Vec<Option<TokenGrid>> = vec![None; n];
        fused[n - 1] = Some(pyr.level(n - 1).clone());
        for dst in (0..n - 1).rev() {
            let mut acc = pyr.level(dst).data().clone();
            for src in dst + 1..n {
                let mut x = fused[src].clone().expect("coarser level fused first");
                for block in &self.chains[&(src, dst)] {
                    x = block.forward(&x)?;
                }
                acc = (acc + x.data())?;
            }
            fused[dst] = Some(pyr.level(dst).with_data(acc)?);
        }
        FeaturePyramid::new(fused.into_iter().map(|g| g.unwrap()).collect())
    }
}
