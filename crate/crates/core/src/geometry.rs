//! Tensor layout conventions and the windowing substrate.
//!
//! Token tensors are always `[batch, sequence, dim]` with the sequence laid out
//! row-major over the spatial grid: token `r * w + c` sits at row `r`, column
//! `c`. Images are `[batch, 3, side, side]` in `[-1, 1]`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::Scope;

#[derive(Debug, Clone)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, h, w) = t
            .dims4()
            .map_err(|_| Error::Shape(format!("image batch must be 4-D, got {:?}", t.dims())))?;
        if c != 3 {
            return shape_err(format!("image batch must have 3 channels, got {c}"));
        }
        if h != w {
            return shape_err(format!("images must be square, got {h}x{w}"));
        }
        if !h.is_power_of_two() {
            return shape_err(format!("image side {h} is not a power of two"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn side(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// Builds a batch from interleaved 8-bit RGB rasters using `x / 127.5 - 1`.
    pub fn from_rgb8(images: &[&[u8]], side: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let n = side * side;
        let mut data = Vec::with_capacity(images.len() * 3 * n);
        for img in images {
            if img.len() != 3 * n {
                return shape_err(format!(
                    "raster has {} bytes, expected {} for a {side}x{side} RGB image",
                    img.len(),
                    3 * n
                ));
            }
            for ch in 0..3 {
                data.extend((0..n).map(|i| img[3 * i + ch] as f32 / 127.5 - 1.0));
            }
        }
        let t = Tensor::from_vec(data, (images.len(), 3, side, side), dev)?.to_dtype(dtype)?;
        Self::new(t)
    }

    /// Interleaved 8-bit RGB per image, clamping to `[-1, 1]` and rounding to nearest.
    pub fn to_rgb8(&self) -> Result<Vec<Vec<u8>>> {
        let (b, _, s, _) = self.0.dims4()?;
        let vals = self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let n = s * s;
        Ok((0..b)
            .map(|bi| {
                let mut out = vec![0u8; 3 * n];
                for ch in 0..3 {
                    for i in 0..n {
                        let v = vals[(bi * 3 + ch) * n + i].clamp(-1.0, 1.0);
                        out[3 * i + ch] = ((v + 1.0) * 127.5).round() as u8;
                    }
                }
                out
            })
            .collect())
    }
}

/// Token sequence with explicit spatial extent.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    data: Tensor,
    h: usize,
    w: usize,
}

impl TokenGrid {
    pub fn new(data: Tensor, h: usize, w: usize) -> Result<Self> {
        let (_, l, _) = data
            .dims3()
            .map_err(|_| Error::Shape(format!("token grid must be 3-D, got {:?}", data.dims())))?;
        if h == 0 || w == 0 {
            return shape_err(format!("token grid extent must be positive, got {h}x{w}"));
        }
        if l != h * w {
            return shape_err(format!("sequence length {l} does not equal {h}x{w}"));
        }
        Ok(Self { data, h, w })
    }

    /// From `[batch, h, w, dim]`.
    pub fn from_spatial(t: &Tensor) -> Result<Self> {
        let (b, h, w, c) = t.dims4()?;
        Self::new(t.reshape((b, h * w, c))?, h, w)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[batch, h, w, dim]`.
    pub fn spatial(&self) -> Result<Tensor> {
        Ok(self
            .data
            .reshape((self.batch(), self.h, self.w, self.dim()))?)
    }

    /// `[batch, dim, h, w]`.
    pub fn to_channels_first(&self) -> Result<Tensor> {
        Ok(self.spatial()?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn from_channels_first(t: &Tensor) -> Result<Self> {
        Self::from_spatial(&t.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// Same extent, new data.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub stage_window: [usize; 4],
    pub input_resolution: usize,
}

impl Default for EncoderConfig {
    /// Tiny hierarchical configuration with small windows in the first two stages.
    fn default() -> Self {
        Self {
            patch_size: 4,
            stage_dims: [96, 192, 384, 768],
            stage_depths: [2, 2, 6, 2],
            stage_heads: [3, 6, 12, 24],
            stage_window: [2, 2, 8, 8],
            input_resolution: 256,
        }
    }
}

impl EncoderConfig {
    /// The 64-pixel configuration used by tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            stage_dims: [32, 64, 128, 256],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 8],
            stage_window: [2, 2, 8, 8],
            input_resolution: 64,
        }
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_resolution / self.patch_size >> stage
    }

    /// Window actually used by a stage: a window wider than the grid collapses to the grid.
    pub fn effective_window(&self, stage: usize) -> usize {
        self.stage_window[stage].min(self.stage_side(stage))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.input_resolution % self.patch_size != 0 {
            return cfg_err(format!(
                "input resolution {} not divisible by patch size {}",
                self.input_resolution, self.patch_size
            ));
        }
        let side = self.input_resolution / self.patch_size;
        if side % 8 != 0 {
            return cfg_err(format!(
                "token grid side {side} must be divisible by 8 for three merges"
            ));
        }
        for s in 0..4 {
            let ws = self.effective_window(s);
            if ws == 0 || self.stage_side(s) % ws != 0 {
                return cfg_err(format!(
                    "stage {s} grid side {} not divisible by window {ws}",
                    self.stage_side(s)
                ));
            }
            if self.stage_heads[s] == 0 || self.stage_dims[s] % self.stage_heads[s] != 0 {
                return cfg_err(format!(
                    "stage {s} dim {} not divisible by {} heads",
                    self.stage_dims[s], self.stage_heads[s]
                ));
            }
        }
        Ok(())
    }
}

/// Non-overlapping patch projection followed by layer normalization.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    patch: usize,
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(scope: &Scope, patch: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            patch,
            proj: Linear::new(&scope.pp("proj"), 3 * patch * patch, dim, true)?,
            norm: LayerNorm::new(&scope.pp("norm"), dim)?,
        })
    }

    pub fn forward(&self, img: &ImageBatch) -> Result<TokenGrid> {
        let p = self.patch;
        let (b, c, h, w) = img.tensor().dims4()?;
        if h % p != 0 || w % p != 0 {
            return shape_err(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            ));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = img
            .tensor()
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.norm.forward(&self.proj.forward(&patches)?)?;
        TokenGrid::new(tokens, gh, gw)
    }
}

/// `[batch * n_windows, ws * ws, dim]`, windows row-major over the window grid and
/// tokens row-major inside each window.
pub fn window_partition(grid: &TokenGrid, ws: usize) -> Result<Tensor> {
    let (h, w) = (grid.h(), grid.w());
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return shape_err(format!("grid {h}x{w} not divisible by window {ws}"));
    }
    let (b, c) = (grid.batch(), grid.dim());
    Ok(grid
        .data()
        .reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(wins: &Tensor, ws: usize, h: usize, w: usize) -> Result<TokenGrid> {
    let (n, l, c) = wins.dims3()?;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return shape_err(format!("grid {h}x{w} not divisible by window {ws}"));
    }
    if l != ws * ws {
        return shape_err(format!("window holds {l} tokens, expected {}", ws * ws));
    }
    let per_image = (h / ws) * (w / ws);
    if n % per_image != 0 {
        return shape_err(format!(
            "{n} windows is not a multiple of the {per_image} windows per {h}x{w} grid"
        ));
    }
    let b = n / per_image;
    let data = wins
        .reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * w, c))?;
    TokenGrid::new(data, h, w)
}

/// Torus roll by `(-offset, -offset)`; offsets are taken modulo the grid side.
pub fn cyclic_shift(grid: &TokenGrid, offset: i64) -> Result<TokenGrid> {
    if offset == 0 {
        return Ok(grid.clone());
    }
    let x = grid.spatial()?;
    let dy = (-offset).rem_euclid(grid.h() as i64) as i32;
    let dx = (-offset).rem_euclid(grid.w() as i64) as i32;
    let x = x.roll(dy, 1)?.roll(dx, 2)?.contiguous()?;
    TokenGrid::from_spatial(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;
    use proptest::prelude::*;

    fn grid_of(b: usize, h: usize, w: usize, c: usize, seed: u64) -> TokenGrid {
        let n = b * h * w * c;
        let vals: Vec<f32> = (0..n)
            .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 7.0)
            .collect();
        TokenGrid::new(
            Tensor::from_vec(vals, (b, h * w, c), &Device::Cpu).unwrap(),
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn patch_embed_shapes() -> Result<()> {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let pe = PatchEmbed::new(&store.root(), 4, 96)?;
        let img = ImageBatch::new(Tensor::zeros((1, 3, 256, 256), DType::F32, &Device::Cpu)?)?;
        let g = pe.forward(&img)?;
        assert_eq!((g.h(), g.w(), g.dim(), g.len()), (64, 64, 96, 4096));

        let pe = PatchEmbed::new(&store.root().pp("small"), 4, 8)?;
        let img = ImageBatch::new(Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu)?)?;
        let g = pe.forward(&img)?;
        assert_eq!((g.h(), g.w(), g.dim()), (2, 2, 8));
        Ok(())
    }

    #[test]
    fn patch_embed_rejects_indivisible_side() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let pe = PatchEmbed::new(&store.root(), 4, 8).unwrap();
        // Bypass the power-of-two check to reach the divisibility check.
        let t = Tensor::zeros((1, 3, 255, 255), DType::F32, &Device::Cpu).unwrap();
        let err = pe.forward(&ImageBatch(t)).unwrap_err().to_string();
        assert!(err.contains("255") && err.contains('4'), "{err}");
    }

    #[test]
    fn partition_counts_and_identity_window() -> Result<()> {
        let g = grid_of(1, 4, 4, 3, 1);
        assert_eq!(window_partition(&g, 2)?.dims(), &[4, 4, 3]);
        let whole = window_partition(&g, 4)?;
        assert_eq!(whole.dims(), &[1, 16, 3]);
        assert_eq!(
            whole.flatten_all()?.to_vec1::<f32>()?,
            g.data().flatten_all()?.to_vec1::<f32>()?
        );
        assert!(window_partition(&g, 3).is_err());
        Ok(())
    }

    #[test]
    fn partition_matches_index_loop() -> Result<()> {
        let (b, h, w, c, ws) = (2, 6, 4, 2, 2);
        let g = grid_of(b, h, w, c, 5);
        let src = g.data().to_vec3::<f32>()?;
        let wins = window_partition(&g, ws)?.to_vec3::<f32>()?;
        let (nh, nw) = (h / ws, w / ws);
        for bi in 0..b {
            for r in 0..h {
                for col in 0..w {
                    let win = bi * nh * nw + (r / ws) * nw + col / ws;
                    let slot = (r % ws) * ws + col % ws;
                    assert_eq!(wins[win][slot], src[bi][r * w + col]);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn reverse_errors() -> Result<()> {
        let g = grid_of(1, 4, 4, 3, 1);
        let wins = window_partition(&g, 2)?;
        assert!(window_reverse(&wins.narrow(0, 0, 3)?, 2, 4, 4).is_err());
        let one = window_partition(&g, 4)?;
        let back = window_reverse(&one, 4, 4, 4)?;
        assert_eq!(
            back.data().flatten_all()?.to_vec1::<f32>()?,
            g.data().flatten_all()?.to_vec1::<f32>()?
        );
        Ok(())
    }

    #[test]
    fn shift_by_one_on_two_by_two_swaps_diagonals() -> Result<()> {
        // tokens a b / c d rolled by (-1, -1) -> d c / b a
        let t = Tensor::new(&[[[0f32], [1.], [2.], [3.]]], &Device::Cpu)?;
        let g = TokenGrid::new(t, 2, 2)?;
        let s = cyclic_shift(&g, 1)?;
        assert_eq!(s.data().flatten_all()?.to_vec1::<f32>()?, vec![3., 2., 1., 0.]);
        assert_eq!(
            cyclic_shift(&g, 0)?.data().flatten_all()?.to_vec1::<f32>()?,
            vec![0., 1., 2., 3.]
        );
        Ok(())
    }

    #[test]
    fn shift_matches_modular_index() -> Result<()> {
        let (h, w, off) = (4usize, 6usize, 2i64);
        let g = grid_of(1, h, w, 1, 3);
        let src = g.data().flatten_all()?.to_vec1::<f32>()?;
        let got = cyclic_shift(&g, off)?.data().flatten_all()?.to_vec1::<f32>()?;
        for r in 0..h {
            for c in 0..w {
                let sr = (r as i64 + off).rem_euclid(h as i64) as usize;
                let sc = (c as i64 + off).rem_euclid(w as i64) as usize;
                assert_eq!(got[r * w + c], src[sr * w + sc]);
            }
        }
        Ok(())
    }

    #[test]
    fn toy_config_layout() {
        let cfg = EncoderConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(
            (0..4).map(|s| cfg.stage_side(s)).collect::<Vec<_>>(),
            vec![16, 8, 4, 2]
        );
        assert_eq!(
            (0..4).map(|s| cfg.effective_window(s)).collect::<Vec<_>>(),
            vec![2, 2, 4, 2]
        );
        assert_eq!(EncoderConfig::default().stage_window, [2, 2, 8, 8]);
        EncoderConfig::default().validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_round_trip(nh in 1usize..4, nw in 1usize..4, ws in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let g = grid_of(2, nh * ws, nw * ws, c, seed);
            let wins = window_partition(&g, ws).unwrap();
            let back = window_reverse(&wins, ws, g.h(), g.w()).unwrap();
            prop_assert_eq!(back.data().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                            g.data().flatten_all().unwrap().to_vec1::<f32>().unwrap());
            let mut a = wins.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let mut b = g.data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn shift_round_trip(h in 1usize..7, w in 1usize..7, off in -6i64..7, seed in 0u64..1000) {
            let g = grid_of(1, h, w, 2, seed);
            let back = cyclic_shift(&cyclic_shift(&g, off).unwrap(), -off).unwrap();
            prop_assert_eq!(back.data().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                            g.data().flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }
}
