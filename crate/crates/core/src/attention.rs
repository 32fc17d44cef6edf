//! Window multi-head attention, with queries either projected from the input
//! (W-MSA) or drawn from a learnable bank shared by every window (LQ-W-MSA).

use candle_core::{Tensor, D};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{cyclic_shift, window_partition, window_reverse, TokenGrid};
use crate::nn::Linear;
use crate::params::{Init, Scope};

/// Additive logit for cross-region pairs inside a shifted window.
const MASK_LOGIT: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    /// Queries are a linear projection of the window's tokens.
    Projected,
    /// Queries come from a `[heads, ws², head_dim]` bank shared across windows.
    Learned,
}

#[derive(Debug, Clone)]
pub enum QuerySource {
    Projected(Linear),
    Learned(Tensor),
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    dim: usize,
    heads: usize,
    window: usize,
    query: QuerySource,
    key: Linear,
    value: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
}

fn relative_position_index(ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = ((i / ws) as i64, (i % ws) as i64);
        for j in 0..n {
            let (yj, xj) = ((j / ws) as i64, (j % ws) as i64);
            let dy = (yi - yj + ws as i64 - 1) as usize;
            let dx = (xi - xj + ws as i64 - 1) as usize;
            idx.push((dy * (2 * ws - 1) + dx) as u32);
        }
    }
    idx
}

/// `[n_windows, ws², ws²]` additive mask for a grid rolled by `shift`: tokens that
/// came from different regions before the roll may not attend to each other.
pub fn shift_mask(h: usize, w: usize, ws: usize, shift: usize) -> Vec<f64> {
    let bounds = |len: usize| [(0, len - ws), (len - ws, len - shift), (len - shift, len)];
    let mut region = vec![0usize; h * w];
    let mut label = 0;
    for (r0, r1) in bounds(h) {
        for (c0, c1) in bounds(w) {
            for r in r0..r1 {
                for c in c0..c1 {
                    region[r * w + c] = label;
                }
            }
            label += 1;
        }
    }
    let (nh, nw, n) = (h / ws, w / ws, ws * ws);
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let lab = |slot: usize| region[(wy * ws + slot / ws) * w + wx * ws + slot % ws];
            for i in 0..n {
                for j in 0..n {
                    mask.push(if lab(i) == lab(j) { 0.0 } else { MASK_LOGIT });
                }
            }
        }
    }
    mask
}

impl WindowAttention {
    pub fn new(
        scope: &Scope,
        dim: usize,
        heads: usize,
        window: usize,
        kind: QueryKind,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let n = window * window;
        let query = match kind {
            QueryKind::Projected => QuerySource::Projected(Linear::new(&scope.pp("q"), dim, dim, false)?),
            QueryKind::Learned => QuerySource::Learned(scope.get(
                (heads, n, dim / heads),
                "query_bank",
                Init::Normal { std: 0.02 },
            )?),
        };
        let table_len = (2 * window - 1) * (2 * window - 1);
        let bias_table = scope.get(
            (table_len, heads),
            "relative_position_bias_table",
            Init::Normal { std: 0.02 },
        )?;
        let bias_index = Tensor::from_vec(relative_position_index(window), n * n, scope.device())?;
        Ok(Self {
            dim,
            heads,
            window,
            query,
            key: Linear::new(&scope.pp("k"), dim, dim, false)?,
            value: Linear::new(&scope.pp("v"), dim, dim, false)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim, true)?,
            bias_table,
            bias_index,
        })
    }

    /// Assembles an attention layer from explicit tensors; mostly for tests.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        heads: usize,
        window: usize,
        query: QuerySource,
        key: Linear,
        value: Linear,
        proj: Linear,
        bias_table: Tensor,
    ) -> Result<Self> {
        let dim = key.in_dim();
        let n = window * window;
        let bias_index = Tensor::from_vec(relative_position_index(window), n * n, bias_table.device())?;
        Ok(Self {
            dim,
            heads,
            window,
            query,
            key,
            value,
            proj,
            bias_table,
            bias_index,
        })
    }

    pub fn kind(&self) -> QueryKind {
        match self.query {
            QuerySource::Projected(_) => QueryKind::Projected,
            QuerySource::Learned(_) => QueryKind::Learned,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn query_bank(&self) -> Option<&Tensor> {
        match &self.query {
            QuerySource::Learned(t) => Some(t),
            QuerySource::Projected(_) => None,
        }
    }

    fn check(&self, grid: &TokenGrid, shift: usize) -> Result<()> {
        if grid.dim() != self.dim {
            return shape_err(format!(
                "attention expects dim {}, got {}",
                self.dim,
                grid.dim()
            ));
        }
        let ws = self.window;
        if grid.h() % ws != 0 || grid.w() % ws != 0 {
            return shape_err(format!(
                "grid {}x{} not divisible by window {ws}",
                grid.h(),
                grid.w()
            ));
        }
        if shift != 0 {
            if self.kind() == QueryKind::Learned {
                return Err(Error::Config("learnable-query attention has no shifted variant".into()));
            }
            if shift != ws / 2 {
                return Err(Error::Config(format!(
                    "shift must be 0 or {} for window {ws}, got {shift}",
                    ws / 2
                )));
            }
        }
        Ok(())
    }

    /// Returns the output windows and the post-softmax weights `[windows, heads, n, n]`.
    fn attend(&self, wins: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = wins.dims3()?;
        let (h, hd) = (self.heads, c / self.heads);
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((bw, n, h, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let k = split(self.key.forward(wins)?)?;
        let v = split(self.value.forward(wins)?)?;
        let kt = k.transpose(2, 3)?;
        let logits = match &self.query {
            QuerySource::Projected(q) => split(q.forward(wins)?)?.matmul(&kt)?,
            QuerySource::Learned(bank) => bank.unsqueeze(0)?.broadcast_matmul(&kt)?,
        };
        let logits = (logits * (1.0 / (hd as f64).sqrt()))?;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, h))?
            .permute((2, 0, 1))?;
        let mut logits = logits.broadcast_add(&bias.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dims()[0];
            logits = logits
                .reshape((bw / nw, nw, h, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, h, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, attn))
    }

    fn run(&self, grid: &TokenGrid, shift: usize) -> Result<(TokenGrid, Tensor)> {
        self.check(grid, shift)?;
        let ws = self.window;
        let x = cyclic_shift(grid, shift as i64)?;
        let wins = window_partition(&x, ws)?;
        let mask = if shift > 0 {
            let m = shift_mask(grid.h(), grid.w(), ws, shift);
            let nw = (grid.h() / ws) * (grid.w() / ws);
            Some(
                Tensor::from_vec(m, (nw, ws * ws, ws * ws), wins.device())?
                    .to_dtype(wins.dtype())?,
            )
        } else {
            None
        };
        let (out, attn) = self.attend(&wins, mask.as_ref())?;
        let y = window_reverse(&out, ws, grid.h(), grid.w())?;
        Ok((cyclic_shift(&y, -(shift as i64))?, attn))
    }

    /// Window attention over `grid`; `shift` is 0 or `window / 2` (projected queries only).
    pub fn forward(&self, grid: &TokenGrid, shift: usize) -> Result<TokenGrid> {
        Ok(self.run(grid, shift)?.0)
    }

    /// The post-softmax weights used by [`forward`](Self::forward), `[windows, heads, ws², ws²]`.
    pub fn attention_weights(&self, grid: &TokenGrid, shift: usize) -> Result<Tensor> {
        Ok(self.run(grid, shift)?.1)
    }

    /// Attention each token receives, averaged over heads and queries of its
    /// window and laid back onto the unshifted grid, `[batch, h, w]`.
    pub fn received_attention(&self, grid: &TokenGrid, shift: usize) -> Result<Tensor> {
        let weights = self.attention_weights(grid, shift)?;
        let received = weights.mean(1)?.mean(1)?.unsqueeze(2)?; // [windows, n, 1]
        let rolled = window_reverse(&received, self.window, grid.h(), grid.w())?;
        let back = cyclic_shift(&rolled, -(shift as i64))?;
        Ok(back.data().reshape((grid.batch(), grid.h(), grid.w()))?)
    }

    pub fn param_count(&self) -> usize {
        let lin = |l: &Linear| l.weight().elem_count() + l.bias().map_or(0, |b| b.elem_count());
        let q = match &self.query {
            QuerySource::Projected(l) => lin(l),
            QuerySource::Learned(t) => t.elem_count(),
        };
        q + lin(&self.key) + lin(&self.value) + lin(&self.proj) + self.bias_table.elem_count()
    }
}
