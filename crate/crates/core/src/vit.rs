//! Patch pipeline and pre-norm transformer stacks.

use crate::attention::{
    multi_head_backward, multi_head_forward, AttentionConfig, Mechanism, MhaCache,
    MultiHeadWeights,
};
use crate::error::{dim_err, param_err, Result};
use crate::params::{join, LayerNorm, Linear, ParamKind, Params};
use crate::tensor::{gelu, gelu_backward, LayerNormCache, Rng, Tensor};

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(img_h: usize, img_w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || img_h == 0 || img_w == 0 || img_h % patch != 0 || img_w % patch != 0 {
            return Err(dim_err(format!(
                "patch size {patch} does not tile a {img_h}×{img_w} image"
            )));
        }
        Ok(Self {
            img_h,
            img_w,
            patch,
            grid_h: img_h / patch,
            grid_w: img_w / patch,
        })
    }

    /// Token count `L`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }
}

/// `H × W` image to `L × P²` tokens, both in row-major order.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    if img.rank() != 2 {
        return Err(dim_err(format!("patchify expects an H×W image, got {:?}", img.shape())));
    }
    let g = PatchGrid::new(img.rows(), img.cols(), patch)?;
    let p = patch;
    let mut out = Tensor::zeros(&[g.len(), p * p]);
    for gi in 0..g.grid_h {
        for gj in 0..g.grid_w {
            let tok = out.row_mut(gi * g.grid_w + gj);
            for r in 0..p {
                let src = &img.row(gi * p + r)[gj * p..gj * p + p];
                tok[r * p..r * p + p].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let p = grid.patch;
    if tokens.rank() != 2 || tokens.rows() != grid.len() || tokens.cols() != p * p {
        return Err(dim_err(format!(
            "tokens {:?} do not match a {}×{} grid of {p}×{p} patches",
            tokens.shape(),
            grid.grid_h,
            grid.grid_w
        )));
    }
    let mut img = Tensor::zeros(&[grid.img_h, grid.img_w]);
    for gi in 0..grid.grid_h {
        for gj in 0..grid.grid_w {
            let tok = tokens.row(gi * grid.grid_w + gj);
            for r in 0..p {
                img.row_mut(gi * p + r)[gj * p..gj * p + p].copy_from_slice(&tok[r * p..r * p + p]);
            }
        }
    }
    Ok(img)
}

/// Fixed 2-D sine-cosine table, `L × d`. The first `d/2` columns encode the
/// grid row and the rest the grid column; each half is `[sin | cos]` over
/// frequencies `10000^(-i/(d/4))`.
pub fn sincos_pos_embed(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(param_err(format!(
            "sin-cos embedding width must be a positive multiple of 4, got {d}"
        )));
    }
    let q = d / 4;
    let freqs: Vec<f64> = (0..q)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / q as f64))
        .collect();
    let mut out = Tensor::zeros(&[grid_h * grid_w, d]);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = out.row_mut(r * grid_w + c);
            for (half, pos) in [(0, r as f64), (1, c as f64)] {
                let base = half * 2 * q;
                for (i, w) in freqs.iter().enumerate() {
                    let (s, co) = (pos * w).sin_cos();
                    row[base + i] = s;
                    row[base + q + i] = co;
                }
            }
        }
    }
    Ok(out)
}

/// Pre-norm transformer block: `x += MHA(LN(x)); x += MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_cfg: AttentionConfig,
    pub norm1: LayerNorm,
    pub attn: MultiHeadWeights,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: MhaCache,
    ln2: LayerNormCache,
    h2: Tensor,
    u: Tensor,
    g: Tensor,
}

impl Block {
    pub fn init(cfg: AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            attn_cfg: cfg,
            norm1: LayerNorm::new(d),
            attn: MultiHeadWeights::init(&cfg, rng),
            norm2: LayerNorm::new(d),
            fc1: Linear::xavier(d, MLP_RATIO * d, rng),
            fc2: Linear::xavier(MLP_RATIO * d, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (h1, ln1) = self.norm1.forward(x)?;
        let (a, attn) = multi_head_forward(&h1, &self.attn, &self.attn_cfg)?;
        let x1 = x.add(&a)?;
        let (h2, ln2) = self.norm2.forward(&x1)?;
        let u = self.fc1.forward(&h2)?;
        let g = gelu(&u);
        let y = x1.add(&self.fc2.forward(&g)?)?;
        Ok((
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                u,
                g,
            },
        ))
    }

    pub fn backward(&self, c: &BlockCache, dy: &Tensor) -> Result<(Tensor, Block)> {
        let (dg, g_fc2) = self.fc2.backward(&c.g, dy)?;
        let du = gelu_backward(&c.u, &dg);
        let (dh2, g_fc1) = self.fc1.backward(&c.h2, &du)?;
        let (dx1_norm, g_norm2) = self.norm2.backward(&c.ln2, &dh2);
        let mut dx1 = dy.add(&dx1_norm)?;
        let (dh1, g_attn) = multi_head_backward(&self.attn, &self.attn_cfg, &c.attn, &dx1)?;
        let (dx_norm, g_norm1) = self.norm1.backward(&c.ln1, &dh1);
        dx1.add_assign(&dx_norm)?;
        Ok((
            dx1,
            Block {
                attn_cfg: self.attn_cfg,
                norm1: g_norm1,
                attn: g_attn,
                norm2: g_norm2,
                fc1: g_fc1,
                fc2: g_fc2,
            },
        ))
    }
}

impl Params for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// A block stack followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Stack {
    pub fn init(depth: usize, cfg: AttentionConfig, rng: &mut Rng) -> Self {
        Self {
            blocks: (0..depth).map(|_| Block::init(cfg, rng)).collect(),
            norm: LayerNorm::new(cfg.embed_dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, StackCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            caches.push(c);
            h = y;
        }
        let (y, norm) = self.norm.forward(&h)?;
        Ok((
            y,
            StackCache {
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, c: &StackCache, dy: &Tensor) -> Result<(Tensor, Stack)> {
        let (mut dx, g_norm) = self.norm.backward(&c.norm, dy);
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            let (d, g) = b.backward(bc, &dx)?;
            grads.push(g);
            dx = d;
        }
        grads.reverse();
        Ok((
            dx,
            Stack {
                blocks: grads,
                norm: g_norm,
            },
        ))
    }
}

impl Params for Stack {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Patch projection plus a standard-attention stack. The positional table
/// is not stored: it is regenerated from the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub stack: Stack,
}

impl EncoderParams {
    pub fn init(
        patch_pixels: usize,
        tokens: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cfg = AttentionConfig::new(Mechanism::Standard, tokens, dim, heads, tokens, 0)?;
        Ok(Self {
            patch_embed: Linear::xavier(patch_pixels, dim, rng),
            stack: Stack::init(depth, cfg, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.patch_embed.out_dim()
    }
}

impl Params for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.stack.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.stack.visit_mut(prefix, f);
    }
}

/// Runs the block stack and final norm on already-embedded tokens.
pub fn encoder_forward(tokens: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    params.stack.forward(tokens).map(|(y, _)| y)
}
