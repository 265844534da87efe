use std::collections::HashMap;
use std::path::Path;

use super::masking::{duplicate_backward, duplicate_tokens, restore_backward, restore_with_mask_tokens, MaskPlan};
use super::targets::{build_targets, masked_mse, masked_mse_backward, miram_loss, LossRecord, ScaleTargets};
use crate::attention::{AttentionConfig, Mechanism};
use crate::checkpoint;
use crate::data::downsample;
use crate::error::{dim_err, param_err, Error, Result};
use crate::params::{join, named_tensors, Linear, ParamKind, Params};
use crate::tensor::{Rng, Tensor};
use crate::vit::{patchify, sincos_pos_embed, EncoderParams, PatchGrid, Stack, StackCache};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiramConfig {
    /// Encoder input side length (the base scale).
    pub img_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Attention used by the high-resolution decoder.
    pub mechanism: Mechanism,
    /// Projection / feature / landmark count for that decoder; 0 selects
    /// a quarter of its sequence length.
    pub m: usize,
    pub mask_ratio: f64,
    /// Axis scale between the two decoders' grids.
    pub k: usize,
    pub normalize: bool,
    /// false = base-resolution decoder only (ablation).
    pub dual: bool,
    pub num_classes: usize,
}

impl Default for MiramConfig {
    fn default() -> Self {
        Self {
            img_size: 32,
            patch: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            mechanism: Mechanism::Nystrom,
            m: 0,
            mask_ratio: 0.75,
            k: 2,
            normalize: true,
            dual: true,
            num_classes: 2,
        }
    }
}

impl MiramConfig {
    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.img_size, self.img_size, self.patch)?;
        for (name, dim, heads) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("dec_dim", self.dec_dim, self.dec_heads),
        ] {
            if dim == 0 || dim % 4 != 0 || heads == 0 || dim % heads != 0 {
                return Err(param_err(format!(
                    "{name} = {dim} must be a positive multiple of 4 divisible by {heads} heads"
                )));
            }
        }
        if self.k == 0 {
            return Err(param_err("scale factor k must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(param_err(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.num_classes < 2 {
            return Err(param_err("num_classes must be ≥ 2"));
        }
        self.d2_attention()?;
        Ok(())
    }

    pub fn base_grid(&self) -> PatchGrid {
        let g = self.img_size / self.patch.max(1);
        PatchGrid {
            img_h: self.img_size,
            img_w: self.img_size,
            patch: self.patch,
            grid_h: g,
            grid_w: g,
        }
    }

    pub fn high_grid(&self) -> PatchGrid {
        let b = self.base_grid();
        PatchGrid {
            img_h: b.img_h * self.k,
            img_w: b.img_w * self.k,
            patch: self.patch,
            grid_h: b.grid_h * self.k,
            grid_w: b.grid_w * self.k,
        }
    }

    /// Side length of the images the pipeline consumes.
    pub fn high_size(&self) -> usize {
        self.img_size * self.k
    }

    pub fn tokens(&self) -> usize {
        self.base_grid().len()
    }

    pub fn high_tokens(&self) -> usize {
        self.high_grid().len()
    }

    pub fn d2_m(&self) -> usize {
        if self.m == 0 {
            (self.high_tokens() / 4).max(1)
        } else {
            self.m
        }
    }

    pub fn d1_attention(&self) -> Result<AttentionConfig> {
        let n = self.tokens();
        AttentionConfig::new(Mechanism::Standard, n, self.dec_dim, self.dec_heads, n, 0)
    }

    pub fn d2_attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(
            self.mechanism,
            self.high_tokens(),
            self.dec_dim,
            self.dec_heads,
            self.d2_m(),
            0,
        )
    }

    fn to_arch(self) -> Tensor {
        let v = vec![
            self.img_size as f64,
            self.patch as f64,
            self.embed_dim as f64,
            self.depth as f64,
            self.heads as f64,
            self.dec_dim as f64,
            self.dec_depth as f64,
            self.dec_heads as f64,
            self.mechanism.code() as f64,
            self.m as f64,
            self.mask_ratio,
            self.k as f64,
            f64::from(u8::from(self.normalize)),
            f64::from(u8::from(self.dual)),
            self.num_classes as f64,
        ];
        Tensor::new(vec![v.len()], v).expect("arch vector")
    }

    fn from_arch(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != 15 {
            return Err(Error::Corruption(format!(
                "architecture record has {} fields, expected 15",
                v.len()
            )));
        }
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(Error::Corruption(format!("bad architecture field {x}")))
            }
        };
        let mechanism = Mechanism::from_code(int(v[8])? as u8)
            .ok_or_else(|| Error::Corruption(format!("unknown mechanism code {}", v[8])))?;
        let cfg = Self {
            img_size: int(v[0])?,
            patch: int(v[1])?,
            embed_dim: int(v[2])?,
            depth: int(v[3])?,
            heads: int(v[4])?,
            dec_dim: int(v[5])?,
            dec_depth: int(v[6])?,
            dec_heads: int(v[7])?,
            mechanism,
            m: int(v[9])?,
            mask_ratio: v[10],
            k: int(v[11])?,
            normalize: v[12] != 0.0,
            dual: v[13] != 0.0,
            num_classes: int(v[14])?,
        };
        cfg.validate()
            .map_err(|e| Error::Corruption(format!("invalid stored architecture: {e}")))?;
        Ok(cfg)
    }
}

/// Fixed positional tables for the encoder and both decoder grids.
#[derive(Clone, Debug, PartialEq)]
pub struct PosTables {
    pub enc: Tensor,
    pub dec1: Tensor,
    pub dec2: Tensor,
}

impl PosTables {
    pub fn new(cfg: &MiramConfig) -> Result<Self> {
        let (b, h) = (cfg.base_grid(), cfg.high_grid());
        Ok(Self {
            enc: sincos_pos_embed(b.grid_h, b.grid_w, cfg.embed_dim)?,
            dec1: sincos_pos_embed(b.grid_h, b.grid_w, cfg.dec_dim)?,
            dec2: sincos_pos_embed(h.grid_h, h.grid_w, cfg.dec_dim)?,
        })
    }
}

/// Projection into decoder width, a block stack and a pixel head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub embed: Linear,
    pub stack: Stack,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    z: Tensor,
    stack: StackCache,
    y: Tensor,
}

impl Decoder {
    pub fn init(in_dim: usize, depth: usize, attn: AttentionConfig, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            embed: Linear::xavier(in_dim, attn.embed_dim, rng),
            stack: Stack::init(depth, attn, rng),
            head: Linear::xavier(attn.embed_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, z: &Tensor, pos: &Tensor) -> Result<(Tensor, DecoderCache)> {
        let mut h = self.embed.forward(z)?;
        if h.shape() != pos.shape() {
            return Err(dim_err(format!(
                "decoder tokens {:?} do not match positional table {:?}",
                h.shape(),
                pos.shape()
            )));
        }
        h.add_assign(pos)?;
        let (y, stack) = self.stack.forward(&h)?;
        let pred = self.head.forward(&y)?;
        Ok((
            pred,
            DecoderCache {
                z: z.clone(),
                stack,
                y,
            },
        ))
    }

    pub fn backward(&self, c: &DecoderCache, dpred: &Tensor) -> Result<(Tensor, Decoder)> {
        let (dy, head) = self.head.backward(&c.y, dpred)?;
        let (dh, stack) = self.stack.backward(&c.stack, &dy)?;
        let (dz, embed) = self.embed.backward(&c.z, &dh)?;
        Ok((dz, Decoder { embed, stack, head }))
    }
}

impl Params for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.stack.visit(prefix, f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.stack.visit_mut(prefix, f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiramParams {
    pub encoder: EncoderParams,
    pub mask_token: Tensor,
    pub decoder1: Decoder,
    pub decoder2: Option<Decoder>,
    pub classifier: Linear,
}

impl MiramParams {
    pub fn init(cfg: &MiramConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let p2 = cfg.patch * cfg.patch;
        let encoder = EncoderParams::init(p2, cfg.tokens(), cfg.embed_dim, cfg.depth, cfg.heads, rng)?;
        let mask_token = Tensor::randn(&[cfg.embed_dim], 0.02, rng);
        let decoder1 = Decoder::init(cfg.embed_dim, cfg.dec_depth, cfg.d1_attention()?, p2, rng);
        let decoder2 = if cfg.dual {
            Some(Decoder::init(cfg.embed_dim, cfg.dec_depth, cfg.d2_attention()?, p2, rng))
        } else {
            None
        };
        let classifier = Linear::xavier(cfg.embed_dim, cfg.num_classes, rng);
        Ok(Self {
            encoder,
            mask_token,
            decoder1,
            decoder2,
            classifier,
        })
    }
}

impl Params for MiramParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        f(join(prefix, "mask_token"), &self.mask_token, ParamKind::NoDecay);
        self.decoder1.visit(&join(prefix, "decoder1"), f);
        if let Some(d) = &self.decoder2 {
            d.visit(&join(prefix, "decoder2"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        f(join(prefix, "mask_token"), &mut self.mask_token, ParamKind::NoDecay);
        self.decoder1.visit_mut(&join(prefix, "decoder1"), f);
        if let Some(d) = &mut self.decoder2 {
            d.visit_mut(&join(prefix, "decoder2"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Base,
    High,
}

/// Runs one decoder: `Base` takes the restored `L`-token sequence, `High`
/// the duplicated `L·k²`-token sequence.
pub fn decode(branch: Branch, z: &Tensor, params: &MiramParams, tables: &PosTables) -> Result<Tensor> {
    let (dec, pos) = match branch {
        Branch::Base => (&params.decoder1, &tables.dec1),
        Branch::High => (
            params
                .decoder2
                .as_ref()
                .ok_or_else(|| param_err("model has no high-resolution decoder"))?,
            &tables.dec2,
        ),
    };
    dec.forward(z, pos).map(|(p, _)| p)
}

fn check_image(cfg: &MiramConfig, img: &Tensor) -> Result<()> {
    let s = cfg.high_size();
    if img.shape() != [s, s] {
        return Err(dim_err(format!(
            "expected a {s}×{s} input image, got {:?}",
            img.shape()
        )));
    }
    Ok(())
}

/// Patch tokens of the base-scale image with positions added.
pub(crate) fn embed_patches(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    img_high: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_image(cfg, img_high)?;
    let x_p = patchify(&downsample(img_high, cfg.k)?, cfg.patch)?;
    let mut emb = params.encoder.patch_embed.forward(&x_p)?;
    emb.add_assign(&tables.enc)?;
    Ok((x_p, emb))
}

/// Encoder outputs for the visible tokens, in the plan's shuffled order.
pub fn encode_visible(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    img_high: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let (_, emb) = embed_patches(params, cfg, tables, img_high)?;
    let (z, _) = params.encoder.stack.forward(&emb.select_rows(plan.keep()))?;
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct ImageForward {
    pub pred_base: Tensor,
    pub pred_high: Option<Tensor>,
    pub targets: ScaleTargets,
    pub loss: LossRecord,
}

struct Cache {
    x_p: Tensor,
    enc: StackCache,
    d1: DecoderCache,
    d2: Option<DecoderCache>,
}

fn forward_cached(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    img_high: &Tensor,
    plan: &MaskPlan,
) -> Result<(ImageForward, Cache)> {
    let (x_p, emb) = embed_patches(params, cfg, tables, img_high)?;
    if plan.tokens() != emb.rows() {
        return Err(dim_err(format!(
            "mask plan covers {} tokens, image has {}",
            plan.tokens(),
            emb.rows()
        )));
    }
    let (z_vis, enc) = params.encoder.stack.forward(&emb.select_rows(plan.keep()))?;
    let z_full = restore_with_mask_tokens(&z_vis, plan, &params.mask_token, &tables.enc)?;
    let (pred_base, d1) = params.decoder1.forward(&z_full, &tables.dec1)?;
    let targets = build_targets(img_high, cfg.patch, cfg.k, cfg.normalize, plan)?;
    let (pred_high, d2, loss) = match (&params.decoder2, cfg.dual) {
        (Some(dec), true) => {
            let g = cfg.base_grid();
            let z_up = duplicate_tokens(&z_full, g.grid_h, g.grid_w, cfg.k)?;
            let (p, c) = dec.forward(&z_up, &tables.dec2)?;
            let loss = miram_loss(&pred_base, &p, &targets)?;
            (Some(p), Some(c), loss)
        }
        (None, false) => {
            let b = masked_mse(&pred_base, &targets.base, &targets.mask_base)?;
            let loss = LossRecord {
                total: b.value,
                base: b.value,
                high: None,
                empty_mask: b.empty,
            };
            (None, None, loss)
        }
        _ => return Err(param_err("decoder set does not match the `dual` setting")),
    };
    Ok((
        ImageForward {
            pred_base,
            pred_high,
            targets,
            loss,
        },
        Cache { x_p, enc, d1, d2 },
    ))
}

/// Forward pass of the full pretext pipeline for one image.
pub fn forward_image(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    img_high: &Tensor,
    plan: &MaskPlan,
) -> Result<ImageForward> {
    forward_cached(params, cfg, tables, img_high, plan).map(|(f, _)| f)
}

/// Forward and reverse pass for one image; `scale · ∂L_total/∂θ` is added
/// into `grads`.
pub fn forward_backward(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    img_high: &Tensor,
    plan: &MaskPlan,
    scale: f64,
    grads: &mut MiramParams,
) -> Result<LossRecord> {
    let (fwd, c) = forward_cached(params, cfg, tables, img_high, plan)?;
    let t = &fwd.targets;
    let branch_weight = if cfg.dual { 0.5 } else { 1.0 };

    let dbase = masked_mse_backward(&fwd.pred_base, &t.base, &t.mask_base)?.scale(branch_weight * scale);
    let (mut dz_full, g1) = params.decoder1.backward(&c.d1, &dbase)?;
    accumulate_into(&mut grads.decoder1, &g1);

    if let (Some(dec), Some(c2), Some(pred_high), Some(gdec)) =
        (&params.decoder2, &c.d2, &fwd.pred_high, grads.decoder2.as_mut())
    {
        let dhigh = masked_mse_backward(pred_high, &t.high, &t.mask_high)?.scale(branch_weight * scale);
        let (dz_up, g2) = dec.backward(c2, &dhigh)?;
        accumulate_into(gdec, &g2);
        let g = cfg.base_grid();
        dz_full.add_assign(&duplicate_backward(&dz_up, g.grid_h, g.grid_w, cfg.k))?;
    }

    let (dz_vis, dtok) = restore_backward(&dz_full, plan);
    grads.mask_token.add_assign(&dtok)?;
    let (dvis, genc) = params.encoder.stack.backward(&c.enc, &dz_vis)?;
    accumulate_into(&mut grads.encoder.stack, &genc);
    let mut demb = Tensor::zeros(&[plan.tokens(), cfg.embed_dim]);
    for (r, &tok) in plan.keep().iter().enumerate() {
        demb.row_mut(tok).copy_from_slice(dvis.row(r));
    }
    let (_, gpe) = params.encoder.patch_embed.backward(&c.x_p, &demb)?;
    accumulate_into(&mut grads.encoder.patch_embed, &gpe);
    Ok(fwd.loss)
}

pub(crate) fn accumulate_into<P: Params>(dst: &mut P, src: &P) {
    crate::params::accumulate(dst, src);
}

/// `arch` record followed by every named tensor.
pub fn model_tensors(cfg: &MiramConfig, params: &MiramParams) -> Vec<(String, Tensor)> {
    let mut out = vec![("arch".to_string(), cfg.to_arch())];
    out.extend(
        named_tensors(params)
            .into_iter()
            .map(|(n, t, _)| (n, t.clone())),
    );
    out
}

pub fn save_model(path: impl AsRef<Path>, cfg: &MiramConfig, params: &MiramParams) -> Result<()> {
    checkpoint::save(path, &model_tensors(cfg, params))
}

pub(crate) fn model_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<(MiramConfig, MiramParams)> {
    let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
    let arch = map
        .remove("arch")
        .ok_or_else(|| Error::Corruption("checkpoint has no `arch` record".into()))?;
    let cfg = MiramConfig::from_arch(&arch)?;
    let mut params = MiramParams::init(&cfg, &mut Rng::new(0))?;
    let mut problem = None;
    params.visit_mut("", &mut |name, t, _| match map.remove(&name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => {
            problem.get_or_insert(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                v.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("tensor `{name}` missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Corruption(p));
    }
    if let Some(extra) = map.keys().min() {
        return Err(Error::Corruption(format!("unexpected tensor `{extra}`")));
    }
    Ok((cfg, params))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MiramConfig, MiramParams)> {
    model_from_tensors(checkpoint::load(path)?)
}
