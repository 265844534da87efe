//! Standard softmax attention and three linear-complexity approximations
//! behind one multi-head interface, plus the analytic cost model.

mod linformer;
mod nystrom;
mod performer;
mod standard;

use std::fmt;
use std::str::FromStr;

pub use linformer::linformer_attention;
pub use nystrom::{iterative_pinv, nystrom_attention, segment_mean_landmarks};
pub use performer::{
    orthogonal_directions, orthogonal_features, performer_attention, performer_features,
};
pub use standard::scaled_dot_attention;

use crate::error::{dim_err, param_err, Error, Result};
use crate::params::{join, Linear, ParamKind, Params};
use crate::tensor::{Rng, Tensor};

/// Newton–Schulz iterations used by the Nyström pseudo-inverse.
pub const PINV_ITERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Standard,
    Linformer,
    Performer,
    Nystrom,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [
        Mechanism::Standard,
        Mechanism::Linformer,
        Mechanism::Performer,
        Mechanism::Nystrom,
    ];

    pub fn is_linear(self) -> bool {
        self != Mechanism::Standard
    }

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Standard => "standard",
            Mechanism::Linformer => "linformer",
            Mechanism::Performer => "performer",
            Mechanism::Nystrom => "nystrom",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Mechanism::Standard => 0,
            Mechanism::Linformer => 1,
            Mechanism::Performer => 2,
            Mechanism::Nystrom => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(Mechanism::Standard),
            "linformer" => Ok(Mechanism::Linformer),
            "performer" => Ok(Mechanism::Performer),
            "nystrom" | "nystromformer" => Ok(Mechanism::Nystrom),
            other => Err(param_err(format!("unknown attention mechanism `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Projection dimension (Linformer), feature count (Performer) or
    /// landmark count (Nyström). Ignored by standard attention.
    pub m: usize,
    pub seed: u64,
}

impl AttentionConfig {
    pub fn new(
        mechanism: Mechanism,
        seq_len: usize,
        embed_dim: usize,
        heads: usize,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            mechanism,
            seq_len,
            embed_dim,
            heads,
            m,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `m = N/4` (at least 1).
    pub fn with_default_m(
        mechanism: Mechanism,
        seq_len: usize,
        embed_dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(mechanism, seq_len, embed_dim, heads, (seq_len / 4).max(1), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(param_err(format!(
                "attention extents must be positive: N={}, d={}, heads={}",
                self.seq_len, self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(param_err(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if self.mechanism.is_linear() && (self.m == 0 || self.m > self.seq_len) {
            return Err(param_err(format!(
                "{} needs 1 ≤ m ≤ N, got m={} N={}",
                self.mechanism, self.m, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MechanismWeights {
    None,
    /// Learned `m × N` key/value projections, shared across heads.
    Linformer { e: Tensor, f: Tensor },
    /// Frozen `m × d_h` random features, shared across heads.
    Performer { omega: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub extras: MechanismWeights,
}

impl MultiHeadWeights {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let wq = Linear::xavier(d, d, rng);
        let wk = Linear::xavier(d, d, rng);
        let wv = Linear::xavier(d, d, rng);
        let wo = Linear::xavier(d, d, rng);
        let extras = Self::init_extras(cfg, rng);
        Self {
            wq,
            wk,
            wv,
            wo,
            extras,
        }
    }

    /// Identity projections; mechanism extras drawn from `cfg.seed`.
    pub fn identity(cfg: &AttentionConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            wq: Linear::identity(d),
            wk: Linear::identity(d),
            wv: Linear::identity(d),
            wo: Linear::identity(d),
            extras: Self::init_extras(cfg, &mut Rng::new(cfg.seed)),
        }
    }

    fn init_extras(cfg: &AttentionConfig, rng: &mut Rng) -> MechanismWeights {
        match cfg.mechanism {
            Mechanism::Standard | Mechanism::Nystrom => MechanismWeights::None,
            Mechanism::Linformer => {
                let std = 1.0 / (cfg.seq_len as f64).sqrt();
                MechanismWeights::Linformer {
                    e: Tensor::randn(&[cfg.m, cfg.seq_len], std, rng),
                    f: Tensor::randn(&[cfg.m, cfg.seq_len], std, rng),
                }
            }
            Mechanism::Performer => MechanismWeights::Performer {
                omega: orthogonal_features(cfg.m, cfg.head_dim(), rng),
            },
        }
    }
}

impl Params for MultiHeadWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        match &self.extras {
            MechanismWeights::None => {}
            MechanismWeights::Linformer { e, f: fp } => {
                f(join(prefix, "linformer_e"), e, ParamKind::Weight);
                f(join(prefix, "linformer_f"), fp, ParamKind::Weight);
            }
            MechanismWeights::Performer { omega } => {
                f(join(prefix, "performer_omega"), omega, ParamKind::Buffer);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        match &mut self.extras {
            MechanismWeights::None => {}
            MechanismWeights::Linformer { e, f: fp } => {
                f(join(prefix, "linformer_e"), e, ParamKind::Weight);
                f(join(prefix, "linformer_f"), fp, ParamKind::Weight);
            }
            MechanismWeights::Performer { omega } => {
                f(join(prefix, "performer_omega"), omega, ParamKind::Buffer);
            }
        }
    }
}

#[derive(Clone, Debug)]
enum HeadCache {
    Standard(standard::StandardCache),
    Linformer(linformer::LinformerCache),
    Performer(performer::PerformerCache),
    Nystrom(nystrom::NystromCache),
}

#[derive(Clone, Debug)]
struct HeadState {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cache: HeadCache,
}

/// Everything the reverse pass of [`multi_head_forward`] needs.
#[derive(Clone, Debug)]
pub struct MhaCache {
    x: Tensor,
    concat: Tensor,
    heads: Vec<HeadState>,
}

pub fn multi_head(x: &Tensor, w: &MultiHeadWeights, cfg: &AttentionConfig) -> Result<Tensor> {
    multi_head_forward(x, w, cfg).map(|(y, _)| y)
}

pub fn multi_head_forward(
    x: &Tensor,
    w: &MultiHeadWeights,
    cfg: &AttentionConfig,
) -> Result<(Tensor, MhaCache)> {
    cfg.validate()?;
    if x.rank() != 2 || x.cols() != cfg.embed_dim {
        return Err(dim_err(format!(
            "multi-head input {:?} does not match embed_dim {}",
            x.shape(),
            cfg.embed_dim
        )));
    }
    let n = x.rows();
    if cfg.mechanism == Mechanism::Linformer && n != cfg.seq_len {
        return Err(dim_err(format!(
            "Linformer layer built for N={} received {n} tokens",
            cfg.seq_len
        )));
    }
    let dh = cfg.head_dim();
    let q_all = w.wq.forward(x)?;
    let k_all = w.wk.forward(x)?;
    let v_all = w.wv.forward(x)?;
    let mut concat = Tensor::zeros(&[n, cfg.embed_dim]);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let q = q_all.slice_cols(lo, hi);
        let k = k_all.slice_cols(lo, hi);
        let v = v_all.slice_cols(lo, hi);
        let (out, cache) = match (cfg.mechanism, &w.extras) {
            (Mechanism::Standard, _) => {
                let (o, c) = standard::standard_forward(&q, &k, &v)?;
                (o, HeadCache::Standard(c))
            }
            (Mechanism::Linformer, MechanismWeights::Linformer { e, f }) => {
                let (o, c) = linformer::linformer_forward(&q, &k, &v, e, f)?;
                (o, HeadCache::Linformer(c))
            }
            (Mechanism::Performer, MechanismWeights::Performer { omega }) => {
                let (o, c) = performer::performer_forward(&q, &k, &v, omega)?;
                (o, HeadCache::Performer(c))
            }
            (Mechanism::Nystrom, _) => {
                let m = cfg.m.min(n);
                let (o, c) = nystrom::nystrom_forward(&q, &k, &v, m, PINV_ITERS)?;
                (o, HeadCache::Nystrom(c))
            }
            (mech, _) => {
                return Err(param_err(format!(
                    "weights do not carry the extras required by {mech}"
                )))
            }
        };
        concat.set_cols(lo, &out);
        heads.push(HeadState { q, k, v, cache });
    }
    let y = w.wo.forward(&concat)?;
    Ok((
        y,
        MhaCache {
            x: x.clone(),
            concat,
            heads,
        },
    ))
}

/// Returns `(dX, weight gradients)`.
pub fn multi_head_backward(
    w: &MultiHeadWeights,
    cfg: &AttentionConfig,
    cache: &MhaCache,
    dy: &Tensor,
) -> Result<(Tensor, MultiHeadWeights)> {
    let n = cache.x.rows();
    let dh = cfg.head_dim();
    let (dconcat, g_wo) = w.wo.backward(&cache.concat, dy)?;
    let mut dq_all = Tensor::zeros(&[n, cfg.embed_dim]);
    let mut dk_all = Tensor::zeros(&[n, cfg.embed_dim]);
    let mut dv_all = Tensor::zeros(&[n, cfg.embed_dim]);
    let mut extras = match &w.extras {
        MechanismWeights::None => MechanismWeights::None,
        MechanismWeights::Linformer { e, f } => MechanismWeights::Linformer {
            e: Tensor::zeros(e.shape()),
            f: Tensor::zeros(f.shape()),
        },
        MechanismWeights::Performer { omega } => MechanismWeights::Performer {
            omega: Tensor::zeros(omega.shape()),
        },
    };
    for (h, st) in cache.heads.iter().enumerate() {
        let lo = h * dh;
        let dout = dconcat.slice_cols(lo, lo + dh);
        let (dq, dk, dv) = match (&st.cache, &w.extras) {
            (HeadCache::Standard(c), _) => standard::standard_backward(&st.q, &st.k, &st.v, c, &dout)?,
            (HeadCache::Linformer(c), MechanismWeights::Linformer { e, f }) => {
                let (dq, dk, dv, de, df) =
                    linformer::linformer_backward(&st.q, &st.k, &st.v, e, f, c, &dout)?;
                if let MechanismWeights::Linformer { e: ge, f: gf } = &mut extras {
                    ge.add_assign(&de)?;
                    gf.add_assign(&df)?;
                }
                (dq, dk, dv)
            }
            (HeadCache::Performer(c), MechanismWeights::Performer { omega }) => {
                performer::performer_backward(&st.v, omega, c, &dout)?
            }
            (HeadCache::Nystrom(c), _) => nystrom::nystrom_backward(&st.q, &st.k, &st.v, c, &dout)?,
            _ => return Err(param_err("attention cache does not match weights")),
        };
        dq_all.set_cols(lo, &dq);
        dk_all.set_cols(lo, &dk);
        dv_all.set_cols(lo, &dv);
    }
    let (mut dx, g_wq) = w.wq.backward(&cache.x, &dq_all)?;
    let (dxk, g_wk) = w.wk.backward(&cache.x, &dk_all)?;
    let (dxv, g_wv) = w.wv.backward(&cache.x, &dv_all)?;
    dx.add_assign(&dxk)?;
    dx.add_assign(&dxv)?;
    Ok((
        dx,
        MultiHeadWeights {
            wq: g_wq,
            wk: g_wk,
            wv: g_wv,
            wo: g_wo,
            extras,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub flops: u64,
    pub peak_floats: u64,
}

/// Analytic attention-core cost.
///
/// FLOPs count only matrix-product multiply-adds (two per MAC); softmax,
/// exponentials and the Q/K/V/O projections are excluded.
///
/// | mechanism | flops      | peak floats                 |
/// |-----------|------------|-----------------------------|
/// | standard  | `4·N²·d`   | `N² + N·d`                  |
/// | linformer | `4·N·m·d`  | `N·m + N·d`                 |
/// | performer | `4·N·m·d`  | `N·m·(d/heads) + d²`        |
/// | nystrom   | `4·N·m·d`  | `N·m·(d/heads) + m²·d`      |
///
/// For `N ≥ m` and `N·m ≥ d`, every linear mechanism stays within
/// `2·N·m·d` peak floats.
pub fn flop_count(mechanism: Mechanism, n: usize, d: usize, m: usize, heads: usize) -> FlopCount {
    if n == 0 {
        return FlopCount {
            flops: 0,
            peak_floats: 0,
        };
    }
    let (n, d, m, h) = (n as u64, d as u64, m as u64, heads.max(1) as u64);
    let (flops, peak_floats) = match mechanism {
        Mechanism::Standard => (4 * n * n * d, n * n + n * d),
        Mechanism::Linformer => (4 * n * m * d, n * m + n * d),
        Mechanism::Performer => (4 * n * m * d, n * m * (d / h) + d * d),
        Mechanism::Nystrom => (4 * n * m * d, n * m * (d / h) + m * m * d),
    };
    FlopCount { flops, peak_floats }
}
