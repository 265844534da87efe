//! Side-by-side reconstruction panels.

use miram::data::upsample_nearest;
use miram::miram::{forward_image, MaskPlan, MiramConfig, MiramParams, PosTables};
use miram::vit::unpatchify;
use miram::{Result, Tensor};

pub const MASK_GRAY: f64 = 0.5;
pub const SEPARATOR: f64 = 1.0;

fn denormalize(pred: &Tensor, stats: &[(f64, f64)]) -> Tensor {
    let mut out = pred.clone();
    for (i, &(mean, std)) in stats.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v = *v * std + mean);
    }
    out
}

/// `[original | masked | D₁ upsampled | D₂]`, each `W` wide at the input
/// resolution, joined by one-pixel white columns and clamped to `[0, 1]`.
/// Without a second decoder its panel is left mid-gray.
pub fn reconstruct_grid(
    cfg: &MiramConfig,
    params: &MiramParams,
    tables: &PosTables,
    img_high: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let f = forward_image(params, cfg, tables, img_high, plan)?;
    let s = cfg.high_size();
    let cell = cfg.patch * cfg.k;
    let base = cfg.base_grid();

    let mut masked = img_high.clone();
    for (tok, _) in plan.mask.iter().enumerate().filter(|(_, &m)| m == 1) {
        let (gy, gx) = (tok / base.grid_w, tok % base.grid_w);
        for y in gy * cell..(gy + 1) * cell {
            masked.row_mut(y)[gx * cell..(gx + 1) * cell].fill(MASK_GRAY);
        }
    }
    let d1 = unpatchify(&denormalize(&f.pred_base, &f.targets.base_stats), &base)?;
    let d1 = upsample_nearest(&d1, cfg.k);
    let d2 = match &f.pred_high {
        Some(p) => unpatchify(&denormalize(p, &f.targets.high_stats), &cfg.high_grid())?,
        None => Tensor::full(&[s, s], MASK_GRAY),
    };

    let panels = [img_high, &masked, &d1, &d2];
    let width = 4 * s + 3;
    Ok(Tensor::from_fn(s, width, |y, x| {
        let (panel, col) = (x / (s + 1), x % (s + 1));
        if col == s {
            SEPARATOR
        } else {
            panels[panel].get(y, col).clamp(0.0, 1.0)
        }
    }))
}
