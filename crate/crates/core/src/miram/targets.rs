use super::masking::{expand_mask, MaskPlan};
use crate::data::downsample;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use crate::vit::{patchify, PatchGrid};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    /// `L × P²` at input resolution.
    pub base: Tensor,
    /// `L·k² × P²` at `k`-times resolution.
    pub high: Tensor,
    pub mask_base: Vec<u8>,
    pub mask_high: Vec<u8>,
    /// Per-patch `(mean, std)` used for normalisation; `(0, 1)` when off.
    pub base_stats: Vec<(f64, f64)>,
    pub high_stats: Vec<(f64, f64)>,
}

/// Standardises each row in place and returns its `(mean, std)`.
///
/// The mean is accumulated relative to the first pixel so a constant patch
/// normalises to exact zeros.
fn normalize_rows(t: &mut Tensor) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(t.rows());
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let n = row.len() as f64;
        let x0 = row[0];
        let mean = x0 + row.iter().map(|v| v - x0).sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = (var + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
        stats.push((mean, std));
    }
    stats
}

pub fn build_targets(
    img_high: &Tensor,
    patch: usize,
    k: usize,
    normalize: bool,
    plan: &MaskPlan,
) -> Result<ScaleTargets> {
    let base_img = downsample(img_high, k)?;
    let grid = PatchGrid::new(base_img.rows(), base_img.cols(), patch)?;
    if plan.tokens() != grid.len() {
        return Err(dim_err(format!(
            "mask plan covers {} tokens but the base grid has {}",
            plan.tokens(),
            grid.len()
        )));
    }
    let mut base = patchify(&base_img, patch)?;
    let mut high = patchify(img_high, patch)?;
    let (base_stats, high_stats) = if normalize {
        (normalize_rows(&mut base), normalize_rows(&mut high))
    } else {
        (vec![(0.0, 1.0); base.rows()], vec![(0.0, 1.0); high.rows()])
    };
    Ok(ScaleTargets {
        base,
        high,
        mask_high: expand_mask(&plan.mask, grid.grid_h, grid.grid_w, k),
        mask_base: plan.mask.clone(),
        base_stats,
        high_stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMse {
    pub value: f64,
    /// Set when no token was masked (the value is then 0).
    pub empty: bool,
}

fn check_mse(pred: &Tensor, target: &Tensor, mask: &[u8]) -> Result<()> {
    if pred.shape() != target.shape() || pred.rank() != 2 || mask.len() != pred.rows() {
        return Err(dim_err(format!(
            "masked MSE shapes: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Mean over pixels within each masked token, then over masked tokens.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &[u8]) -> Result<MaskedMse> {
    check_mse(pred, target, mask)?;
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Ok(MaskedMse {
            value: 0.0,
            empty: true,
        });
    }
    let p2 = pred.cols() as f64;
    let mut total = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
        let se: f64 = pred.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
        total += se / p2;
    }
    Ok(MaskedMse {
        value: total / count as f64,
        empty: false,
    })
}

pub fn masked_mse_backward(pred: &Tensor, target: &Tensor, mask: &[u8]) -> Result<Tensor> {
    check_mse(pred, target, mask)?;
    let mut g = Tensor::zeros(pred.shape());
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Ok(g);
    }
    let c = 2.0 / (pred.cols() * count) as f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
        for ((o, a), b) in g.row_mut(i).iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            *o = c * (a - b);
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub base: f64,
    /// Absent for the single-decoder ablation.
    pub high: Option<f64>,
    /// No token was masked in at least one image.
    pub empty_mask: bool,
}

/// Unweighted mean of the two scale losses.
pub fn joint_loss(l_base: f64, l_high: f64) -> f64 {
    (l_base + l_high) / 2.0
}

pub fn miram_loss(pred_base: &Tensor, pred_high: &Tensor, t: &ScaleTargets) -> Result<LossRecord> {
    let b = masked_mse(pred_base, &t.base, &t.mask_base)?;
    let h = masked_mse(pred_high, &t.high, &t.mask_high)?;
    Ok(LossRecord {
        total: joint_loss(b.value, h.value),
        base: b.value,
        high: Some(h.value),
        empty_mask: b.empty || h.empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn constant_image_normalises_to_zero() {
        let img = Tensor::full(&[16, 16], 0.1);
        let plan = MaskPlan::new(4, 0.5, &mut Rng::new(1)).unwrap();
        let t = build_targets(&img, 4, 2, true, &plan).unwrap();
        assert!(t.base.data().iter().chain(t.high.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn raw_targets_pass_through() {
        let mut rng = Rng::new(2);
        let img = Tensor::from_fn(16, 16, |_, _| rng.uniform());
        let plan = MaskPlan::new(4, 0.5, &mut rng).unwrap();
        let t = build_targets(&img, 4, 2, false, &plan).unwrap();
        let small = downsample(&img, 2).unwrap();
        assert_eq!(t.base, patchify(&small, 4).unwrap());
        assert_eq!(t.high.shape(), &[16, 16]);
    }

    #[test]
    fn each_masked_parent_has_four_masked_children() {
        let plan = MaskPlan::new(16, 0.75, &mut Rng::new(3)).unwrap();
        let img = Tensor::zeros(&[32, 32]);
        let t = build_targets(&img, 4, 2, true, &plan).unwrap();
        let masked_high: usize = t.mask_high.iter().map(|&m| m as usize).sum();
        assert_eq!(masked_high, 4 * plan.masked_count());
        assert!(build_targets(&Tensor::zeros(&[30, 30]), 4, 2, true, &plan).is_err());
    }

    #[test]
    fn mse_contracts() {
        let t = Tensor::full(&[3, 4], 1.0);
        assert_eq!(masked_mse(&t, &t, &[1, 1, 0]).unwrap().value, 0.0);
        let mut p = t.clone();
        p.row_mut(1).iter_mut().for_each(|v| *v += 2.0);
        assert_eq!(masked_mse(&p, &t, &[0, 1, 0]).unwrap().value, 4.0);

        let mut rng = Rng::new(9);
        let pred = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let target = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mask = [1, 0, 1, 0, 0];
        let v = masked_mse(&pred, &target, &mask).unwrap().value;
        let mut poked = pred.clone();
        for i in [1, 3, 4] {
            poked.row_mut(i).iter_mut().for_each(|x| *x = 1e6 * rng.normal());
        }
        assert_eq!(masked_mse(&poked, &target, &mask).unwrap().value.to_bits(), v.to_bits());

        let none = masked_mse(&pred, &target, &[0; 5]).unwrap();
        assert!(none.empty && none.value == 0.0);
        assert!(masked_mse(&pred, &target, &[1, 0]).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(0.7, 0.7), 0.7);
        assert!((joint_loss(0.2, 0.4) - 0.3).abs() < 1e-15);
        assert_eq!(joint_loss(0.2, 0.4), joint_loss(0.4, 0.2));
    }

    #[test]
    fn mse_gradient() {
        let mut rng = Rng::new(4);
        let pred = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let target = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mask = [0u8, 1, 1, 0];
        let rep = crate::tensor::grad_check(
            |xs| Ok(Tensor::full(&[1], masked_mse(&xs[0], &target, &mask)?.value)),
            |xs, dy| Ok(vec![masked_mse_backward(&xs[0], &target, &mask)?.scale(dy.data()[0])]),
            &[pred],
            1e-6,
            0,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
