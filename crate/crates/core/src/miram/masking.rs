use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Rng, Tensor};

/// Per-image random masking bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Token indices sorted by ascending noise; the first `len_keep` stay visible.
    pub shuffle: Vec<usize>,
    /// Inverse of `shuffle`: position of original token `i` in the shuffled order.
    pub ids_restore: Vec<usize>,
    pub len_keep: usize,
    /// 1 = masked.
    pub mask: Vec<u8>,
}

impl MaskPlan {
    pub fn new(tokens: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        let noise: Vec<f64> = (0..tokens).map(|_| rng.uniform()).collect();
        Self::from_noise(&noise, ratio)
    }

    pub fn from_noise(noise: &[f64], ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(param_err(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let l = noise.len();
        let len_keep = l - (ratio * l as f64).round() as usize;
        let mut shuffle: Vec<usize> = (0..l).collect();
        shuffle.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
        let mut ids_restore = vec![0; l];
        for (pos, &tok) in shuffle.iter().enumerate() {
            ids_restore[tok] = pos;
        }
        let mask = ids_restore.iter().map(|&p| u8::from(p >= len_keep)).collect();
        Ok(Self {
            ratio,
            shuffle,
            ids_restore,
            len_keep,
            mask,
        })
    }

    pub fn tokens(&self) -> usize {
        self.shuffle.len()
    }

    pub fn keep(&self) -> &[usize] {
        &self.shuffle[..self.len_keep]
    }

    pub fn masked_count(&self) -> usize {
        self.tokens() - self.len_keep
    }
}

/// Draws a plan from `rng` and gathers the visible rows in shuffled order.
pub fn random_masking(tokens: &Tensor, ratio: f64, rng: &mut Rng) -> Result<(Tensor, MaskPlan)> {
    let plan = MaskPlan::new(tokens.rows(), ratio, rng)?;
    Ok((tokens.select_rows(plan.keep()), plan))
}

/// Puts visible encodings back in grid order; masked slots get
/// `mask_token + pos[i]`.
pub fn restore_with_mask_tokens(
    z_vis: &Tensor,
    plan: &MaskPlan,
    mask_token: &Tensor,
    pos: &Tensor,
) -> Result<Tensor> {
    let l = plan.tokens();
    let d = mask_token.len();
    if z_vis.rank() != 2 || z_vis.rows() != plan.len_keep || z_vis.cols() != d {
        return Err(dim_err(format!(
            "visible encodings {:?} do not match plan (keep {}) and width {d}",
            z_vis.shape(),
            plan.len_keep
        )));
    }
    if pos.shape() != [l, d] {
        return Err(dim_err(format!(
            "positional table {:?} is not {l}×{d}",
            pos.shape()
        )));
    }
    let mut out = Tensor::zeros(&[l, d]);
    for i in 0..l {
        let slot = plan.ids_restore[i];
        let row = out.row_mut(i);
        if slot < plan.len_keep {
            row.copy_from_slice(z_vis.row(slot));
        } else {
            for ((o, t), p) in row.iter_mut().zip(mask_token.data()).zip(pos.row(i)) {
                *o = t + p;
            }
        }
    }
    Ok(out)
}

/// Returns `(dz_vis, dmask_token)`.
pub fn restore_backward(dz_full: &Tensor, plan: &MaskPlan) -> (Tensor, Tensor) {
    let d = dz_full.cols();
    let dz_vis = dz_full.select_rows(plan.keep());
    let mut dtok = Tensor::zeros(&[d]);
    for (i, &m) in plan.mask.iter().enumerate() {
        if m == 1 {
            for (g, v) in dtok.data_mut().iter_mut().zip(dz_full.row(i)) {
                *g += v;
            }
        }
    }
    (dz_vis, dtok)
}

/// Index of the base-grid parent of a token on the `k`-times finer grid.
pub fn parent_of(child: usize, grid_w: usize, k: usize) -> usize {
    let (r, c) = (child / (grid_w * k), child % (grid_w * k));
    (r / k) * grid_w + c / k
}

/// Nearest-neighbour replication in token space: the token at grid `(i, j)`
/// fills the `k × k` block of the finer grid, flattened row-major.
pub fn duplicate_tokens(z: &Tensor, grid_h: usize, grid_w: usize, k: usize) -> Result<Tensor> {
    if z.rank() != 2 || z.rows() != grid_h * grid_w || k == 0 {
        return Err(dim_err(format!(
            "cannot duplicate {:?} on a {grid_h}×{grid_w} grid with k={k}",
            z.shape()
        )));
    }
    let n = grid_h * grid_w * k * k;
    let idx: Vec<usize> = (0..n).map(|c| parent_of(c, grid_w, k)).collect();
    Ok(z.select_rows(&idx))
}

pub fn duplicate_backward(dz_up: &Tensor, grid_h: usize, grid_w: usize, k: usize) -> Tensor {
    let mut out = Tensor::zeros(&[grid_h * grid_w, dz_up.cols()]);
    for c in 0..dz_up.rows() {
        let p = parent_of(c, grid_w, k);
        for (o, v) in out.row_mut(p).iter_mut().zip(dz_up.row(c)) {
            *o += v;
        }
    }
    out
}

/// Expands a base-grid mask to the `k`-times finer grid.
pub fn expand_mask(mask: &[u8], grid_h: usize, grid_w: usize, k: usize) -> Vec<u8> {
    (0..grid_h * grid_w * k * k)
        .map(|c| mask[parent_of(c, grid_w, k)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ratio_keeps_everything() {
        let x = Tensor::randn(&[9, 3], 1.0, &mut Rng::new(1));
        let (vis, plan) = random_masking(&x, 0.0, &mut Rng::new(2)).unwrap();
        assert_eq!(plan.len_keep, 9);
        assert!(plan.mask.iter().all(|&m| m == 0));
        let z = restore_with_mask_tokens(&vis, &plan, &Tensor::full(&[3], 5.0), &Tensor::zeros(&[9, 3]))
            .unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn keep_count_rule() {
        let plan = MaskPlan::new(196, 0.75, &mut Rng::new(0)).unwrap();
        assert_eq!(plan.len_keep, 49);
        assert_eq!(plan.mask.iter().map(|&m| m as usize).sum::<usize>(), 147);
        assert!(MaskPlan::new(4, 1.0, &mut Rng::new(0)).is_err());
        assert!(MaskPlan::new(4, -0.1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        let a = MaskPlan::new(64, 0.75, &mut Rng::new(5)).unwrap();
        let b = MaskPlan::new(64, 0.75, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_tokens_and_positions_give_zero_rows() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let (vis, plan) = random_masking(&x, 0.5, &mut rng).unwrap();
        let z = restore_with_mask_tokens(&vis, &plan, &Tensor::zeros(&[4]), &Tensor::zeros(&[8, 4]))
            .unwrap();
        for i in 0..8 {
            if plan.mask[i] == 1 {
                assert!(z.row(i).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(z.row(i), x.row(i));
            }
        }
        assert!(restore_with_mask_tokens(&x, &plan, &Tensor::zeros(&[4]), &Tensor::zeros(&[8, 4])).is_err());
    }

    #[test]
    fn duplication_layout() {
        let z = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let up = duplicate_tokens(&z, 2, 2, 2).unwrap();
        let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(up.data(), &expect);
        assert_eq!(duplicate_tokens(&z, 2, 2, 1).unwrap(), z);
        let one = Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap();
        let up = duplicate_tokens(&one, 1, 1, 2).unwrap();
        assert_eq!(up.rows(), 4);
        assert!((0..4).all(|i| up.row(i) == [7.0, 8.0]));
    }

    #[test]
    fn duplicate_backward_sums_children() {
        let up = Tensor::full(&[16, 2], 1.0);
        let d = duplicate_backward(&up, 2, 2, 2);
        assert!(d.data().iter().all(|&v| v == 4.0));
    }
}
