use miram::checkpoint;
use miram::data::{decode_pgm, encode_pgm};
use miram::miram::{duplicate_backward, duplicate_tokens, MaskPlan};
use miram::tensor::softmax_rows;
use miram::vit::{patchify, unpatchify, PatchGrid};
use miram::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut miram::Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_roundtrip(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let img = tensor(gh * p, gw * p, seed);
        let grid = PatchGrid::new(gh * p, gw * p, p).unwrap();
        let tokens = patchify(&img, p).unwrap();
        prop_assert_eq!(tokens.shape(), &[gh * gw, p * p]);
        prop_assert_eq!(unpatchify(&tokens, &grid).unwrap(), img);
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let p = softmax_rows(&tensor(rows, cols, seed).scale(scale));
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn mask_plan_counts(l in 1usize..200, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        let plan = MaskPlan::new(l, ratio, &mut miram::Rng::new(seed)).unwrap();
        let masked = plan.mask.iter().filter(|&&m| m == 1).count();
        prop_assert_eq!(masked + plan.len_keep, l);
        prop_assert_eq!(plan.keep().len(), plan.len_keep);
    }

    /// Summing the duplicates back is `k²` times the identity.
    #[test]
    fn duplicate_adjoint(gh in 1usize..4, gw in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let z = tensor(gh * gw, 3, seed);
        let up = duplicate_tokens(&z, gh, gw, k).unwrap();
        prop_assert_eq!(up.rows(), gh * gw * k * k);
        let back = duplicate_backward(&up, gh, gw, k);
        prop_assert!(back.max_abs_diff(&z.scale((k * k) as f64)) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5), seed in any::<u64>()) {
        let mut rng = miram::Rng::new(seed);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        let bytes = checkpoint::encode(&tensors).unwrap();
        prop_assert_eq!(checkpoint::decode(&bytes).unwrap(), tensors);
    }

    #[test]
    fn pgm_lattice_roundtrip(h in 1usize..10, w in 1usize..10, seed in any::<u64>(), wide in any::<bool>()) {
        let (maxval, levels) = if wide { (65535u16, 65535usize) } else { (255, 255) };
        let mut rng = miram::Rng::new(seed);
        let img = Tensor::from_fn(h, w, |_, _| rng.below(levels + 1) as f64 / levels as f64);
        prop_assert_eq!(decode_pgm(&encode_pgm(&img, maxval).unwrap()).unwrap(), img);
    }

    #[test]
    fn pgm_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut input = b"P5\n".to_vec();
        input.extend(bytes);
        let _ = decode_pgm(&input);
    }
}
