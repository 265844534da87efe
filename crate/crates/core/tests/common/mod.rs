#![allow(dead_code)]

use miram::data::{labelled_set, ShapeClass, SyntheticSpec};
use miram::miram::{
    evaluate_accuracy, finetune_classifier, train_step, FinetuneState, MiramConfig, MiramParams,
    OptimConfig, TrainState,
};
use miram::{Rng, Tensor};

pub const PRETRAIN_STEPS: usize = 100;
pub const FINETUNE_STEPS: usize = 300;
pub const BATCH: usize = 16;

/// The fixed eight-image batch of the overfitting runs.
pub fn overfit_batch() -> Vec<Tensor> {
    (0..8)
        .map(|i| {
            let class = if i % 2 == 0 { ShapeClass::Blob } else { ShapeClass::Ring };
            miram::data::gen_synthetic(&SyntheticSpec::new(64, class, 100 + i)).unwrap()
        })
        .collect()
}

pub struct Outcome {
    pub params: MiramParams,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Pre-trains on 256 synthetic images, fine-tunes the encoder and head on
/// blob-vs-ring labels, and scores both the training and a held-out set.
pub fn pretrain_then_finetune(dual: bool, seed: u64) -> Outcome {
    let template = SyntheticSpec::new(64, ShapeClass::Blob, 0);
    let train = labelled_set(256, 64, 1000 + seed, &template).unwrap();
    let test = labelled_set(128, 64, 5000 + seed, &template).unwrap();
    let cfg = MiramConfig {
        dual,
        ..MiramConfig::default()
    };
    let pre = OptimConfig {
        warmup: 10,
        total_steps: PRETRAIN_STEPS,
        ..OptimConfig::default()
    };
    let mut st = TrainState::new(cfg, pre, seed).unwrap();
    for s in 0..PRETRAIN_STEPS {
        let batch: Vec<Tensor> = (0..BATCH).map(|i| train[(s * BATCH + i) % train.len()].0.clone()).collect();
        train_step(&mut st, &batch).unwrap();
    }
    let ft = OptimConfig {
        lr: 2e-3,
        warmup: 10,
        total_steps: FINETUNE_STEPS,
        ..OptimConfig::default()
    };
    let mut fs = FinetuneState::new(cfg, st.params, ft).unwrap();
    let mut rng = Rng::new(seed ^ 0xf1e7);
    for _ in 0..FINETUNE_STEPS {
        let batch: Vec<(Tensor, usize)> = (0..BATCH).map(|_| train[rng.below(train.len())].clone()).collect();
        finetune_classifier(&mut fs, &batch).unwrap();
    }
    Outcome {
        train_accuracy: evaluate_accuracy(&fs.params, &cfg, &fs.tables, &train).unwrap(),
        test_accuracy: evaluate_accuracy(&fs.params, &cfg, &fs.tables, &test).unwrap(),
        params: fs.params,
    }
}
