//! Multi-scale masked autoencoder: one encoder, a base-resolution decoder
//! and a high-resolution decoder fed by duplicated tokens.

mod masking;
mod model;
mod optim;
mod targets;
mod train;

pub use masking::{
    duplicate_backward, duplicate_tokens, expand_mask, parent_of, random_masking,
    restore_backward, restore_with_mask_tokens, MaskPlan,
};
pub use model::{
    decode, encode_visible, forward_backward, forward_image, load_model, model_tensors,
    save_model, Branch, Decoder, DecoderCache, ImageForward, MiramConfig, MiramParams, PosTables,
};
pub use optim::{cosine_lr, AdamW, OptimConfig};
pub use targets::{
    build_targets, joint_loss, masked_mse, masked_mse_backward, miram_loss, LossRecord, MaskedMse,
    ScaleTargets, NORM_EPS,
};
pub use train::{
    classify, evaluate_accuracy, finetune_classifier, train_step, AccuracyRecord, FinetuneState,
    TrainState,
};
