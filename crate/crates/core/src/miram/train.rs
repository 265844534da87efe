use super::masking::MaskPlan;
use super::model::{accumulate_into, embed_patches, forward_backward, MiramConfig, MiramParams, PosTables};
use super::optim::{cosine_lr, AdamW, OptimConfig};
use super::targets::{joint_loss, LossRecord};
use crate::error::{Error, Result};
use crate::params::zeros_like;
use crate::tensor::{softmax_rows, Rng, Tensor};

/// Parameters, optimiser moments and the masking stream of a pre-training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: MiramConfig,
    pub params: MiramParams,
    pub optim: AdamW,
    pub tables: PosTables,
    pub rng: Rng,
    pub step: usize,
}

impl TrainState {
    /// Initialises weights and the masking stream from independent forks of `seed`.
    pub fn new(cfg: MiramConfig, optim: OptimConfig, seed: u64) -> Result<Self> {
        let mut root = Rng::new(seed);
        let mut init = root.fork();
        let rng = root.fork();
        let params = MiramParams::init(&cfg, &mut init)?;
        Ok(Self {
            tables: PosTables::new(&cfg)?,
            optim: AdamW::new(&params, optim),
            cfg,
            params,
            rng,
            step: 0,
        })
    }
}

fn pretrain_trainable(name: &str) -> bool {
    !name.starts_with("classifier.")
}

/// Masks every image, runs both decoders, and applies one AdamW update
/// with the scheduled learning rate. Gradients are averaged over the batch
/// in batch order.
pub fn train_step(state: &mut TrainState, batch: &[Tensor]) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let cfg = state.cfg;
    let mut grads = zeros_like(&state.params);
    let scale = 1.0 / batch.len() as f64;
    let (mut base, mut high, mut empty) = (0.0, 0.0, false);
    for img in batch {
        let plan = MaskPlan::new(cfg.tokens(), cfg.mask_ratio, &mut state.rng)?;
        let rec = forward_backward(&state.params, &cfg, &state.tables, img, &plan, scale, &mut grads)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Training { step: state.step, msg },
                other => other,
            })?;
        base += rec.base;
        high += rec.high.unwrap_or(0.0);
        empty |= rec.empty_mask;
    }
    base *= scale;
    let (total, high) = if cfg.dual {
        high *= scale;
        (joint_loss(base, high), Some(high))
    } else {
        (base, None)
    };
    if !total.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("non-finite loss {total}"),
        });
    }
    let lr = cosine_lr(&state.optim.cfg, state.step);
    state.optim.step(&mut state.params, &grads, lr, &pretrain_trainable);
    state.step += 1;
    Ok(LossRecord {
        total,
        base,
        high,
        empty_mask: empty,
    })
}

/// Mean-pooled encoder features through the linear head; no masking.
pub fn classify(params: &MiramParams, cfg: &MiramConfig, tables: &PosTables, img_high: &Tensor) -> Result<Tensor> {
    let (_, emb) = embed_patches(params, cfg, tables, img_high)?;
    let (z, _) = params.encoder.stack.forward(&emb)?;
    let pooled = z.sum_rows().scale(1.0 / z.rows() as f64).reshape(&[1, cfg.embed_dim])?;
    params.classifier.forward(&pooled)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn evaluate_accuracy(
    params: &MiramParams,
    cfg: &MiramConfig,
    tables: &PosTables,
    set: &[(Tensor, usize)],
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut correct = 0;
    for (img, label) in set {
        let logits = classify(params, cfg, tables, img)?;
        correct += usize::from(argmax(logits.data()) == *label);
    }
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub cfg: MiramConfig,
    pub params: MiramParams,
    pub optim: AdamW,
    pub tables: PosTables,
    pub step: usize,
}

impl FinetuneState {
    pub fn new(cfg: MiramConfig, params: MiramParams, optim: OptimConfig) -> Result<Self> {
        Ok(Self {
            tables: PosTables::new(&cfg)?,
            optim: AdamW::new(&params, optim),
            cfg,
            params,
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyRecord {
    /// Mean cross-entropy before the update.
    pub loss: f64,
    /// Batch accuracy before the update.
    pub accuracy: f64,
}

fn finetune_trainable(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("classifier.")
}

/// One cross-entropy step over encoder and head; decoders and the mask
/// token are left alone.
pub fn finetune_classifier(state: &mut FinetuneState, batch: &[(Tensor, usize)]) -> Result<AccuracyRecord> {
    if batch.is_empty() {
        return Err(Error::Data("empty fine-tuning batch".into()));
    }
    let cfg = state.cfg;
    let p = &state.params;
    let mut grads = zeros_like(p);
    let scale = 1.0 / batch.len() as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (img, label) in batch {
        if *label >= cfg.num_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                cfg.num_classes
            )));
        }
        let (x_p, emb) = embed_patches(p, &cfg, &state.tables, img)?;
        let (z, cache) = p.encoder.stack.forward(&emb)?;
        let l = z.rows();
        let pooled = z.sum_rows().scale(1.0 / l as f64).reshape(&[1, cfg.embed_dim])?;
        let logits = p.classifier.forward(&pooled)?;
        let probs = softmax_rows(&logits);
        loss -= probs.data()[*label].max(f64::MIN_POSITIVE).ln() * scale;
        correct += usize::from(argmax(logits.data()) == *label);

        let mut dlogits = probs.scale(scale);
        dlogits.data_mut()[*label] -= scale;
        let (dpooled, gcls) = p.classifier.backward(&pooled, &dlogits)?;
        accumulate_into(&mut grads.classifier, &gcls);
        let dz = Tensor::from_fn(l, cfg.embed_dim, |_, j| dpooled.data()[j] / l as f64);
        let (demb, gstack) = p.encoder.stack.backward(&cache, &dz)?;
        accumulate_into(&mut grads.encoder.stack, &gstack);
        let (_, gpe) = p.encoder.patch_embed.backward(&x_p, &demb)?;
        accumulate_into(&mut grads.encoder.patch_embed, &gpe);
    }
    if !loss.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("non-finite classification loss {loss}"),
        });
    }
    let lr = cosine_lr(&state.optim.cfg, state.step);
    state.optim.step(&mut state.params, &grads, lr, &finetune_trainable);
    state.step += 1;
    Ok(AccuracyRecord {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
    })
}
