//! Finite-difference checks of every reverse pass in the model.

use crate::attention::{
    multi_head_backward, multi_head_forward, AttentionConfig, Mechanism, MultiHeadWeights,
};
use crate::error::Result;
use crate::miram::{forward_backward, forward_image, MaskPlan, MiramConfig, MiramParams, PosTables};
use crate::params::{named_tensors, zeros_like, ParamKind, Params};
use crate::tensor::{
    gelu, gelu_backward, grad_check, layer_norm, layer_norm_backward, softmax_rows,
    softmax_rows_backward, GradReport, Rng, Tensor,
};
use crate::vit::Stack;

pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    /// Worst report over the seeds checked.
    pub report: GradReport,
}

fn worst(name: &str, reports: Vec<GradReport>) -> GradCase {
    let report = reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one seed");
    GradCase {
        name: name.to_string(),
        report,
    }
}

fn trainable<P: Params>(p: &P) -> Vec<Tensor> {
    named_tensors(p)
        .into_iter()
        .filter(|(_, _, k)| *k != ParamKind::Buffer)
        .map(|(_, t, _)| t.clone())
        .collect()
}

fn rebuild<P: Params + Clone>(base: &P, xs: &[Tensor]) -> P {
    let mut p = base.clone();
    let mut i = 0;
    p.visit_mut("", &mut |_, t, k| {
        if k != ParamKind::Buffer {
            *t = xs[i].clone();
            i += 1;
        }
    });
    p
}

/// Checks `dX` and every trainable parameter of a layer with one input.
fn layer_case<P, C>(
    layer: &P,
    x: Tensor,
    forward: impl Fn(&P, &Tensor) -> Result<(Tensor, C)>,
    backward: impl Fn(&P, &C, &Tensor) -> Result<(Tensor, P)>,
    seed: u64,
) -> Result<GradReport>
where
    P: Params + Clone,
{
    let mut inputs = vec![x];
    inputs.extend(trainable(layer));
    grad_check(
        |xs| forward(&rebuild(layer, &xs[1..]), &xs[0]).map(|(y, _)| y),
        |xs, dy| {
            let p = rebuild(layer, &xs[1..]);
            let (_, c) = forward(&p, &xs[0])?;
            let (dx, g) = backward(&p, &c, dy)?;
            let mut out = vec![dx];
            out.extend(trainable(&g));
            Ok(out)
        },
        &inputs,
        SUITE_TOL,
        seed,
    )
}

/// Unit-scale norm parameters hide errors in their gradients.
fn jitter_norms<P: Params>(p: &mut P, rng: &mut Rng) {
    p.visit_mut("", &mut |n, t, _| {
        if n.ends_with("gamma") || n.ends_with("beta") || n.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        }
    });
}

fn stack_case(cfg: AttentionConfig, seed: u64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let mut stack = Stack::init(1, cfg, &mut rng);
    jitter_norms(&mut stack, &mut rng);
    let x = Tensor::randn(&[cfg.seq_len, cfg.embed_dim], 1.0, &mut rng);
    layer_case(&stack, x, Stack::forward, Stack::backward, seed)
}

fn joint_loss_case(mechanism: Mechanism, seed: u64) -> Result<GradReport> {
    let cfg = MiramConfig {
        img_size: 8,
        patch: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        dec_dim: 8,
        dec_depth: 1,
        dec_heads: 2,
        mechanism,
        m: 4,
        mask_ratio: 0.5,
        ..MiramConfig::default()
    };
    let tables = PosTables::new(&cfg)?;
    let mut rng = Rng::new(seed);
    let base = MiramParams::init(&cfg, &mut rng)?;
    let s = cfg.high_size();
    let img = Tensor::from_fn(s, s, |_, _| rng.uniform());
    let plan = MaskPlan::new(cfg.tokens(), cfg.mask_ratio, &mut rng)?;
    // The classifier does not enter the pretext loss.
    let names: Vec<String> = named_tensors(&base)
        .into_iter()
        .filter(|(n, _, k)| *k != ParamKind::Buffer && !n.starts_with("classifier"))
        .map(|(n, _, _)| n)
        .collect();
    let pick = |p: &MiramParams| -> Vec<Tensor> {
        named_tensors(p)
            .into_iter()
            .filter(|(n, _, _)| names.contains(n))
            .map(|(_, t, _)| t.clone())
            .collect()
    };
    let build = |xs: &[Tensor]| {
        let mut p = base.clone();
        let mut i = 0;
        p.visit_mut("", &mut |n, t, _| {
            if names.contains(&n) {
                *t = xs[i].clone();
                i += 1;
            }
        });
        p
    };
    grad_check(
        |xs| {
            let f = forward_image(&build(xs), &cfg, &tables, &img, &plan)?;
            Ok(Tensor::full(&[1], f.loss.total))
        },
        |xs, dy| {
            let p = build(xs);
            let mut g = zeros_like(&p);
            forward_backward(&p, &cfg, &tables, &img, &plan, dy.data()[0], &mut g)?;
            Ok(pick(&g))
        },
        &pick(&base),
        SUITE_TOL,
        seed,
    )
}

/// Runs every case over `seeds` and returns the worst report per case.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let run = |name: &str, f: &dyn Fn(u64) -> Result<GradReport>| -> Result<GradCase> {
        let reports = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
        Ok(worst(name, reports))
    };

    cases.push(run("matmul", &|s| {
        let mut rng = Rng::new(s);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        grad_check(
            |xs| xs[0].matmul(&xs[1]),
            |xs, dy| Ok(vec![dy.matmul_nt(&xs[1])?, xs[0].matmul_tn(dy)?]),
            &[a, b],
            SUITE_TOL,
            s,
        )
    })?);
    cases.push(run("softmax_rows", &|s| {
        let x = Tensor::randn(&[2, 4], 1.0, &mut Rng::new(s));
        grad_check(
            |xs| Ok(softmax_rows(&xs[0])),
            |xs, dy| Ok(vec![softmax_rows_backward(&softmax_rows(&xs[0]), dy)]),
            &[x],
            SUITE_TOL,
            s,
        )
    })?);
    cases.push(run("layer_norm", &|s| {
        let mut rng = Rng::new(s);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let g = Tensor::randn(&[5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        grad_check(
            |xs| layer_norm(&xs[0], &xs[1], &xs[2], 1e-6).map(|(y, _)| y),
            |xs, dy| {
                let (_, c) = layer_norm(&xs[0], &xs[1], &xs[2], 1e-6)?;
                let (dx, dg, db) = layer_norm_backward(&c, &xs[1], dy);
                Ok(vec![dx, dg, db])
            },
            &[x, g, b],
            SUITE_TOL,
            s,
        )
    })?);
    cases.push(run("gelu", &|s| {
        let x = Tensor::randn(&[3, 4], 1.5, &mut Rng::new(s));
        grad_check(
            |xs| Ok(gelu(&xs[0])),
            |xs, dy| Ok(vec![gelu_backward(&xs[0], dy)]),
            &[x],
            SUITE_TOL,
            s,
        )
    })?);

    for mech in Mechanism::ALL {
        cases.push(run(&format!("attention/{mech}"), &|s| {
            let cfg = AttentionConfig::new(mech, 8, 8, 2, 4, s)?;
            let mut rng = Rng::new(s);
            let w = MultiHeadWeights::init(&cfg, &mut rng);
            let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
            layer_case(
                &w,
                x,
                |w, x| multi_head_forward(x, w, &cfg),
                |w, c, dy| multi_head_backward(w, &cfg, c, dy),
                s,
            )
        })?);
    }

    cases.push(run("encoder/1-block", &|s| {
        stack_case(AttentionConfig::new(Mechanism::Standard, 4, 8, 2, 4, s)?, s)
    })?);
    for mech in Mechanism::ALL {
        // Four base tokens duplicated with k = 2.
        cases.push(run(&format!("decoder2/{mech}"), &|s| {
            stack_case(AttentionConfig::new(mech, 16, 8, 2, 4, s)?, s)
        })?);
    }
    for mech in Mechanism::ALL {
        cases.push(run(&format!("joint_loss/{mech}"), &|s| joint_loss_case(mech, s))?);
    }
    Ok(cases)
}
