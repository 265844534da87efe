use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use miram::attention::{AttentionConfig, Mechanism};
use miram::bench::{emit_report, fit_scaling_exponent, time_mechanism};
use miram::data::{labelled_set, list_pgm_files, read_pgm, write_pgm, ShapeClass, SyntheticSpec};
use miram::miram::{
    cosine_lr, evaluate_accuracy, finetune_classifier, load_model, save_model, train_step,
    FinetuneState, MaskPlan, MiramConfig, PosTables, TrainState,
};
use miram::verify::gradient_suite;
use miram::{Error, Rng, Tensor};

use crate::config::RunConfig;
use crate::recon::reconstruct_grid;
use crate::{CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

// Offsets that keep held-out and sampling streams apart from the training data.
const EVAL_STREAM: u64 = 0x0e7a_1000;
const SAMPLE_STREAM: u64 = 0x5a3b_2000;
const RECON_STREAM: u64 = 0x7ec0_3000;

pub(crate) fn dispatch(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let echo = cfg.echo();
    println!("# resolved configuration");
    print!("{echo}");
    fs::write(out.join("config.txt"), &echo)?;
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Pretrain => pretrain(cfg, out),
        Command::Finetune => finetune(cfg, out),
        Command::Bench => bench(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Reconstruct => reconstruct(cfg, out),
    }
}

fn template(cfg: &RunConfig, size: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_blobs: cfg.n_blobs,
        spicule_count: cfg.spicules,
        noise_amp: cfg.noise_amp,
        ..SyntheticSpec::new(size, ShapeClass::Blob, 0)
    }
}

fn synthetic(cfg: &RunConfig, count: usize, size: usize, seed: u64) -> Result<Vec<(Tensor, usize)>> {
    Ok(labelled_set(count, size, seed, &template(cfg, size))?)
}

/// Label from the last `_`-separated part of the file stem, as written by `gen-data`.
fn label_from_name(path: &Path) -> Result<usize> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let tag = stem.rsplit('_').next().unwrap_or("");
    tag.parse::<ShapeClass>().map(ShapeClass::label).map_err(|_| {
        CliError::Runtime(format!(
            "cannot infer a class from {}; expected a name ending in _blob or _ring",
            path.display()
        ))
    })
}

fn read_dir_images(dir: &str) -> Result<Vec<(PathBuf, Tensor)>> {
    let files = list_pgm_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .pgm files in {dir}")).into());
    }
    files
        .into_iter()
        .map(|p| {
            let img = read_pgm(&p)?;
            Ok((p, img))
        })
        .collect()
}

fn training_set(cfg: &RunConfig, size: usize) -> Result<Vec<(Tensor, usize)>> {
    if cfg.data_dir.is_empty() {
        return synthetic(cfg, cfg.n_images, size, cfg.seed);
    }
    read_dir_images(&cfg.data_dir)?
        .into_iter()
        .map(|(p, img)| Ok((img, label_from_name(&p)?)))
        .collect()
}

fn unlabelled_set(cfg: &RunConfig, size: usize) -> Result<Vec<Tensor>> {
    if cfg.data_dir.is_empty() {
        return Ok(synthetic(cfg, cfg.n_images, size, cfg.seed)?
            .into_iter()
            .map(|(img, _)| img)
            .collect());
    }
    Ok(read_dir_images(&cfg.data_dir)?.into_iter().map(|(_, img)| img).collect())
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    if cfg.checkpoint.is_empty() {
        out.join("pretrain.mirm")
    } else {
        PathBuf::from(&cfg.checkpoint)
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let size = cfg.model().high_size();
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    let set = synthetic(cfg, cfg.n_images, size, cfg.seed)?;
    for (i, (img, label)) in set.iter().enumerate() {
        let class = ShapeClass::from_label(*label).expect("labels come from ShapeClass");
        write_pgm(dir.join(format!("{i:05}_{class}.pgm")), img, cfg.pgm_maxval)?;
    }
    println!("wrote {} images of {size}x{size} to {}", set.len(), dir.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = cfg.model();
    let images = unlabelled_set(cfg, model.high_size())?;
    let mut state = TrainState::new(model, cfg.pretrain_optim(), cfg.seed)?;
    let mut log = String::from("step,lr,total,base,high\n");
    let n = images.len();
    let mut warned = false;
    for step in 0..cfg.steps {
        let batch: Vec<Tensor> = (0..cfg.batch).map(|i| images[(step * cfg.batch + i) % n].clone()).collect();
        let lr = cosine_lr(&state.optim.cfg, step);
        let rec = train_step(&mut state, &batch)?;
        if rec.empty_mask && !warned {
            eprintln!("warning: no tokens are masked; the reconstruction loss is zero");
            warned = true;
        }
        let high = rec.high.map_or(String::new(), |h| format!("{h}"));
        let _ = writeln!(log, "{step},{lr},{},{},{high}", rec.total, rec.base);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let high = rec.high.map_or("-".into(), |h| format!("{h:.6}"));
            println!(
                "step {step:>5}/{} loss {:.6} base {:.6} high {high} lr {lr:.3e}",
                cfg.steps, rec.total, rec.base
            );
        }
    }
    fs::write(out.join("pretrain_log.csv"), log)?;
    let path = out.join("pretrain.mirm");
    save_model(&path, &state.cfg, &state.params)?;
    println!("saved {}", path.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = checkpoint_path(cfg, out);
    let (model, params) = load_model(&ckpt)?;
    println!("loaded {} (architecture from checkpoint)", ckpt.display());
    let size = model.high_size();
    let train = training_set(cfg, size)?;
    let eval = synthetic(cfg, cfg.eval_images, size, cfg.seed.wrapping_add(EVAL_STREAM))?;
    let mut state = FinetuneState::new(model, params, cfg.finetune_optim())?;
    let mut rng = Rng::new(cfg.seed.wrapping_add(SAMPLE_STREAM));
    let mut log = String::from("step,lr,loss,batch_accuracy\n");
    for step in 0..cfg.ft_steps {
        let batch: Vec<(Tensor, usize)> = (0..cfg.ft_batch).map(|_| train[rng.below(train.len())].clone()).collect();
        let lr = cosine_lr(&state.optim.cfg, step);
        let rec = finetune_classifier(&mut state, &batch)?;
        let _ = writeln!(log, "{step},{lr},{},{}", rec.loss, rec.accuracy);
        if step % cfg.log_every == 0 || step + 1 == cfg.ft_steps {
            println!(
                "step {step:>5}/{} loss {:.6} batch_acc {:.3} lr {lr:.3e}",
                cfg.ft_steps, rec.loss, rec.accuracy
            );
        }
    }
    let train_acc = evaluate_accuracy(&state.params, &state.cfg, &state.tables, &train)?;
    let eval_acc = evaluate_accuracy(&state.params, &state.cfg, &state.tables, &eval)?;
    println!("train_accuracy {train_acc:.4} eval_accuracy {eval_acc:.4}");
    let _ = writeln!(log, "# train_accuracy,{train_acc}\n# eval_accuracy,{eval_acc}");
    fs::write(out.join("finetune_log.csv"), log)?;
    let path = out.join("finetune.mirm");
    save_model(&path, &state.cfg, &state.params)?;
    println!("saved {}", path.display());
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mechanisms = if cfg.bench_all {
        Mechanism::ALL.to_vec()
    } else if cfg.mechanism == Mechanism::Standard {
        vec![Mechanism::Standard]
    } else {
        vec![Mechanism::Standard, cfg.mechanism]
    };
    let mut records = Vec::new();
    let mut fits = Vec::new();
    for mech in mechanisms {
        let mut rows = Vec::new();
        for &n in &cfg.bench_sizes {
            let acfg = AttentionConfig::new(mech, n, cfg.bench_d, cfg.bench_heads, cfg.bench_m.min(n), cfg.seed)?;
            rows.push(time_mechanism(&acfg, cfg.repeats)?);
        }
        if rows.len() >= 3 {
            let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.median_secs)).collect();
            let mut fit = fit_scaling_exponent(&points)?;
            fit.mechanism = Some(mech);
            fits.push(fit);
        }
        records.extend(rows);
    }
    let path = out.join("bench.csv");
    emit_report(&records, &fits, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seeds: Vec<u64> = (0..3).map(|i| cfg.seed.wrapping_add(i)).collect();
    let cases = gradient_suite(&seeds)?;
    let mut report = String::new();
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.report.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!c.report.passed);
        let _ = writeln!(
            report,
            "{:<24} max_rel {:.3e} max_abs {:.3e} coords {:>5} {verdict}",
            c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.coords_checked
        );
    }
    print!("{report}");
    fs::write(out.join("gradcheck.txt"), &report)?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} gradient cases failed", cases.len())));
    }
    println!("all {} gradient cases passed", cases.len());
    Ok(())
}

fn reconstruct(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = checkpoint_path(cfg, out);
    let (model, params) = load_model(&ckpt)?;
    let model = MiramConfig {
        mask_ratio: cfg.mask_ratio,
        ..model
    };
    model.validate()?;
    let tables = PosTables::new(&model)?;
    let images: Vec<Tensor> = if cfg.images.is_empty() {
        synthetic(cfg, cfg.recon_count, model.high_size(), cfg.seed.wrapping_add(RECON_STREAM))?
            .into_iter()
            .map(|(img, _)| img)
            .collect()
    } else {
        read_dir_images(&cfg.images)?.into_iter().map(|(_, img)| img).collect()
    };
    let dir = out.join("recon");
    fs::create_dir_all(&dir)?;
    let mut rng = Rng::new(cfg.seed);
    for (i, img) in images.iter().enumerate() {
        let plan = MaskPlan::new(model.tokens(), model.mask_ratio, &mut rng)?;
        let grid = reconstruct_grid(&model, &params, &tables, img, &plan)?;
        write_pgm(dir.join(format!("recon_{i:03}.pgm")), &grid, cfg.pgm_maxval)?;
    }
    println!("wrote {} panels to {}", images.len(), dir.display());
    Ok(())
}
