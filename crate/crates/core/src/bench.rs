//! Wall-clock timing of the attention layers and log-log scaling fits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::attention::{flop_count, multi_head, AttentionConfig, Mechanism, MultiHeadWeights};
use crate::error::{param_err, Error, Result};
use crate::tensor::{Rng, Tensor};

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    pub repeats: usize,
    /// Median of `samples`, seconds.
    pub median_secs: f64,
    pub samples: Vec<f64>,
    pub flops: u64,
    pub peak_floats: u64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `multi_head` forward on a seeded `N × d` input: two untimed
/// warmups, then `repeats` timed runs.
pub fn time_mechanism(cfg: &AttentionConfig, repeats: usize) -> Result<BenchRecord> {
    cfg.validate()?;
    if repeats < MIN_REPEATS {
        return Err(param_err(format!(
            "at least {MIN_REPEATS} timed repeats are required, got {repeats}"
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let weights = MultiHeadWeights::init(cfg, &mut rng);
    let x = Tensor::randn(&[cfg.seq_len, cfg.embed_dim], 1.0, &mut rng);
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(multi_head(&x, &weights, cfg)?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let y = multi_head(std::hint::black_box(&x), &weights, cfg)?;
        samples.push(t.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    let fc = flop_count(cfg.mechanism, cfg.seq_len, cfg.embed_dim, cfg.m, cfg.heads);
    Ok(BenchRecord {
        mechanism: cfg.mechanism,
        n: cfg.seq_len,
        d: cfg.embed_dim,
        m: cfg.m,
        heads: cfg.heads,
        repeats,
        median_secs: median(&samples),
        samples,
        flops: fc.flops,
        peak_floats: fc.peak_floats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub mechanism: Option<Mechanism>,
    pub points: Vec<(f64, f64)>,
    /// Slope of `log t` against `log N`.
    pub alpha: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares on `(ln N, ln t)`.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::Data(format!(
            "scaling fit needs ≥ 3 points, got {}",
            points.len()
        )));
    }
    for w in points.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Data("sequence lengths must be strictly increasing".into()));
        }
    }
    if let Some(&(n, t)) = points.iter().find(|(n, t)| !(*t > 0.0) || !(*n > 0.0)) {
        return Err(Error::Data(format!("non-positive point ({n}, {t}) in scaling fit")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - alpha * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(ScalingFit {
        mechanism: None,
        points: points.to_vec(),
        alpha,
        intercept,
        r2,
    })
}

/// Times one mechanism over `sizes` and fits its exponent.
pub fn scaling_sweep(
    mechanism: Mechanism,
    sizes: &[usize],
    d: usize,
    m: usize,
    heads: usize,
    repeats: usize,
    seed: u64,
) -> Result<(Vec<BenchRecord>, ScalingFit)> {
    let mut records = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let cfg = AttentionConfig::new(mechanism, n, d, heads, m.min(n), seed)?;
        records.push(time_mechanism(&cfg, repeats)?);
    }
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n as f64, r.median_secs)).collect();
    let mut fit = fit_scaling_exponent(&points)?;
    fit.mechanism = Some(mechanism);
    Ok((records, fit))
}

pub const CSV_HEADER: &str = "mechanism,N,d,m,heads,median_ms,flops,peak_floats";

pub fn format_csv(records: &[BenchRecord], fits: &[ScalingFit]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{}",
            r.mechanism,
            r.n,
            r.d,
            r.m,
            r.heads,
            r.median_secs * 1e3,
            r.flops,
            r.peak_floats
        );
    }
    if !fits.is_empty() {
        out.push_str("# mechanism,alpha,r2\n");
        for f in fits {
            let name = f.mechanism.map_or("-", Mechanism::name);
            let _ = writeln!(out, "# {name},{:.6},{:.6}", f.alpha, f.r2);
        }
    }
    out
}

pub fn format_table(records: &[BenchRecord], fits: &[ScalingFit]) -> String {
    let mut out = format!(
        "{:<10} {:>6} {:>4} {:>5} {:>5} {:>12} {:>14} {:>12}\n",
        "mechanism", "N", "d", "m", "heads", "median_ms", "flops", "peak_floats"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>4} {:>5} {:>5} {:>12.3} {:>14} {:>12}",
            r.mechanism.name(),
            r.n,
            r.d,
            r.m,
            r.heads,
            r.median_secs * 1e3,
            r.flops,
            r.peak_floats
        );
    }
    if !fits.is_empty() {
        let _ = writeln!(out, "\n{:<10} {:>8} {:>8}", "mechanism", "alpha", "r2");
        for f in fits {
            let name = f.mechanism.map_or("-", Mechanism::name);
            let _ = writeln!(out, "{:<10} {:>8.3} {:>8.4}", name, f.alpha, f.r2);
        }
    }
    out
}

/// Writes the CSV to `path` and prints the aligned table to stdout.
pub fn emit_report(records: &[BenchRecord], fits: &[ScalingFit], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no benchmark records to report".into()));
    }
    fs::write(path, format_csv(records, fits))?;
    print!("{}", format_table(records, fits));
    Ok(())
}
