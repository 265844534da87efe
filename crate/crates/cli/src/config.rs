//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use miram::attention::Mechanism;
use miram::bench::MIN_REPEATS;
use miram::miram::{MiramConfig, OptimConfig};

use crate::CliError;

/// Conversion between a field and its textual form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, u16, f64, String);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(format!("expected a boolean, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Mechanism {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

/// Comma-separated list.
impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        /// Every setting a subcommand reads. Unknown keys are rejected.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value).map_err(|msg| {
                            CliError::Usage(format!("invalid value `{value}` for `{key}`: {msg}"))
                        })?;
                    })*
                    _ => return Err(CliError::Usage(format!("unknown configuration key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render()),)*]
            }
        }
    };
}

run_config! {
    /// Base-resolution image side; inputs are `img_size · k` pixels.
    img_size: usize = 32;
    patch: usize = 4;
    embed_dim: usize = 64;
    depth: usize = 4;
    heads: usize = 4;
    dec_dim: usize = 32;
    dec_depth: usize = 2;
    dec_heads: usize = 4;
    /// Attention used by the high-resolution decoder.
    mechanism: Mechanism = Mechanism::Nystrom;
    /// Mechanism size; 0 picks a quarter of the high-resolution token count.
    m: usize = 0;
    mask_ratio: f64 = 0.75;
    k: usize = 2;
    normalize: bool = true;
    /// false drops the high-resolution decoder.
    dual: bool = true;
    lr: f64 = 1.5e-3;
    weight_decay: f64 = 0.05;
    warmup: usize = 20;
    steps: usize = 200;
    batch: usize = 8;
    seed: u64 = 0;
    /// Synthetic images generated when `data_dir` is empty.
    n_images: usize = 256;
    /// Directory of PGM inputs; empty means synthetic data.
    data_dir: String = String::new();
    /// Checkpoint to start from; empty means `<out>/pretrain.mirm`.
    checkpoint: String = String::new();
    n_blobs: usize = 2;
    spicules: usize = 3;
    noise_amp: f64 = 0.1;
    ft_steps: usize = 300;
    ft_lr: f64 = 2e-3;
    ft_warmup: usize = 10;
    ft_batch: usize = 16;
    /// Held-out synthetic images scored after fine-tuning.
    eval_images: usize = 128;
    pgm_maxval: u16 = 255;
    bench_sizes: Vec<usize> = vec![128, 256, 512, 1024];
    bench_d: usize = 64;
    bench_m: usize = 32;
    bench_heads: usize = 4;
    repeats: usize = 5;
    /// Time all four mechanisms instead of standard plus `mechanism`.
    bench_all: bool = false;
    /// Steps between progress lines.
    log_every: usize = 10;
    /// Directory of PGMs to reconstruct; empty means synthetic images.
    images: String = String::new();
    recon_count: usize = 4;
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected `key = value`, got `{raw}`", no + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{kv}`")))?;
        self.set(key.trim(), value.trim())
    }

    /// Defaults, then `MIRAM_SEED`, then the config file, then `--set` pairs.
    pub fn resolve(env_seed: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(s) = env_seed {
            cfg.set("seed", s)?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let positive = [
            ("batch", self.batch),
            ("ft_batch", self.ft_batch),
            ("n_images", self.n_images),
            ("eval_images", self.eval_images),
            ("log_every", self.log_every),
            ("bench_d", self.bench_d),
            ("bench_heads", self.bench_heads),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Usage(format!("`{key}` must be positive")));
        }
        if self.repeats < MIN_REPEATS {
            return Err(CliError::Usage(format!("`repeats` must be at least {MIN_REPEATS}")));
        }
        if self.bench_sizes.is_empty() || self.bench_sizes.contains(&0) {
            return Err(CliError::Usage("`bench_sizes` needs positive lengths".into()));
        }
        if self.pgm_maxval != 255 && self.pgm_maxval != 65535 {
            return Err(CliError::Usage(format!(
                "pgm_maxval must be 255 or 65535, got {}",
                self.pgm_maxval
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> MiramConfig {
        MiramConfig {
            img_size: self.img_size,
            patch: self.patch,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            mechanism: self.mechanism,
            m: self.m,
            mask_ratio: self.mask_ratio,
            k: self.k,
            normalize: self.normalize,
            dual: self.dual,
            ..MiramConfig::default()
        }
    }

    pub fn pretrain_optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            total_steps: self.steps,
            ..OptimConfig::default()
        }
    }

    pub fn finetune_optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.ft_lr,
            weight_decay: self.weight_decay,
            warmup: self.ft_warmup,
            total_steps: self.ft_steps,
            ..OptimConfig::default()
        }
    }

    /// The resolved configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
