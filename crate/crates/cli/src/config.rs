//! Experiment configuration: a flat `key = value` text file, with any key
//! overridable from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use xclass_core::fccs::{FccsSchedule, ScheduleUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxMode {
    Full,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Warm-up, then continuous batch growth.
    Fccs,
    /// Warm-up, then the rate is multiplied by `decay_factor` at each of
    /// `decay_epochs`; the batch size stays at `batch`.
    Piecewise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Lars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // data: synthetic spec, or existing files
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub data_seed: u64,
    // model
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub model_seed: u64,
    pub logit_scale: f32,
    // softmax
    pub mode: SoftmaxMode,
    pub knn_k: usize,
    pub knn_kprime: usize,
    pub active_fraction: f64,
    pub rebuild_every: usize,
    pub selection_seed: u64,
    // sparsification of extractor gradients (0 disables)
    pub sparsity: f64,
    pub sparsity_momentum: f32,
    pub sparsity_warmup_epochs: usize,
    pub sparsity_warmup_start: f64,
    // optimizer
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lars_trust: f32,
    // schedule
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub batch: usize,
    pub fccs_t_ini: f64,
    pub fccs_t_final: f64,
    pub fccs_b_min: usize,
    pub fccs_b_max: usize,
    pub fccs_increasing: bool,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    // topology
    pub workers: usize,
    pub micro_batches: usize,
    pub accumulation: usize,
    pub shuffle_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            test_data: None,
            classes: 1000,
            train_per_class: 50,
            test_per_class: 10,
            dim: 64,
            spread: 0.3,
            data_seed: 7,
            hidden: vec![256],
            embed_dim: 64,
            model_seed: 11,
            logit_scale: 30.0,
            mode: SoftmaxMode::Full,
            knn_k: 12,
            knn_kprime: 24,
            active_fraction: 0.1,
            rebuild_every: 1,
            selection_seed: 13,
            sparsity: 0.0,
            sparsity_momentum: 0.9,
            sparsity_warmup_epochs: 0,
            sparsity_warmup_start: 0.75,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            lars_trust: 0.001,
            schedule: ScheduleKind::Piecewise,
            epochs: 10,
            lr: 0.1,
            warmup_epochs: 1.0,
            batch: 64,
            fccs_t_ini: 1.0,
            fccs_t_final: 8.0,
            fccs_b_min: 64,
            fccs_b_max: 4096,
            fccs_increasing: true,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            workers: 1,
            micro_batches: 1,
            accumulation: 1,
            shuffle_seed: 17,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{value}`: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl ExperimentConfig {
    /// Sets one key. Dashes in `key` are read as underscores so command-line
    /// spellings work too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "train_data" => self.train_data = opt_path(v),
            "test_data" => self.test_data = opt_path(v),
            "classes" => self.classes = parse(k, v)?,
            "train_per_class" => self.train_per_class = parse(k, v)?,
            "test_per_class" => self.test_per_class = parse(k, v)?,
            "dim" => self.dim = parse(k, v)?,
            "spread" => self.spread = parse(k, v)?,
            "data_seed" => self.data_seed = parse(k, v)?,
            "hidden" => self.hidden = parse_list(k, v)?,
            "embed_dim" => self.embed_dim = parse(k, v)?,
            "model_seed" => self.model_seed = parse(k, v)?,
            "logit_scale" => self.logit_scale = parse(k, v)?,
            "mode" => {
                self.mode = match v {
                    "full" => SoftmaxMode::Full,
                    "knn" => SoftmaxMode::Knn,
                    _ => bail!("config key `mode`: expected `full` or `knn`, got `{v}`"),
                }
            }
            "knn_k" => self.knn_k = parse(k, v)?,
            "knn_kprime" => self.knn_kprime = parse(k, v)?,
            "active_fraction" => self.active_fraction = parse(k, v)?,
            "rebuild_every" => self.rebuild_every = parse(k, v)?,
            "selection_seed" => self.selection_seed = parse(k, v)?,
            "sparsity" => self.sparsity = parse(k, v)?,
            "sparsity_momentum" => self.sparsity_momentum = parse(k, v)?,
            "sparsity_warmup_epochs" => self.sparsity_warmup_epochs = parse(k, v)?,
            "sparsity_warmup_start" => self.sparsity_warmup_start = parse(k, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "lars" => OptimizerKind::Lars,
                    _ => bail!("config key `optimizer`: expected `sgd` or `lars`, got `{v}`"),
                }
            }
            "momentum" => self.momentum = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "lars_trust" => self.lars_trust = parse(k, v)?,
            "schedule" => {
                self.schedule = match v {
                    "fccs" => ScheduleKind::Fccs,
                    "piecewise" => ScheduleKind::Piecewise,
                    _ => bail!("config key `schedule`: expected `fccs` or `piecewise`, got `{v}`"),
                }
            }
            "epochs" => self.epochs = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(k, v)?,
            "batch" => self.batch = parse(k, v)?,
            "fccs_t_ini" => self.fccs_t_ini = parse(k, v)?,
            "fccs_t_final" => self.fccs_t_final = parse(k, v)?,
            "fccs_b_min" => self.fccs_b_min = parse(k, v)?,
            "fccs_b_max" => self.fccs_b_max = parse(k, v)?,
            "fccs_variant" => {
                self.fccs_increasing = match v {
                    "increasing" => true,
                    "literal" => false,
                    _ => bail!("config key `fccs_variant`: expected `increasing` or `literal`, got `{v}`"),
                }
            }
            "decay_epochs" => self.decay_epochs = parse_list(k, v)?,
            "decay_factor" => self.decay_factor = parse(k, v)?,
            "workers" => self.workers = parse(k, v)?,
            "micro_batches" => self.micro_batches = parse(k, v)?,
            "accumulation" => self.accumulation = parse(k, v)?,
            "shuffle_seed" => self.shuffle_seed = parse(k, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => bail!("unknown config key `{k}`"),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`, got `{line}`", n + 1))?;
            self.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut c = Self::default();
        c.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(c)
    }

    /// Every key in canonical `key=value` form; parses back to `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("train_data", path(&self.train_data));
        kv("test_data", path(&self.test_data));
        kv("classes", self.classes.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("dim", self.dim.to_string());
        kv("spread", self.spread.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("hidden", join(&self.hidden));
        kv("embed_dim", self.embed_dim.to_string());
        kv("model_seed", self.model_seed.to_string());
        kv("logit_scale", self.logit_scale.to_string());
        kv("mode", if self.mode == SoftmaxMode::Knn { "knn" } else { "full" }.into());
        kv("knn_k", self.knn_k.to_string());
        kv("knn_kprime", self.knn_kprime.to_string());
        kv("active_fraction", self.active_fraction.to_string());
        kv("rebuild_every", self.rebuild_every.to_string());
        kv("selection_seed", self.selection_seed.to_string());
        kv("sparsity", self.sparsity.to_string());
        kv("sparsity_momentum", self.sparsity_momentum.to_string());
        kv("sparsity_warmup_epochs", self.sparsity_warmup_epochs.to_string());
        kv("sparsity_warmup_start", self.sparsity_warmup_start.to_string());
        kv("optimizer", if self.optimizer == OptimizerKind::Lars { "lars" } else { "sgd" }.into());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lars_trust", self.lars_trust.to_string());
        kv("schedule", if self.schedule == ScheduleKind::Fccs { "fccs" } else { "piecewise" }.into());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("fccs_t_ini", self.fccs_t_ini.to_string());
        kv("fccs_t_final", self.fccs_t_final.to_string());
        kv("fccs_b_min", self.fccs_b_min.to_string());
        kv("fccs_b_max", self.fccs_b_max.to_string());
        kv("fccs_variant", if self.fccs_increasing { "increasing" } else { "literal" }.into());
        kv("decay_epochs", join(&self.decay_epochs));
        kv("decay_factor", self.decay_factor.to_string());
        kv("workers", self.workers.to_string());
        kv("micro_batches", self.micro_batches.to_string());
        kv("accumulation", self.accumulation.to_string());
        kv("shuffle_seed", self.shuffle_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("embed_dim", self.embed_dim),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("workers", self.workers),
            ("micro_batches", self.micro_batches),
            ("accumulation", self.accumulation),
            ("rebuild_every", self.rebuild_every),
        ];
        for (k, v) in positive {
            ensure!(v > 0, "config key `{k}` must be positive");
        }
        if self.train_data.is_none() {
            ensure!(
                self.dim > 0 && self.train_per_class > 0,
                "synthetic data needs positive `dim` and `train_per_class`"
            );
        }
        ensure!(self.hidden.iter().all(|&h| h > 0), "hidden layer sizes must be positive");
        ensure!(
            self.active_fraction > 0.0 && self.active_fraction <= 1.0,
            "`active_fraction` must lie in (0, 1], got {}",
            self.active_fraction
        );
        if self.mode == SoftmaxMode::Knn {
            ensure!(
                self.knn_k > 0 && self.knn_k <= self.classes,
                "`knn_k` must lie in 1..={}",
                self.classes
            );
            ensure!(self.knn_kprime >= self.knn_k, "`knn_kprime` must be at least `knn_k`");
        }
        ensure!(
            (0.0..1.0).contains(&self.sparsity),
            "`sparsity` must lie in [0, 1), got {}",
            self.sparsity
        );
        ensure!(self.lr > 0.0, "`lr` must be positive");
        ensure!(self.workers <= self.classes, "more workers than classes leaves a shard empty");
        if self.schedule == ScheduleKind::Fccs {
            self.fccs()?.validate()?;
        }
        Ok(())
    }

    pub fn fccs(&self) -> Result<FccsSchedule> {
        Ok(FccsSchedule {
            eta0: self.lr,
            t_warm: self.warmup_epochs,
            b0: self.batch,
            t_ini: self.fccs_t_ini,
            t_final: self.fccs_t_final,
            b_min1: self.fccs_b_min,
            b_max1: self.fccs_b_max,
            increasing_variant: self.fccs_increasing,
            unit: ScheduleUnit::Epoch,
        })
    }

    /// Layer sizes of the extractor for input width `input_dim`.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(self.embed_dim);
        s
    }

    /// FNV-1a over the keys that shape the model, stored in checkpoints.
    pub fn model_hash(&self, input_dim: usize) -> u64 {
        let text = format!(
            "sizes={}\nclasses={}\nactivation=tanh\n",
            join(&self.layer_sizes(input_dim)),
            self.classes
        );
        fnv1a(text.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("mode", "knn").unwrap();
        c.set("decay-epochs", "10, 15").unwrap();
        c.set("hidden", "128,64").unwrap();
        c.set("train_data", "a/b.xds").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# benchmark\n\nclasses = 20  # small\nepochs=3\n").unwrap();
        assert_eq!((c.classes, c.epochs), (20, 3));
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = ExperimentConfig::default();
        let e = c.set("batch", "many").unwrap_err().to_string();
        assert!(e.contains("batch"), "{e}");
        let e = c.set("colour", "blue").unwrap_err().to_string();
        assert!(e.contains("unknown config key `colour`"), "{e}");
        let e = c.apply_text("epochs 3").unwrap_err();
        assert!(format!("{e:#}").contains("line 1"));
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.active_fraction = 0.0;
        assert!(c.validate().is_err());
        c.active_fraction = 1.0;
        c.mode = SoftmaxMode::Knn;
        c.knn_kprime = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
