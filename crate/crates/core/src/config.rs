//! Model and training configuration.
//!
//! Defaults reproduce the reference architecture and pretraining table:
//! 64-wide embeddings, 4 layers of 8 heads, window 10, intervals of 10
//! steps, 8 areas of 32 channels, 40 epochs of AdamW (5e-4 → 1e-5 cosine,
//! weight decay 5e-2), batch 128, mask ratio 0.5, dropout 0.1.
//!
//! [`RunConfig`] flattens everything into `key = value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::{ChannelOrder, NormConfig};
use crate::numerics::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_norm: usize,
    pub areas: usize,
    pub c_norm: usize,
    /// Seeded channel shuffle before grouping; `None` keeps index order.
    pub channel_shuffle_seed: Option<u64>,
    pub d_model: usize,
    pub d_text: usize,
    pub interval: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub window: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Divide sliding-window scores by `sqrt(d_head)`.
    pub scale_scores: bool,
    pub rec_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_norm: 100,
            areas: 8,
            c_norm: 32,
            channel_shuffle_seed: None,
            d_model: 64,
            d_text: 384,
            interval: 10,
            n_layers: 4,
            n_heads: 8,
            window: 10,
            d_ff: 256,
            dropout: 0.1,
            scale_scores: true,
            rec_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn n_intervals(&self) -> usize {
        self.t_norm / self.interval
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Tokens per trial, `N·A·t`.
    pub fn tokens(&self) -> usize {
        self.t_norm * self.areas
    }

    pub fn norm(&self) -> NormConfig {
        NormConfig {
            t_norm: self.t_norm,
            areas: self.areas,
            c_norm: self.c_norm,
            order: match self.channel_shuffle_seed {
                Some(seed) => ChannelOrder::Shuffled { seed },
                None => ChannelOrder::Contiguous,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_norm", self.t_norm),
            ("areas", self.areas),
            ("c_norm", self.c_norm),
            ("d_model", self.d_model),
            ("d_text", self.d_text),
            ("interval", self.interval),
            ("n_heads", self.n_heads),
            ("window", self.window),
            ("d_ff", self.d_ff),
            ("rec_hidden", self.rec_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.t_norm % self.interval != 0 {
            return Err(Error::Partition { t_norm: self.t_norm, interval: self.interval });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// What masked positions are regressed onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Assembled tokens: spike embedding + context + positions.
    Tokens,
    /// Spike embedding only.
    Spike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub target: ReconTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            mask_ratio: 0.5,
            lr: 5e-4,
            lr_min: 1e-5,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            target: ReconTarget::Tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// Flatten the whole `[N, A, t, d]` encoder output.
    Flatten,
    /// Average over the interval axis first, then flatten `[N, A, d]`.
    MeanT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub head_hidden: usize,
    pub head_input: HeadInput,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 40,
            batch_size: 64,
            lr: 1e-4,
            lr_min: 1e-6,
            weight_decay: 5e-2,
            head_hidden: 64,
            head_input: HeadInput::Flatten,
        }
    }
}

/// Everything a CLI run needs, round-trippable through `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
    pub dtype: Precision,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
            dtype: Precision::F64,
            threads: 1,
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl RunConfig {
    /// Ordered `(key, value)` pairs covering every knob.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let (m, t, f) = (&self.model, &self.train, &self.finetune);
        vec![
            ("seed", self.seed.to_string()),
            ("dtype", self.dtype.as_str().to_string()),
            ("threads", self.threads.to_string()),
            ("t_norm", m.t_norm.to_string()),
            ("areas", m.areas.to_string()),
            ("c_norm", m.c_norm.to_string()),
            ("channel_shuffle_seed", opt_to_string(&m.channel_shuffle_seed)),
            ("d_model", m.d_model.to_string()),
            ("d_text", m.d_text.to_string()),
            ("interval", m.interval.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("window", m.window.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("dropout", m.dropout.to_string()),
            ("scale_scores", m.scale_scores.to_string()),
            ("rec_hidden", m.rec_hidden.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("mask_ratio", t.mask_ratio.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("grad_clip", opt_to_string(&t.grad_clip)),
            (
                "target",
                match t.target {
                    ReconTarget::Tokens => "tokens",
                    ReconTarget::Spike => "spike",
                }
                .to_string(),
            ),
            ("ft_epochs", f.epochs.to_string()),
            ("ft_batch_size", f.batch_size.to_string()),
            ("ft_lr", f.lr.to_string()),
            ("ft_lr_min", f.lr_min.to_string()),
            ("ft_weight_decay", f.weight_decay.to_string()),
            ("head_hidden", f.head_hidden.to_string()),
            (
                "head_input",
                match f.head_input {
                    HeadInput::Flatten => "flatten",
                    HeadInput::MeanT => "mean_t",
                }
                .to_string(),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, f) = (&mut self.model, &mut self.train, &mut self.finetune);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dtype" => {
                self.dtype = Precision::parse(v).ok_or_else(|| Error::Config(format!("unknown dtype `{v}`")))?
            }
            "threads" => self.threads = parse(key, v)?,
            "t_norm" => m.t_norm = parse(key, v)?,
            "areas" => m.areas = parse(key, v)?,
            "c_norm" => m.c_norm = parse(key, v)?,
            "channel_shuffle_seed" => m.channel_shuffle_seed = parse_opt(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "d_text" => m.d_text = parse(key, v)?,
            "interval" => m.interval = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "window" => m.window = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "scale_scores" => m.scale_scores = parse(key, v)?,
            "rec_hidden" => m.rec_hidden = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "mask_ratio" => t.mask_ratio = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_min" => t.lr_min = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse_opt(key, v)?,
            "target" => {
                t.target = match v {
                    "tokens" => ReconTarget::Tokens,
                    "spike" => ReconTarget::Spike,
                    _ => return Err(Error::Config(format!("unknown target `{v}`"))),
                }
            }
            "ft_epochs" => f.epochs = parse(key, v)?,
            "ft_batch_size" => f.batch_size = parse(key, v)?,
            "ft_lr" => f.lr = parse(key, v)?,
            "ft_lr_min" => f.lr_min = parse(key, v)?,
            "ft_weight_decay" => f.weight_decay = parse(key, v)?,
            "head_hidden" => f.head_hidden = parse(key, v)?,
            "head_input" => {
                f.head_input = match v {
                    "flatten" => HeadInput::Flatten,
                    "mean_t" => HeadInput::MeanT,
                    _ => return Err(Error::Config(format!("unknown head_input `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", t.mask_ratio)));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.grad_clip = Some(1.5);
        cfg.model.channel_shuffle_seed = Some(7);
        cfg.dtype = Precision::F32;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::from_text("lr").is_err());
    }

    #[test]
    fn defaults_match_reference_table() {
        let c = RunConfig::default();
        assert_eq!((c.model.d_model, c.model.n_layers, c.model.n_heads, c.model.window), (64, 4, 8, 10));
        assert_eq!((c.model.interval, c.model.c_norm, c.model.areas), (10, 32, 8));
        assert_eq!((c.train.epochs, c.train.batch_size), (40, 128));
        assert_eq!((c.train.mask_ratio, c.model.dropout), (0.5, 0.1));
        assert_eq!((c.train.lr, c.train.weight_decay, c.train.lr_min), (5e-4, 5e-2, 1e-5));
        assert_eq!((c.finetune.lr, c.finetune.batch_size), (1e-4, 64));
    }
}
