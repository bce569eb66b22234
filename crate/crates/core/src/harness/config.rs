//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gsahf::EpsilonMode;
use crate::losses::LossWeights;
use crate::moe::SdMoeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Dims {
    pub channels: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub search_size: usize,
    pub template_size: usize,
}

impl Dims {
    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn template_tokens(&self) -> usize {
        let g = self.template_size / self.patch;
        g * g
    }

    pub fn tokens_per_modality(&self) -> usize {
        self.search_tokens() + self.template_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Which new modules are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub sdmoe: bool,
    pub mff: bool,
    pub gsahf_gram: bool,
    pub gsahf_mhg: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        sdmoe: true,
        mff: true,
        gsahf_gram: true,
        gsahf_mhg: true,
    };
    pub const NONE: Toggles = Toggles {
        sdmoe: false,
        mff: false,
        gsahf_gram: false,
        gsahf_mhg: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsahfConfig {
    pub epsilon: EpsilonMode,
    /// 1-based block indices whose outputs feed multi-level fusion.
    pub level_taps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: Dims,
    /// Adapter sizes; `model_dim` mirrors `dims.model_dim`.
    pub moe: SdMoeConfig,
    pub gsahf: GsahfConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub toggles: Toggles,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = Dims {
            channels: 1,
            patch: 4,
            model_dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            head_hidden: 32,
            search_size: 32,
            template_size: 16,
        };
        Self {
            seed: 0,
            moe: SdMoeConfig::with_dim(dims.model_dim),
            gsahf: GsahfConfig {
                epsilon: EpsilonMode::Auto,
                level_taps: vec![1, 2, 3, 4],
            },
            dims,
            loss: LossWeights::default(),
            optim: OptimConfig {
                lr: 1e-2,
                steps: 200,
                log_every: 10,
            },
            toggles: Toggles::ALL,
            data: DataConfig {
                train_size: 32,
                test_size: 32,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let positive = [
            ("channels", d.channels),
            ("patch", d.patch),
            ("model_dim", d.model_dim),
            ("depth", d.depth),
            ("heads", d.heads),
            ("mlp_ratio", d.mlp_ratio),
            ("head_hidden", d.head_hidden),
            ("search_size", d.search_size),
            ("template_size", d.template_size),
            ("steps", self.optim.steps),
            ("log_every", self.optim.log_every),
            ("train_size", self.data.train_size),
            ("test_size", self.data.test_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !d.search_size.is_multiple_of(d.patch) || !d.template_size.is_multiple_of(d.patch) {
            return Err(Error::Config(format!(
                "frame sizes {}/{} must be divisible by patch {}",
                d.search_size, d.template_size, d.patch
            )));
        }
        if !d.model_dim.is_multiple_of(d.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                d.model_dim, d.heads
            )));
        }
        if self.moe.model_dim != d.model_dim {
            return Err(Error::Config(
                "adapter model_dim differs from backbone model_dim".into(),
            ));
        }
        self.moe.validate()?;
        self.loss.validate()?;
        if self.optim.lr <= 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optim.lr)));
        }
        if let EpsilonMode::Fixed(e) = self.gsahf.epsilon {
            if e <= 0.0 || !e.is_finite() {
                return Err(Error::Config(format!("epsilon must be positive, got {e}")));
            }
        }
        if self.gsahf.level_taps.is_empty() || self.gsahf.level_taps.iter().any(|&t| t == 0 || t > d.depth) {
            return Err(Error::Config(format!(
                "level_taps {:?} must name blocks in 1..={}",
                self.gsahf.level_taps, d.depth
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "channels" => self.dims.channels = parse(key, v)?,
            "patch" => self.dims.patch = parse(key, v)?,
            "model_dim" => {
                self.dims.model_dim = parse(key, v)?;
                self.moe.model_dim = self.dims.model_dim;
            }
            "depth" => self.dims.depth = parse(key, v)?,
            "heads" => self.dims.heads = parse(key, v)?,
            "mlp_ratio" => self.dims.mlp_ratio = parse(key, v)?,
            "head_hidden" => self.dims.head_hidden = parse(key, v)?,
            "search_size" => self.dims.search_size = parse(key, v)?,
            "template_size" => self.dims.template_size = parse(key, v)?,
            "n_experts" => self.moe.n_experts = parse(key, v)?,
            "top_k" => self.moe.top_k = parse(key, v)?,
            "reduction_g" => self.moe.reduction = parse(key, v)?,
            "shared_m" => self.moe.n_shared = parse(key, v)?,
            "epsilon_mode" => {
                self.gsahf.epsilon = match v {
                    "auto" => EpsilonMode::Auto,
                    "fixed" => match self.gsahf.epsilon {
                        EpsilonMode::Fixed(e) => EpsilonMode::Fixed(e),
                        EpsilonMode::Auto => EpsilonMode::Fixed(1.0),
                    },
                    _ => return Err(Error::Config(format!("epsilon_mode must be auto|fixed, got `{v}`"))),
                }
            }
            "epsilon_value" => self.gsahf.epsilon = EpsilonMode::Fixed(parse(key, v)?),
            "level_taps" => {
                self.gsahf.level_taps = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
            }
            "lambda_iou" => self.loss.lambda_iou = parse(key, v)?,
            "lambda_l1" => self.loss.lambda_l1 = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "steps" => self.optim.steps = parse(key, v)?,
            "log_every" => self.optim.log_every = parse(key, v)?,
            "train_size" => self.data.train_size = parse(key, v)?,
            "test_size" => self.data.test_size = parse(key, v)?,
            "toggle_sdmoe" => self.toggles.sdmoe = parse_bool(key, v)?,
            "toggle_mff" => self.toggles.mff = parse_bool(key, v)?,
            "toggle_gram" => self.toggles.gsahf_gram = parse_bool(key, v)?,
            "toggle_mhg" => self.toggles.gsahf_mhg = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("channels", d.channels.to_string());
        kv("patch", d.patch.to_string());
        kv("model_dim", d.model_dim.to_string());
        kv("depth", d.depth.to_string());
        kv("heads", d.heads.to_string());
        kv("mlp_ratio", d.mlp_ratio.to_string());
        kv("head_hidden", d.head_hidden.to_string());
        kv("search_size", d.search_size.to_string());
        kv("template_size", d.template_size.to_string());
        kv("n_experts", self.moe.n_experts.to_string());
        kv("top_k", self.moe.top_k.to_string());
        kv("reduction_g", self.moe.reduction.to_string());
        kv("shared_m", self.moe.n_shared.to_string());
        match self.gsahf.epsilon {
            EpsilonMode::Auto => kv("epsilon_mode", "auto".into()),
            EpsilonMode::Fixed(e) => {
                kv("epsilon_mode", "fixed".into());
                kv("epsilon_value", e.to_string());
            }
        }
        let taps: Vec<String> = self.gsahf.level_taps.iter().map(usize::to_string).collect();
        kv("level_taps", taps.join(","));
        kv("lambda_iou", self.loss.lambda_iou.to_string());
        kv("lambda_l1", self.loss.lambda_l1.to_string());
        kv("alpha", self.loss.alpha.to_string());
        kv("lr", self.optim.lr.to_string());
        kv("steps", self.optim.steps.to_string());
        kv("log_every", self.optim.log_every.to_string());
        kv("train_size", self.data.train_size.to_string());
        kv("test_size", self.data.test_size.to_string());
        kv("toggle_sdmoe", self.toggles.sdmoe.to_string());
        kv("toggle_mff", self.toggles.mff.to_string());
        kv("toggle_gram", self.toggles.gsahf_gram.to_string());
        kv("toggle_mhg", self.toggles.gsahf_mhg.to_string());
        s
    }
}
