//! Run configuration as `key = value` lines with dotted section prefixes.
//! Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::spot::{SeedSimilarity, SpotMatrix};
use crate::synth::PatternParams;
use crate::train::{derive_seed, warp_dataset, Sample, TrainConfig};

/// Synthetic training data.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub pattern: PatternParams,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_pairs: 500,
            heldout_pairs: 50,
            size: 128,
            scale_min: 1.0,
            scale_max: 2.5,
            pattern: PatternParams::default(),
            seed: 1,
        }
    }
}

impl DataConfig {
    /// Training and held-out warp pairs; the held-out set uses a derived
    /// seed so the two never share a pair.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let scales = (self.scale_min, self.scale_max);
        let train = warp_dataset(self.train_pairs, self.size, scales, &self.pattern, self.seed)?;
        let heldout = warp_dataset(self.heldout_pairs, self.size, scales, &self.pattern, derive_seed(self.seed, u64::MAX))?;
        Ok((train, heldout))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_auto(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn auto(v: Option<f64>) -> String {
    v.map_or("auto".to_string(), |t| t.to_string())
}

impl RunConfig {
    /// Applies one key. Values keep the formats written by [`RunConfig::to_text`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "pyramid.channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                m.pyramid.channels =
                    parts.try_into().map_err(|_| Error::Config(format!("{key}: expected five comma-separated values")))?;
            }
            "pyramid.color" => m.pyramid.color = parse_bool(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.layer_norm" => m.layer_norm = parse_bool(key, v)?,
            "model.train_size" => {
                let (w, h) = v.split_once('x').ok_or_else(|| Error::Config(format!("{key}: expected WxH")))?;
                m.train_size = (parse(key, w.trim())?, parse(key, h.trim())?);
            }
            "aggregation.blocks" => m.aggregation.blocks = parse(key, v)?,
            "aggregation.sequential" => m.aggregation.sequential = parse_bool(key, v)?,
            "spot.window" => m.aggregation.spot.window = parse(key, v)?,
            "spot.seeds" => m.aggregation.spot.seeds = parse(key, v)?,
            "spot.temperature" => m.aggregation.spot.temperature = parse_auto(key, v)?,
            "spot.matrix" => {
                m.aggregation.spot.matrix = match v {
                    "dual" => SpotMatrix::Dual,
                    "row" => SpotMatrix::Row,
                    _ => return Err(Error::Config(format!("{key}: expected dual or row"))),
                }
            }
            "spot.similarity" => {
                m.aggregation.spot.similarity = match v {
                    "same" => SeedSimilarity::SameImage,
                    "cross" => SeedSimilarity::CrossImage,
                    _ => return Err(Error::Config(format!("{key}: expected same or cross"))),
                }
            }
            "coarse.temperature" => m.temperature = parse_auto(key, v)?,
            "coarse.threshold" => m.threshold = parse(key, v)?,
            "fine.window" => m.fine_window = parse(key, v)?,
            "fine.heads" => m.fine_heads = parse(key, v)?,
            "fine.adaptive" => m.adaptive = parse_bool(key, v)?,
            "ransac.iterations" => m.ransac.iterations = parse(key, v)?,
            "ransac.threshold" => m.ransac.threshold = parse(key, v)?,
            "ransac.seed" => m.ransac.seed = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.coarse_ratio" => t.coarse_ratio = parse(key, v)?,
            "train.fine_ratio" => t.fine_ratio = parse(key, v)?,
            "train.fine_budget" => t.fine_budget = parse(key, v)?,
            "train.decay_every" => t.decay_every = parse(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.epsilon" => t.epsilon = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "data.train_pairs" => d.train_pairs = parse(key, v)?,
            "data.heldout_pairs" => d.heldout_pairs = parse(key, v)?,
            "data.size" => d.size = parse(key, v)?,
            "data.scale_min" => d.scale_min = parse(key, v)?,
            "data.scale_max" => d.scale_max = parse(key, v)?,
            "data.pattern_period" => d.pattern.period = parse(key, v)?,
            "data.pattern_octaves" => d.pattern.octaves = parse(key, v)?,
            "data.pattern_persistence" => d.pattern.persistence = parse(key, v)?,
            "data.pattern_contrast" => d.pattern.contrast = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.size < 32 || !d.size.is_multiple_of(32) {
            return Err(Error::Config(format!("data.size {} must be a positive multiple of 32", d.size)));
        }
        if !(1.0 / 3.0 <= d.scale_min && d.scale_min <= d.scale_max && d.scale_max <= 3.0) {
            return Err(Error::Config("data scales must satisfy 1/3 <= min <= max <= 3".into()));
        }
        Ok(())
    }

    /// Canonical text of the model section; its digest identifies
    /// checkpoints.
    pub fn model_text(model: &ModelConfig) -> String {
        let m = model;
        let c = m.pyramid.channels;
        let s = &m.aggregation.spot;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("pyramid.channels", format!("{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4]));
        kv("pyramid.color", m.pyramid.color.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.layer_norm", m.layer_norm.to_string());
        kv("model.train_size", format!("{}x{}", m.train_size.0, m.train_size.1));
        kv("aggregation.blocks", m.aggregation.blocks.to_string());
        kv("aggregation.sequential", m.aggregation.sequential.to_string());
        kv("spot.window", s.window.to_string());
        kv("spot.seeds", s.seeds.to_string());
        kv("spot.temperature", auto(s.temperature));
        kv("spot.matrix", if s.matrix == SpotMatrix::Dual { "dual" } else { "row" }.to_string());
        kv("spot.similarity", if s.similarity == SeedSimilarity::SameImage { "same" } else { "cross" }.to_string());
        kv("coarse.temperature", auto(m.temperature));
        kv("coarse.threshold", m.threshold.to_string());
        kv("fine.window", m.fine_window.to_string());
        kv("fine.heads", m.fine_heads.to_string());
        kv("fine.adaptive", m.adaptive.to_string());
        kv("ransac.iterations", m.ransac.iterations.to_string());
        kv("ransac.threshold", m.ransac.threshold.to_string());
        kv("ransac.seed", m.ransac.seed.to_string());
        out
    }

    /// Every key, in a form [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = Self::model_text(&self.model);
        let t = &self.train;
        let d = &self.data;
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.coarse_ratio", t.coarse_ratio.to_string());
        kv("train.fine_ratio", t.fine_ratio.to_string());
        kv("train.fine_budget", t.fine_budget.to_string());
        kv("train.decay_every", t.decay_every.to_string());
        kv("train.decay_factor", t.decay_factor.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.epsilon", t.epsilon.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.seed", t.seed.to_string());
        kv("data.train_pairs", d.train_pairs.to_string());
        kv("data.heldout_pairs", d.heldout_pairs.to_string());
        kv("data.size", d.size.to_string());
        kv("data.scale_min", d.scale_min.to_string());
        kv("data.scale_max", d.scale_max.to_string());
        kv("data.pattern_period", d.pattern.period.to_string());
        kv("data.pattern_octaves", d.pattern.octaves.to_string());
        kv("data.pattern_persistence", d.pattern.persistence.to_string());
        kv("data.pattern_contrast", d.pattern.contrast.to_string());
        kv("data.seed", d.seed.to_string());
        out
    }
}
