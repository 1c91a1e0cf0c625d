use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpcl::{MappingStrategy, ScoreCombine, ScoringConfig};
use crate::error::ModelError;
use crate::gndiff::{DiffusionConfig, SamplingMode};

/// How per-query losses are reduced over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_dpcl: usize,
    pub d_diff: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub diffusion_steps: usize,
    pub mu: f64,
    pub chains: usize,
    pub seed: u64,
    pub distance_sign: f64,
    pub mapping_strategy: MappingStrategy,
    pub no_gndiff: bool,
    pub no_dpcl: bool,
    pub score_combine: ScoreCombine,
    pub route_by_novelty: bool,
    pub sampling: SamplingMode,
    pub loss_reduction: LossReduction,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_dpcl: 200,
            d_diff: 128,
            batch: 64,
            lr: 1e-3,
            epochs_stage1: 30,
            epochs_stage2: 20,
            alpha: 0.2,
            lambda: 2.0,
            tau: 0.1,
            diffusion_steps: 50,
            mu: 0.25,
            chains: 8,
            seed: 0,
            distance_sign: 1.0,
            mapping_strategy: MappingStrategy::HypEuc,
            no_gndiff: false,
            no_dpcl: false,
            score_combine: ScoreCombine::Sum,
            route_by_novelty: false,
            sampling: SamplingMode::Stochastic,
            loss_reduction: LossReduction::Mean,
            val_every: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ModelError> {
    value.parse().map_err(|_| ModelError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ModelError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ModelError::Config(format!("invalid value `{value}` for `{key}` (expected true or false)"))),
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig { steps: self.diffusion_steps, mu: self.mu }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig { mapping: self.mapping_strategy, distance_sign: self.distance_sign }
    }

    /// Weight of the diffusion loss after applying the ablation flags.
    pub fn effective_alpha(&self) -> f64 {
        if self.no_gndiff {
            0.0
        } else if self.no_dpcl {
            1.0
        } else {
            self.alpha
        }
    }

    /// Sets one field from its textual form. Accepts `T` and `C` as
    /// shorthands for `diffusion_steps` and `chains`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let value = value.trim();
        match key.trim() {
            "d_dpcl" => self.d_dpcl = parse(key, value)?,
            "d_diff" => self.d_diff = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "diffusion_steps" | "T" => self.diffusion_steps = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "chains" | "C" => self.chains = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "distance_sign" => self.distance_sign = parse(key, value)?,
            "mapping_strategy" => self.mapping_strategy = value.parse().map_err(ModelError::Config)?,
            "no_gndiff" => self.no_gndiff = parse_bool(key, value)?,
            "no_dpcl" => self.no_dpcl = parse_bool(key, value)?,
            "score_combine" => self.score_combine = value.parse().map_err(ModelError::Config)?,
            "route_by_novelty" => self.route_by_novelty = parse_bool(key, value)?,
            "sampling" => {
                self.sampling = match value {
                    "stochastic" => SamplingMode::Stochastic,
                    "greedy" => SamplingMode::Greedy,
                    _ => return Err(ModelError::Config(format!("invalid value `{value}` for `sampling`"))),
                }
            }
            "loss_reduction" => {
                self.loss_reduction = match value {
                    "mean" => LossReduction::Mean,
                    "sum" => LossReduction::Sum,
                    _ => return Err(ModelError::Config(format!("invalid value `{value}` for `loss_reduction`"))),
                }
            }
            "val_every" => self.val_every = parse(key, value)?,
            other => return Err(ModelError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ModelError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v).map_err(|e| ModelError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every field as a `key = value` line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sampling = match self.sampling {
            SamplingMode::Stochastic => "stochastic",
            SamplingMode::Greedy => "greedy",
        };
        let combine = match self.score_combine {
            ScoreCombine::Sum => "sum",
            ScoreCombine::Max => "max",
        };
        let reduction = match self.loss_reduction {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        };
        let fields: [(&str, String); 22] = [
            ("d_dpcl", self.d_dpcl.to_string()),
            ("d_diff", self.d_diff.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs_stage1", self.epochs_stage1.to_string()),
            ("epochs_stage2", self.epochs_stage2.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("mu", self.mu.to_string()),
            ("chains", self.chains.to_string()),
            ("seed", self.seed.to_string()),
            ("distance_sign", self.distance_sign.to_string()),
            ("mapping_strategy", self.mapping_strategy.to_string()),
            ("no_gndiff", self.no_gndiff.to_string()),
            ("no_dpcl", self.no_dpcl.to_string()),
            ("score_combine", combine.to_string()),
            ("route_by_novelty", self.route_by_novelty.to_string()),
            ("sampling", sampling.to_string()),
            ("loss_reduction", reduction.to_string()),
            ("val_every", self.val_every.to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [("lambda", self.lambda), ("tau", self.tau), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("d_dpcl", self.d_dpcl), ("d_diff", self.d_diff), ("batch", self.batch), ("chains", self.chains)] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.distance_sign != 1.0 && self.distance_sign != -1.0 {
            return fail(format!("distance_sign must be 1 or -1, got {}", self.distance_sign));
        }
        if self.no_gndiff && self.no_dpcl {
            return fail("no_gndiff and no_dpcl cannot both be set".into());
        }
        self.diffusion().validate()
    }
}
