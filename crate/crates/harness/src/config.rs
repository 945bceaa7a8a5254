//! Experiment configuration and its flat `key=value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not listed in
//! [`ExperimentConfig::KEYS`] are rejected. `task` picks the default set
//! the remaining keys are applied to, wherever it appears in the file.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use latentdr::attention::NormPlacement;
use latentdr::datagen::{DomainSpec, GeometryConfig, LongTailConfig, MultiDomainConfig};
use latentdr::latentdr::{AblationVariant, DegradationKind, LossOptions, OperatorConfig, TrainConfig};
use latentdr::model::ModelConfig;
use latentdr::SgdConfig;
use serde::{Deserialize, Serialize};
use serde_with::{serde_as, DisplayFromStr};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Leave-one-domain-out generalisation.
    #[serde(rename = "dg")]
    Dg,
    /// Single-domain imbalanced recognition.
    #[serde(rename = "longtail")]
    LongTail,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Dg => "dg",
            Task::LongTail => "longtail",
        })
    }
}

impl FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dg" => Ok(Task::Dg),
            "longtail" | "lt" => Ok(Task::LongTail),
            other => Err(HarnessError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[serde_as]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,

    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub input_dim: usize,
    pub held_out: usize,
    pub train_fraction: f64,
    /// Domain `d` is rotated by `d·domain_angle_step`.
    pub domain_angle_step: f64,
    /// Norm of each domain's random translation.
    pub domain_shift: f64,
    pub domain_noise: f64,
    /// Replaces the held-out domain's rotation angle.
    pub heldout_rotation: Option<f64>,
    pub prototype_radius: f64,
    pub min_separation: f64,
    pub jitter_std: f64,
    pub imbalance_ratio: f64,
    pub head_count: usize,
    pub test_per_class: usize,

    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub share_classifier: bool,
    #[serde_as(as = "DisplayFromStr")]
    pub kind: DegradationKind,
    #[serde_as(as = "DisplayFromStr")]
    pub norm: NormPlacement,
    pub heads: usize,
    pub d_head: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub subset_fraction: f64,
    pub noise_scale: f64,
    pub mixer_on_raw_input: bool,

    #[serde_as(as = "DisplayFromStr")]
    pub variant: AblationVariant,
    /// Samples per training domain in each step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_adjust: f64,
    pub stop_grad_into_encoder_for_l2: bool,
    /// Chunk size for degraded/restored evaluation; defaults to the training
    /// batch (per-domain size times training domains).
    pub eval_batch: Option<usize>,
    pub dump_latents: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::dg()
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "seed",
        "classes",
        "domains",
        "per_cell",
        "input_dim",
        "held_out",
        "train_fraction",
        "domain_angle_step",
        "domain_shift",
        "domain_noise",
        "heldout_rotation",
        "prototype_radius",
        "min_separation",
        "jitter_std",
        "imbalance_ratio",
        "head_count",
        "test_per_class",
        "hidden",
        "latent_dim",
        "share_classifier",
        "kind",
        "norm",
        "heads",
        "d_head",
        "d_ff",
        "dropout",
        "subset_fraction",
        "noise_scale",
        "mixer_on_raw_input",
        "variant",
        "batch_size",
        "epochs",
        "lr",
        "momentum",
        "weight_decay",
        "lr_adjust",
        "stop_grad_into_encoder_for_l2",
        "eval_batch",
        "dump_latents",
    ];

    /// Seven classes over four rotated domains, post-norm operators.
    pub fn dg() -> Self {
        Self {
            task: Task::Dg,
            seed: 0,
            classes: 7,
            domains: 4,
            per_cell: 60,
            input_dim: 32,
            held_out: 0,
            train_fraction: 0.8,
            domain_angle_step: PI / 8.0,
            domain_shift: 1.0,
            domain_noise: 0.3,
            heldout_rotation: None,
            prototype_radius: 3.0,
            min_separation: PI / 6.0,
            jitter_std: 1.0,
            imbalance_ratio: 100.0,
            head_count: 500,
            test_per_class: 50,
            hidden: vec![256, 128],
            latent_dim: 64,
            share_classifier: true,
            kind: DegradationKind::SelfAttention,
            norm: NormPlacement::PostLn,
            heads: 4,
            d_head: None,
            d_ff: None,
            dropout: 0.5,
            subset_fraction: 0.5,
            noise_scale: 1.0,
            mixer_on_raw_input: false,
            variant: AblationVariant::DPlusR,
            batch_size: 32,
            epochs: 40,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_adjust: 0.5,
            stop_grad_into_encoder_for_l2: false,
            eval_batch: None,
            dump_latents: false,
        }
    }

    /// Ten classes, imbalance ratio 100, pre-norm operators.
    pub fn longtail() -> Self {
        Self {
            task: Task::LongTail,
            classes: 10,
            domains: 1,
            norm: NormPlacement::PreLn,
            batch_size: 64,
            ..Self::dg()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.iter().any(|e| e.1 == k) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = match entries.iter().find(|e| e.1 == "task") {
            Some(&(_, _, v)) if v.parse::<Task>()? == Task::LongTail => Self::longtail(),
            _ => Self::dg(),
        };
        for (line, k, v) in entries {
            cfg.set(k, v).map_err(|e| match e {
                HarnessError::Config(m) => HarnessError::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| HarnessError::Config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
        where
            T::Err: fmt::Display,
        {
            if v == "auto" || v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        fn core<T: FromStr<Err = latentdr::Error>>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|e| HarnessError::Config(format!("{key}: {e}")))
        }
        match key {
            "task" => self.task = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "domains" => self.domains = num(key, value)?,
            "per_cell" => self.per_cell = num(key, value)?,
            "input_dim" => self.input_dim = num(key, value)?,
            "held_out" => self.held_out = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "domain_angle_step" => self.domain_angle_step = num(key, value)?,
            "domain_shift" => self.domain_shift = num(key, value)?,
            "domain_noise" => self.domain_noise = num(key, value)?,
            "heldout_rotation" => self.heldout_rotation = opt(key, value)?,
            "prototype_radius" => self.prototype_radius = num(key, value)?,
            "min_separation" => self.min_separation = num(key, value)?,
            "jitter_std" => self.jitter_std = num(key, value)?,
            "imbalance_ratio" => self.imbalance_ratio = num(key, value)?,
            "head_count" => self.head_count = num(key, value)?,
            "test_per_class" => self.test_per_class = num(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "latent_dim" => self.latent_dim = num(key, value)?,
            "share_classifier" => self.share_classifier = num(key, value)?,
            "kind" => self.kind = core(key, value)?,
            "norm" => self.norm = core(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_head" => self.d_head = opt(key, value)?,
            "d_ff" => self.d_ff = opt(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "subset_fraction" => self.subset_fraction = num(key, value)?,
            "noise_scale" => self.noise_scale = num(key, value)?,
            "mixer_on_raw_input" => self.mixer_on_raw_input = num(key, value)?,
            "variant" => self.variant = core(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_adjust" => self.lr_adjust = num(key, value)?,
            "stop_grad_into_encoder_for_l2" => self.stop_grad_into_encoder_for_l2 = num(key, value)?,
            "eval_batch" => self.eval_batch = opt(key, value)?,
            "dump_latents" => self.dump_latents = num(key, value)?,
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key in [`Self::KEYS`] order; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
        }
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let values: Vec<String> = vec![
            self.task.to_string(),
            self.seed.to_string(),
            self.classes.to_string(),
            self.domains.to_string(),
            self.per_cell.to_string(),
            self.input_dim.to_string(),
            self.held_out.to_string(),
            self.train_fraction.to_string(),
            self.domain_angle_step.to_string(),
            self.domain_shift.to_string(),
            self.domain_noise.to_string(),
            opt(&self.heldout_rotation),
            self.prototype_radius.to_string(),
            self.min_separation.to_string(),
            self.jitter_std.to_string(),
            self.imbalance_ratio.to_string(),
            self.head_count.to_string(),
            self.test_per_class.to_string(),
            hidden.join(","),
            self.latent_dim.to_string(),
            self.share_classifier.to_string(),
            self.kind.to_string(),
            self.norm.to_string(),
            self.heads.to_string(),
            opt(&self.d_head),
            opt(&self.d_ff),
            self.dropout.to_string(),
            self.subset_fraction.to_string(),
            self.noise_scale.to_string(),
            self.mixer_on_raw_input.to_string(),
            self.variant.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.lr_adjust.to_string(),
            self.stop_grad_into_encoder_for_l2.to_string(),
            opt(&self.eval_batch),
            self.dump_latents.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Number of domains contributing samples to each training step.
    pub fn training_domains(&self) -> usize {
        match self.task {
            Task::Dg => self.domains - 1,
            Task::LongTail => 1,
        }
    }

    pub fn eval_batch_size(&self) -> usize {
        self.eval_batch.unwrap_or(self.batch_size * self.training_domains())
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            input_dim: self.input_dim,
            prototype_radius: self.prototype_radius,
            min_separation: self.min_separation,
            jitter_std: self.jitter_std,
        }
    }

    pub fn multidomain_config(&self) -> MultiDomainConfig {
        let mut domains: Vec<DomainSpec> = (0..self.domains)
            .map(|d| {
                DomainSpec::stock(d, self.input_dim, self.domain_angle_step, self.domain_shift, self.domain_noise, self.seed)
            })
            .collect();
        if let (Some(angle), Some(spec)) = (self.heldout_rotation, domains.get_mut(self.held_out)) {
            spec.rotation_angle = angle;
        }
        MultiDomainConfig {
            classes: self.classes,
            per_cell: self.per_cell,
            geometry: self.geometry(),
            domains,
        }
    }

    pub fn longtail_config(&self) -> LongTailConfig {
        LongTailConfig {
            classes: self.classes,
            imbalance_ratio: self.imbalance_ratio,
            head_count: self.head_count,
            geometry: self.geometry(),
            noise_std: self.domain_noise,
        }
    }

    pub fn operator_config(&self) -> OperatorConfig {
        let mut op = OperatorConfig::defaults_for(self.kind, self.latent_dim);
        op.norm = self.norm;
        op.heads = self.heads;
        if let Some(d) = self.d_head {
            op.d_head = d;
        }
        if let Some(d) = self.d_ff {
            op.d_ff = d;
        }
        op.dropout = self.dropout;
        op.subset_fraction = self.subset_fraction;
        op.noise_scale = self.noise_scale;
        op.mixer_on_raw_input = self.mixer_on_raw_input;
        op
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            classes: self.classes,
            share_classifier: self.share_classifier,
            operator: self.operator_config(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            lr_adjust: self.lr_adjust,
            loss: LossOptions {
                stop_grad_into_encoder_for_l2: self.stop_grad_into_encoder_for_l2,
            },
        }
    }

    /// Checks everything that can be checked without generating data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.classes < 2 {
            return bad(format!("classes must be ≥ 2, got {}", self.classes));
        }
        match self.task {
            Task::Dg => {
                if self.domains < 2 {
                    return bad(format!("domain generalisation needs ≥ 2 domains, got {}", self.domains));
                }
                if self.held_out >= self.domains {
                    return bad(format!("held_out {} must be below domains {}", self.held_out, self.domains));
                }
                let train_per_domain = (self.train_fraction * self.per_cell as f64).round() as usize * self.classes;
                if self.batch_size > train_per_domain {
                    return bad(format!(
                        "batch_size {} exceeds the {train_per_domain} training samples per domain",
                        self.batch_size
                    ));
                }
            }
            Task::LongTail => {
                self.longtail_config().validate()?;
                if self.test_per_class == 0 {
                    return bad("test_per_class must be positive".into());
                }
            }
        }
        if self.per_cell == 0 || self.input_dim == 0 || self.latent_dim == 0 {
            return bad("per_cell, input_dim and latent_dim must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.batch_size < 2 && self.variant != AblationVariant::Erm && self.kind != DegradationKind::Gaussian {
            return bad(format!(
                "batch_size {} is too small for {} degradation, which mixes samples within a batch",
                self.batch_size, self.kind
            ));
        }
        if !(self.lr_adjust > 0.0 && self.lr_adjust.is_finite()) {
            return bad(format!("lr_adjust {} must be positive", self.lr_adjust));
        }
        if self.eval_batch == Some(0) {
            return bad("eval_batch must be positive".into());
        }
        self.train_config().sgd.validate()?;
        self.operator_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for mut cfg in [ExperimentConfig::dg(), ExperimentConfig::longtail()] {
            cfg.heldout_rotation = Some(0.3);
            cfg.d_ff = Some(7);
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn task_selects_defaults() {
        let cfg = ExperimentConfig::parse("epochs=3\ntask=longtail\n").unwrap();
        assert_eq!(cfg.norm, NormPlacement::PreLn);
        assert_eq!(cfg.classes, 10);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::dg());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(ExperimentConfig::parse("colour=red"), Err(HarnessError::Config(_))));
        assert!(ExperimentConfig::parse("seed=1\nseed=2").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
        assert!(ExperimentConfig::parse("kind=blur").is_err());
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = ExperimentConfig::parse("# note\n\n  kind = pool \nvariant=erm\nhidden=16, 8\n").unwrap();
        assert_eq!(cfg.kind, DegradationKind::Pool);
        assert_eq!(cfg.variant, AblationVariant::Erm);
        assert_eq!(cfg.hidden, vec![16, 8]);
    }

    #[test]
    fn single_row_batches_rejected_for_mixing() {
        let mut cfg = ExperimentConfig::dg();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.kind = DegradationKind::Gaussian;
        assert!(cfg.validate().is_ok());
        cfg.kind = DegradationKind::Pool;
        cfg.variant = AblationVariant::Erm;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::dg().validate().unwrap();
        ExperimentConfig::longtail().validate().unwrap();
        let mut cfg = ExperimentConfig::dg();
        cfg.held_out = 4;
        assert!(cfg.validate().is_err());
    }
}
