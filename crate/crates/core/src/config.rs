//! Run configuration: one struct per module, a strict `key = value` config
//! file with `[section]` headers and `#` comment lines, and a canonical
//! serialization whose hash ties checkpoints to the settings that produced
//! them. Unknown sections or keys are hard errors.

use crate::data::{BatchSpec, DataConfig, SplitSpec};
use crate::ema::EmaConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricsConfig;
use crate::model::NetworkConfig;
use sha2::{Digest, Sha256};

/// Training method; each adds one term over the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Cross-entropy plus attention loss on labeled data only.
    Supervised,
    /// Adds the ramped classification consistency term, no attention losses.
    MeanTeacher,
    /// Attention loss plus classification consistency, no attention consistency.
    DcmtNac,
    /// The full objective with both consistency terms.
    Dcmt,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Method::Supervised),
            "mean_teacher" => Ok(Method::MeanTeacher),
            "dcmt_nac" => Ok(Method::DcmtNac),
            "dcmt" => Ok(Method::Dcmt),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::MeanTeacher => "mean_teacher",
            Method::DcmtNac => "dcmt_nac",
            Method::Dcmt => "dcmt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Student,
    Teacher,
    Both,
}

impl EvalModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(EvalModel::Student),
            "teacher" => Ok(EvalModel::Teacher),
            "both" => Ok(EvalModel::Both),
            _ => Err(Error::Config(format!("unknown eval_model {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalModel::Student => "student",
            EvalModel::Teacher => "teacher",
            EvalModel::Both => "both",
        }
    }
}

/// Optimization and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub method: Method,
    pub eval_model: EvalModel,
    pub seed: u64,
    pub augment: bool,
    /// Feed independently augmented views to student and teacher; default off
    /// (both see the same view).
    pub independent_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 0.0001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            method: Method::Dcmt,
            eval_model: EvalModel::Teacher,
            seed: 0,
            augment: true,
            independent_augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one run needs. A single seed in `[trainer]` drives data
/// generation, splits, initialization, sampling, and augmentation through
/// distinct derived streams.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub batch: BatchSpec,
    pub model: NetworkConfig,
    pub ema: EmaConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            data: DataConfig::default(),
            split: SplitSpec::default(),
            batch: BatchSpec::default(),
            model: NetworkConfig::default(),
            ema: EmaConfig::default(),
            losses: LossConfig::default(),
            trainer: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        };
        cfg.apply_seed(cfg.trainer.seed);
        cfg
    }
}

impl RunConfig {
    /// Propagate the run seed into per-component seeds.
    pub fn apply_seed(&mut self, seed: u64) {
        self.trainer.seed = seed;
        self.data.seed = crate::data::mix_seed(seed, 0xDA7A, 0);
        self.split.seed = crate::data::mix_seed(seed, 0x5B11, 0);
        self.model.seed = crate::data::mix_seed(seed, 0x1011, 0);
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.ema.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        if self.model.input_size != self.data.size {
            return Err(Error::Config(format!(
                "model input_size {} != data size {}",
                self.model.input_size, self.data.size
            )));
        }
        if self.losses.num_classes != self.model.num_classes {
            return Err(Error::Config("num_classes differs between model and losses".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.bin_threshold) {
            return Err(Error::Config("bin_threshold must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. Parsing this text
    /// reproduces the config exactly.
    pub fn canonical_text(&self) -> String {
        let widths: Vec<String> = self.model.conv_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "[data]\n\
             size = {}\n\
             subjects = {}\n\
             slices_per_subject = {}\n\
             noise_sigma = {}\n\
             dilate_iterations = {}\n\
             train_fraction = {}\n\
             labeled_fraction = {}\n\
             labeled_per_batch = {}\n\
             unlabeled_per_batch = {}\n\
             [model]\n\
             num_classes = {}\n\
             attention_stride = {}\n\
             conv_widths = {}\n\
             [ema]\n\
             alpha = {}\n\
             ramp_alpha = {}\n\
             [losses]\n\
             lambda_a = {}\n\
             lambda_r = {}\n\
             eps = {}\n\
             attention_on_unlabeled = {}\n\
             [trainer]\n\
             lr = {}\n\
             weight_decay = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             adam_eps = {}\n\
             epochs = {}\n\
             method = {}\n\
             eval_model = {}\n\
             seed = {}\n\
             augment = {}\n\
             independent_augmentation = {}\n\
             [metrics]\n\
             bin_threshold = {}\n",
            self.data.size,
            self.data.subjects,
            self.data.slices_per_subject,
            self.data.noise_sigma,
            self.data.dilate_iterations,
            self.split.train_fraction,
            self.split.labeled_fraction,
            self.batch.labeled_per_batch,
            self.batch.unlabeled_per_batch,
            self.model.num_classes,
            self.model.attention_stride,
            widths.join(","),
            self.ema.alpha,
            self.ema.ramp_alpha,
            self.losses.lambda_a,
            self.losses.lambda_r,
            self.losses.eps,
            self.losses.attention_on_unlabeled,
            self.trainer.lr,
            self.trainer.weight_decay,
            self.trainer.adam_beta1,
            self.trainer.adam_beta2,
            self.trainer.adam_eps,
            self.trainer.epochs,
            self.trainer.method.as_str(),
            self.trainer.eval_model.as_str(),
            self.trainer.seed,
            self.trainer.augment,
            self.trainer.independent_augmentation,
            self.metrics.bin_threshold,
        )
    }

    /// First 16 hex chars of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parse config text over the defaults, then re-derive seeds and validate.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                if !["data", "model", "ema", "losses", "trainer", "metrics"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)
                .map_err(|e| err(e.to_string()))?;
        }
        cfg.apply_seed(cfg.trainer.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected integer, got {v:?}")))
        }
        fn float(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected number, got {v:?}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("expected true/false, got {v:?}"))),
            }
        }
        match (section, key) {
            ("data", "size") => {
                self.data.size = int(value)?;
                self.model.input_size = self.data.size;
            }
            ("data", "subjects") => self.data.subjects = int(value)? as u32,
            ("data", "slices_per_subject") => self.data.slices_per_subject = int(value)? as u32,
            ("data", "noise_sigma") => self.data.noise_sigma = float(value)?,
            ("data", "dilate_iterations") => self.data.dilate_iterations = int(value)?,
            ("data", "train_fraction") => self.split.train_fraction = float(value)?,
            ("data", "labeled_fraction") => self.split.labeled_fraction = float(value)?,
            ("data", "labeled_per_batch") => self.batch.labeled_per_batch = int(value)?,
            ("data", "unlabeled_per_batch") => self.batch.unlabeled_per_batch = int(value)?,
            ("model", "num_classes") => {
                self.model.num_classes = int(value)?;
                self.losses.num_classes = self.model.num_classes;
            }
            ("model", "attention_stride") => self.model.attention_stride = int(value)?,
            ("model", "conv_widths") => {
                let widths: Result<Vec<usize>> = value.split(',').map(|t| int(t.trim())).collect();
                self.model.conv_widths = widths?;
            }
            ("ema", "alpha") => self.ema.alpha = float(value)?,
            ("ema", "ramp_alpha") => self.ema.ramp_alpha = boolean(value)?,
            ("losses", "lambda_a") => self.losses.lambda_a = float(value)?,
            ("losses", "lambda_r") => self.losses.lambda_r = float(value)?,
            ("losses", "eps") => self.losses.eps = float(value)?,
            ("losses", "attention_on_unlabeled") => {
                self.losses.attention_on_unlabeled = boolean(value)?
            }
            ("trainer", "lr") => self.trainer.lr = float(value)?,
            ("trainer", "weight_decay") => self.trainer.weight_decay = float(value)?,
            ("trainer", "adam_beta1") => self.trainer.adam_beta1 = float(value)?,
            ("trainer", "adam_beta2") => self.trainer.adam_beta2 = float(value)?,
            ("trainer", "adam_eps") => self.trainer.adam_eps = float(value)?,
            ("trainer", "epochs") => self.trainer.epochs = int(value)?,
            ("trainer", "method") => self.trainer.method = Method::parse(value)?,
            ("trainer", "eval_model") => self.trainer.eval_model = EvalModel::parse(value)?,
            ("trainer", "seed") => {
                self.trainer.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("expected integer seed, got {value:?}")))?
            }
            ("trainer", "augment") => self.trainer.augment = boolean(value)?,
            ("trainer", "independent_augmentation") => {
                self.trainer.independent_augmentation = boolean(value)?
            }
            ("metrics", "bin_threshold") => self.metrics.bin_threshold = float(value)?,
            ("", k) => return Err(Error::Config(format!("key {k:?} outside any section"))),
            (s, k) => return Err(Error::Config(format!("unknown key {k:?} in section [{s}]"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_canonical_text_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.canonical_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\
# experiment settings
[trainer]
seed = 7
method = mean_teacher
epochs = 3

[losses]
lambda_a = 0
[data]
labeled_fraction = 0.5
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.trainer.seed, 7);
        assert_eq!(cfg.trainer.method, Method::MeanTeacher);
        assert_eq!(cfg.trainer.epochs, 3);
        assert_eq!(cfg.losses.lambda_a, 0.0);
        assert_eq!(cfg.split.labeled_fraction, 0.5);
        // derived seeds follow the run seed
        let mut expect = RunConfig::default();
        expect.apply_seed(7);
        assert_eq!(cfg.data.seed, expect.data.seed);
    }

    #[test]
    fn unknown_keys_and_sections_are_hard_errors() {
        assert!(matches!(
            RunConfig::parse("[trainer]\nlearning = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[optimizer]\nlr = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("lr = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[trainer]\nlr\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_field_validation() {
        // conv_widths shorter than the pooling depth
        let r = RunConfig::parse("[model]\nattention_stride = 8\nconv_widths = 4,4\n");
        assert!(matches!(r, Err(Error::Config(_))));
        // method string garbage
        assert!(matches!(
            RunConfig::parse("[trainer]\nmethod = sgd\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = RunConfig::default();
        let tweaked = RunConfig::parse("[losses]\nlambda_r = 0.002\n").unwrap();
        assert_ne!(base.hash(), tweaked.hash());
    }

    #[test]
    fn seed_streams_are_distinct() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.data.seed, cfg.split.seed);
        assert_ne!(cfg.data.seed, cfg.model.seed);
        assert_ne!(cfg.split.seed, cfg.model.seed);
    }
}
