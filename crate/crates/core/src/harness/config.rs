//! Experiment configuration, read from TOML and validated up front.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{RegimeKind, TrainingRegime};
use crate::error::{Error, Result};
use crate::eval::AuditConfig;
use crate::model::{ModelConfig, Preset};
use crate::data::VOCAB_SIZE;

pub const CONFIG_VERSION: u32 = 1;

pub const PROTOCOL_BATCH_SIZE: usize = 8;
pub const PROTOCOL_LEARNING_RATE: f64 = 3e-3;
pub const PROTOCOL_TEACHER_LEARNING_RATE: f64 = 1.5e-3;
pub const PROTOCOL_TEACHER_EPOCHS: usize = 45;
pub const PROTOCOL_EPOCHS: usize = 30;
pub const PROTOCOL_RKLD_EPOCHS: usize = 5;
pub const PROTOCOL_RKLD_WARM_START: usize = 10;

/// A bundled preset by label (`"T"`, `"S-L"`, `"S-M"`, `"S-S"`) or an
/// explicit architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(Preset),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn config(&self) -> ModelConfig {
        match self {
            ModelSpec::Preset(p) => p.config(),
            ModelSpec::Custom(c) => *c,
        }
    }
}

/// One model to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelSpec,
    /// Row label; defaults to the preset label, or `"custom"`.
    #[serde(default)]
    pub label: Option<String>,
    /// `regime.seed` is ignored: the harness derives every seed from the
    /// experiment seed.
    #[serde(default)]
    pub regime: TrainingRegime,
}

impl RunSpec {
    pub fn new(preset: Preset, regime: TrainingRegime) -> Self {
        RunSpec {
            model: ModelSpec::Preset(preset),
            label: None,
            regime,
        }
    }

    pub fn label(&self) -> String {
        match (&self.label, &self.model) {
            (Some(l), _) => l.clone(),
            (None, ModelSpec::Preset(p)) => p.label().to_string(),
            (None, ModelSpec::Custom(_)) => "custom".to_string(),
        }
    }

    /// Unique key of a student run, also its checkpoint file stem.
    pub fn id(&self) -> String {
        format!("{}_{}", self.label(), self.regime.kind.label())
    }
}

/// Where the corpora come from. Paths, when set, take precedence over the
/// synthetic generator for that split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub pretrain_path: Option<PathBuf>,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_pretrain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            test_path: None,
            pretrain_path: None,
            synth_train: 512,
            synth_test: 128,
            synth_pretrain: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RougeConfig {
    pub train_sample: usize,
    pub test_sample: usize,
}

impl Default for RougeConfig {
    fn default() -> Self {
        RougeConfig {
            train_sample: 128,
            test_sample: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub teacher: RunSpec,
    pub runs: Vec<RunSpec>,
    /// `audit.seed` is ignored in favour of a seed derived from `seed`.
    pub audit: AuditConfig,
    pub rouge: RougeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::default_protocol()
    }
}

impl ExperimentConfig {
    /// Teacher `T` fine-tuned with SFT, then students `S-L`, `S-M`, `S-S`
    /// each trained with SFT, word-KD, SeqKD and RKLD on 512 synthetic
    /// examples.
    ///
    /// Every run uses batch 8. Students train at learning rate 3e-3 and the
    /// wider teacher at 1.5e-3 for [`PROTOCOL_TEACHER_EPOCHS`]. Students
    /// trained by likelihood take [`PROTOCOL_EPOCHS`]; reverse-KL runs start from
    /// [`PROTOCOL_RKLD_WARM_START`] epochs of SFT and then take
    /// [`PROTOCOL_RKLD_EPOCHS`] reverse-KL epochs.
    pub fn default_protocol() -> Self {
        let regime = |kind| {
            let mut r = TrainingRegime::new(kind);
            r.batch_size = PROTOCOL_BATCH_SIZE;
            r.optimizer.learning_rate = PROTOCOL_LEARNING_RATE;
            r.epochs = PROTOCOL_EPOCHS;
            if kind == RegimeKind::Rkld {
                r.epochs = PROTOCOL_RKLD_EPOCHS;
                r.rkld.warm_start_epochs = PROTOCOL_RKLD_WARM_START;
            }
            r
        };
        let mut teacher_regime = regime(RegimeKind::Sft);
        teacher_regime.optimizer.learning_rate = PROTOCOL_TEACHER_LEARNING_RATE;
        teacher_regime.epochs = PROTOCOL_TEACHER_EPOCHS;
        let mut runs = Vec::new();
        for kind in RegimeKind::ALL {
            for p in [Preset::StudentLarge, Preset::StudentMedium, Preset::StudentSmall] {
                runs.push(RunSpec::new(p, regime(kind)));
            }
        }
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            teacher: RunSpec::new(Preset::Teacher, teacher_regime),
            runs,
            audit: AuditConfig::default(),
            rouge: RougeConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every check that can fail without touching data or models.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.teacher.regime.kind != RegimeKind::Sft {
            return bad("the teacher must be trained with SFT".into());
        }
        let mut ids = HashSet::new();
        for run in std::iter::once(&self.teacher).chain(&self.runs) {
            let c = run.model.config();
            c.validate().map_err(|e| Error::Config(format!("{}: {e}", run.id())))?;
            run.regime.validate().map_err(|e| Error::Config(format!("{}: {e}", run.id())))?;
            if c.vocab_size < VOCAB_SIZE {
                return bad(format!("{}: vocab_size {} below the tokenizer's {VOCAB_SIZE}", run.id(), c.vocab_size));
            }
            if run.label().is_empty() || run.label().contains(['/', '\\', ',']) {
                return bad(format!("run label {:?} must be non-empty without '/', '\\\\' or ','", run.label()));
            }
        }
        for run in &self.runs {
            if !ids.insert(run.id()) {
                return bad(format!("duplicate run id {}", run.id()));
            }
            if run.model.config().vocab_size != self.teacher.model.config().vocab_size {
                return bad(format!("{}: vocabulary differs from the teacher's", run.id()));
            }
        }
        self.audit.validate()?;
        if self.rouge.train_sample == 0 || self.rouge.test_sample == 0 {
            return bad("ROUGE sample sizes must be positive".into());
        }
        let d = &self.data;
        if d.train_path.is_none() && d.synth_train == 0 {
            return bad("no training data: set data.train_path or data.synth_train".into());
        }
        if d.test_path.is_none() && d.synth_test == 0 {
            return bad("no test data: set data.test_path or data.synth_test".into());
        }
        let needs_pretrain = self
            .runs
            .iter()
            .any(|r| r.regime.kind == RegimeKind::Rkld && r.regime.rkld.pretrain_corpus.is_none());
        if needs_pretrain && d.pretrain_path.is_none() && d.synth_pretrain == 0 {
            return bad("RKLD runs need data.pretrain_path or data.synth_pretrain".into());
        }
        for p in [&d.train_path, &d.test_path, &d.pretrain_path].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("data file {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

/// Settings for training a single model outside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub version: u32,
    pub model: ModelSpec,
    /// JSONL training corpus.
    pub corpus: PathBuf,
    /// Teacher checkpoint, required by every regime except SFT.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// JSONL pretrain corpus for RKLD; `regime.rkld.pretrain_corpus` is
    /// used when this is unset.
    #[serde(default)]
    pub pretrain: Option<PathBuf>,
    #[serde(default)]
    pub regime: TrainingRegime,
}

impl TrainRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn pretrain_path(&self) -> Option<&Path> {
        self.pretrain.as_deref().or(self.regime.rkld.pretrain_corpus.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        self.model.config().validate()?;
        self.regime.validate()?;
        if self.regime.kind.needs_teacher() && self.teacher.is_none() {
            return bad(format!("{:?} training needs a teacher checkpoint", self.regime.kind));
        }
        if self.regime.kind == RegimeKind::Rkld && self.pretrain_path().is_none() {
            return bad("RKLD training needs a pretrain corpus".into());
        }
        let inputs = [Some(self.corpus.as_path()), self.teacher.as_deref(), self.pretrain_path()];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("input file {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}
