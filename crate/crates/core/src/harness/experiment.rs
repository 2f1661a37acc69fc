//! End-to-end protocol: fine-tune the teacher, distill every student,
//! audit and score each model, and write the reports.

use std::path::{Path, PathBuf};

use crate::data::{load_jsonl, synth_corpus, validate_example, Corpus, Split};
use crate::distill::{train_cached, RegimeKind, TeacherCache, TrainedModel, TrainingRegime};
use crate::error::{Error, Result};
use crate::eval::{memorization_fraction, rouge_report, sample_indices, AuditConfig, AuditReport};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{ExperimentConfig, RunSpec};
use crate::harness::report::{emit_report, sort_rows, ReportFormat, ResultRow, RowMetrics, TEACHER_TECHNIQUE};
use crate::model::ModelConfig;
use crate::numerics::derive_seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExperimentOptions {
    /// Reuse checkpoints already present in the output directory when
    /// their header matches the run they would be trained for.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub csv_path: PathBuf,
    pub markdown_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Corpus,
    pub test: Corpus,
    pub pretrain: Option<Corpus>,
}

/// File names inside the output directory.
pub fn checkpoint_path(out: &Path, id: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{id}.daud"))
}

pub fn teacher_id(cfg: &ExperimentConfig) -> String {
    format!("{}_teacher", cfg.teacher.label())
}

/// The regime a run is trained with: the configured one with its seed
/// replaced by one derived from the experiment seed and the model label,
/// so all techniques at one size share initialization and batch order.
pub fn effective_regime(cfg: &ExperimentConfig, run: &RunSpec, teacher: bool) -> TrainingRegime {
    let stream = if teacher {
        format!("teacher/{}", run.label())
    } else {
        format!("student/{}", run.label())
    };
    TrainingRegime {
        seed: derive_seed(cfg.seed, &stream),
        ..run.regime.clone()
    }
}

fn context_limit(cfg: &ExperimentConfig) -> usize {
    std::iter::once(&cfg.teacher)
        .chain(&cfg.runs)
        .map(|r| r.model.config().max_seq_len)
        .min()
        .expect("teacher always present")
}

fn load_split(path: &Path, split: Split, limit: usize) -> Result<Corpus> {
    let report = load_jsonl(path, split, limit)?;
    for r in &report.rejected {
        log::warn!("{}:{}: skipped: {}", path.display(), r.line, r.reason);
    }
    if report.corpus.is_empty() {
        return Err(Error::Config(format!("{} holds no usable examples", path.display())));
    }
    Ok(report.corpus)
}

/// Loads the configured corpora, generating synthetic splits where no
/// file is given. Synthetic splits come from one generator call, so they
/// never share an example.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &cfg.data;
    let limit = context_limit(cfg);
    let n_train = if d.train_path.is_none() { d.synth_train } else { 0 };
    let n_test = if d.test_path.is_none() { d.synth_test } else { 0 };
    let n_pre = if d.pretrain_path.is_none() { d.synth_pretrain } else { 0 };
    let mut synth = if n_train + n_test + n_pre > 0 {
        let c = synth_corpus(n_train + n_test + n_pre, derive_seed(cfg.seed, "data"), Split::Train)?;
        for e in &c.examples {
            validate_example(e, limit).map_err(|m| Error::Config(format!("synthetic example does not fit: {m}")))?;
        }
        c.examples
    } else {
        Vec::new()
    };
    let pre_synth = synth.split_off(n_train + n_test);
    let test_synth = synth.split_off(n_train);
    let train = match &d.train_path {
        Some(p) => load_split(p, Split::Train, limit)?,
        None => Corpus::new(synth, Split::Train),
    };
    let test = match &d.test_path {
        Some(p) => load_split(p, Split::Test, limit)?,
        None => Corpus::new(test_synth, Split::Test),
    };
    let pretrain = match &d.pretrain_path {
        Some(p) => Some(load_split(p, Split::Pretrain, limit)?),
        None if n_pre > 0 => Some(Corpus::new(pre_synth, Split::Pretrain)),
        None => None,
    };
    Ok(ExperimentData { train, test, pretrain })
}

fn train_or_resume(
    path: &Path,
    resume: bool,
    config: &ModelConfig,
    regime: &TrainingRegime,
    fit: impl FnOnce() -> Result<TrainedModel>,
) -> Result<TrainedModel> {
    if resume && path.is_file() {
        match load_checkpoint(path) {
            Ok(m) if m.config == *config && m.regime == *regime => {
                log::info!("reusing {}", path.display());
                return Ok(m);
            }
            Ok(_) => log::warn!("{} was trained with different settings; retraining", path.display()),
            Err(e) => log::warn!("{} is unreadable ({e}); retraining", path.display()),
        }
    }
    let m = fit()?;
    save_checkpoint(&m, path)?;
    Ok(m)
}

struct Evaluation<'a> {
    data: &'a ExperimentData,
    audit: AuditConfig,
    rouge_train: Corpus,
    rouge_test: Corpus,
    out: &'a Path,
}

impl Evaluation<'_> {
    fn evaluate(&self, id: &str, model: &TrainedModel) -> Result<RowMetrics> {
        let audit: AuditReport = memorization_fraction(&model.params, &self.data.train, &self.audit)?;
        let path = self.out.join("audits").join(format!("{id}.json"));
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        let json = serde_json::to_string_pretty(&audit).expect("audit report serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let rouge = rouge_report(&model.params, &self.rouge_train, &self.rouge_test)?;
        Ok(RowMetrics {
            mem_fraction: audit.fraction,
            r1_train: rouge.train.scores.rouge1,
            r1_test: rouge.test.scores.rouge1,
            r2_train: rouge.train.scores.rouge2,
            r2_test: rouge.test.scores.rouge2,
            rl_train: rouge.train.scores.rouge_l,
            rl_test: rouge.test.scores.rouge_l,
        })
    }
}

/// Runs the whole protocol and writes `results.csv` and `results.md`
/// under `cfg.output_dir`. A failing student run yields a row without
/// metrics; a failing teacher aborts the experiment.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &ExperimentOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = load_data(cfg)?;
    let extra_pretrain: Vec<Option<Corpus>> = cfg
        .runs
        .iter()
        .map(|r| match (&r.regime.kind, &r.regime.rkld.pretrain_corpus) {
            (RegimeKind::Rkld, Some(p)) => load_split(p, Split::Pretrain, context_limit(cfg)).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out.join("config.toml"), e))?;

    let eval = Evaluation {
        data: &data,
        audit: AuditConfig {
            seed: derive_seed(cfg.seed, "audit"),
            ..cfg.audit
        },
        rouge_train: data.train.subset(&sample_indices(
            data.train.len(),
            Some(cfg.rouge.train_sample),
            derive_seed(cfg.seed, "rouge/train"),
        )),
        rouge_test: data.test.subset(&sample_indices(
            data.test.len(),
            Some(cfg.rouge.test_sample),
            derive_seed(cfg.seed, "rouge/test"),
        )),
        out,
    };

    let tid = teacher_id(cfg);
    let tconfig = cfg.teacher.model.config();
    let tregime = effective_regime(cfg, &cfg.teacher, true);
    log::info!("teacher {tid}: training");
    let teacher = train_or_resume(&checkpoint_path(out, &tid), opts.resume, &tconfig, &tregime, || {
        train_cached(&tconfig, None, &data.train, &tregime, None, &mut TeacherCache::new())
    })?;
    let metrics = eval.evaluate(&tid, &teacher)?;
    log::info!("teacher {tid}: memorization {:.3}", metrics.mem_fraction);
    let mut rows = vec![ResultRow {
        model: cfg.teacher.label(),
        params: tconfig.param_count(),
        technique: TEACHER_TECHNIQUE.to_string(),
        metrics: Some(metrics),
        seed: cfg.seed,
        error: None,
    }];

    let mut cache = TeacherCache::new();
    for (run, extra) in cfg.runs.iter().zip(&extra_pretrain) {
        let id = run.id();
        let config = run.model.config();
        let regime = effective_regime(cfg, run, false);
        let pretrain = extra.as_ref().or(data.pretrain.as_ref());
        log::info!("{id}: training");
        let result = train_or_resume(&checkpoint_path(out, &id), opts.resume, &config, &regime, || {
            train_cached(&config, Some(&teacher), &data.train, &regime, pretrain, &mut cache)
        })
        .and_then(|m| eval.evaluate(&id, &m));
        let (metrics, error) = match result {
            Ok(m) => {
                log::info!("{id}: memorization {:.3}", m.mem_fraction);
                (Some(m), None)
            }
            Err(e) => {
                log::error!("{id} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        rows.push(ResultRow {
            model: run.label(),
            params: config.param_count(),
            technique: run.regime.kind.label().to_string(),
            metrics,
            seed: cfg.seed,
            error,
        });
    }
    sort_rows(&mut rows);
    let csv_path = out.join("results.csv");
    let markdown_path = out.join("results.md");
    emit_report(&rows, ReportFormat::Csv, &csv_path)?;
    emit_report(&rows, ReportFormat::Markdown, &markdown_path)?;
    Ok(ExperimentOutcome {
        rows,
        csv_path,
        markdown_path,
    })
}
