#![allow(dead_code)]

use std::path::Path;

use daud_core::distill::{RegimeKind, TrainingRegime};
use daud_core::harness::{DataConfig, ExperimentConfig, ModelSpec, RougeConfig, RunSpec};
use daud_core::model::ModelConfig;

fn run(label: &str, d_model: usize, kind: RegimeKind, epochs: usize) -> RunSpec {
    let mut regime = TrainingRegime::new(kind);
    regime.epochs = epochs;
    regime.batch_size = 8;
    regime.max_new_tokens = 12;
    regime.seqkd_beam_width = 2;
    regime.rkld.rollouts_per_prompt = 2;
    RunSpec {
        model: ModelSpec::Custom(ModelConfig::gpt2_style(1, 2, d_model, 260, 256)),
        label: Some(label.to_string()),
        regime,
    }
}

/// A seconds-scale experiment: two tiny students under every technique.
pub fn small_config(out: &Path, seed: u64) -> ExperimentConfig {
    let mut runs = Vec::new();
    for kind in RegimeKind::ALL {
        runs.push(run("tiny-b", 16, kind, 2));
        runs.push(run("tiny-a", 8, kind, 2));
    }
    ExperimentConfig {
        seed,
        output_dir: out.to_path_buf(),
        data: DataConfig {
            synth_train: 24,
            synth_test: 8,
            synth_pretrain: 8,
            ..DataConfig::default()
        },
        teacher: run("tiny-t", 24, RegimeKind::Sft, 3),
        runs,
        rouge: RougeConfig {
            train_sample: 8,
            test_sample: 8,
        },
        ..ExperimentConfig::default_protocol()
    }
}
