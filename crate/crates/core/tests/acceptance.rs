//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.
//!
//! Select criteria by number: `cargo test --test acceptance -- 1 3 9`.
//! The protocol criteria (7 and 8) cache finished runs under the cargo
//! target directory and reuse them while the configuration is unchanged.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use daud_core::data::{synth_corpus, Batch, Split, EOS, VOCAB_SIZE};
use daud_core::distill::{
    mixed_wordkd_loss, pretrain_loss, rkld_terms, sft_loss, train, word_kd_loss, RegimeKind, Rollout, TrainingRegime,
};
use daud_core::eval::*;
use daud_core::harness::*;
use daud_core::model::stub::{ConstantModel, EchoModel, FnModel};
use daud_core::model::*;
use daud_core::numerics::{grad_check, rng_from_seed, Graph, Rng, Tensor};
use rand::Rng as _;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lib<T>(r: daud_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::gpt2_style(1, 2, 8, VOCAB_SIZE, 16);
    let (batch, seq) = (2, 7);
    let rows = batch * seq;
    let mut worst = [0.0f64; 4];
    for seed in 0..10u64 {
        let mut rng = rng_from_seed(seed);
        let flat: Vec<f32> = (0..cfg.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let params = lib(TransformerParams::from_flat(cfg, &flat))?.cast::<f64>();
        let inputs: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..VOCAB_SIZE as u32)).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..VOCAB_SIZE as u32)).collect();
        let mut mask: Vec<f32> = (0..rows).map(|_| rng.gen_range(0..2) as f32).collect();
        mask[rows - 1] = 1.0;
        let teacher: Vec<f64> = (0..rows * VOCAB_SIZE).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pt = Batch {
            ids: (0..batch * (seq + 1)).map(|_| rng.gen_range(0..VOCAB_SIZE as u32)).collect(),
            mask: (0..batch * (seq + 1)).map(|i| if i % (seq + 1) > 2 { 1.0 } else { 0.0 }).collect(),
            batch_size: batch,
            seq_len: seq + 1,
            examples: vec![0, 1],
        };

        let logits = |g: &mut Graph<f64>, v: &[daud_core::numerics::Var]| {
            let pv = ParamVars::from_vars(cfg, v.to_vec())?;
            forward(g, &pv, &inputs, batch, seq)
        };
        let checks: [Box<dyn Fn(&mut Graph<f64>, &[daud_core::numerics::Var]) -> daud_core::Result<daud_core::numerics::Var>>; 4] = [
            Box::new(|g, v| {
                let l = logits(g, v)?;
                sft_loss(g, l, &targets, &mask)
            }),
            Box::new(|g, v| {
                let l = logits(g, v)?;
                word_kd_loss(g, l, &teacher, &mask, 2.0)
            }),
            Box::new(|g, v| {
                let l = logits(g, v)?;
                mixed_wordkd_loss(g, l, &teacher, &targets, &mask, 0.5, 2.0)
            }),
            Box::new(|g, v| {
                let pv = ParamVars::from_vars(cfg, v.to_vec())?;
                Ok(pretrain_loss(g, &pv, &pt, 0.1)?.0)
            }),
        ];
        for (w, f) in worst.iter_mut().zip(&checks) {
            let err = lib(grad_check(f, params.tensors(), 1e-4))?;
            *w = w.max(err);
        }
    }
    let detail = format!(
        "max relative error sft {:.1e}, word-kd {:.1e}, mixed {:.1e}, pretrain {:.1e} over 10 seeds",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst.iter().all(|&e| e < 1e-3) && start.elapsed().as_secs_f64() < 60.0, detail)
}

// ---------------------------------------------------------------- 2

/// Mean and standard error of the per-rollout reverse-KL gradient with
/// respect to `theta = q(1)` for a Bernoulli student emitting `steps`
/// independent tokens, alongside the analytic derivative of the per-token
/// `KL(q || p)`. With one step the long-horizon part vanishes; with two it
/// contributes zero-mean noise.
fn bernoulli_gradient(theta: f64, teacher_p: f64, steps: usize, n: usize, rng: &mut Rng) -> Result<(f64, f64, f64), String> {
    let z = (theta / (1.0 - theta)).ln();
    let rows = n * steps;
    let logits = lib(Tensor::from_fn(&[rows, 2], |i| if i % 2 == 1 { z } else { 0.0 }))?;
    let teacher_lp: Vec<f64> = (0..rows).flat_map(|_| [(1.0 - teacher_p).ln(), teacher_p.ln()]).collect();
    let rollouts: Vec<Rollout> = (0..n)
        .map(|i| {
            let tokens: Vec<u32> = (0..steps).map(|_| rng.gen_bool(theta) as u32).collect();
            let behavior_logprobs = tokens.iter().map(|&y| if y == 1 { theta.ln() } else { (1.0 - theta).ln() }).collect();
            Rollout { rows: (i * steps..(i + 1) * steps).collect(), tokens, behavior_logprobs }
        })
        .collect();
    let mut g = Graph::<f64>::new();
    let x = lib(g.param(logits))?;
    let terms = lib(rkld_terms(&mut g, x, &teacher_lp, &rollouts, 5.0))?;
    let total = lib(g.add(terms.single, terms.long))?;
    let grads = lib(g.gradients(total))?;
    let gx = grads.get(x).ok_or("no gradient for the logits")?;
    // The surrogate averages over rollouts; rescale each rollout to a
    // standalone estimate and map d/dz to d/dtheta.
    let dtheta = 1.0 / (theta * (1.0 - theta));
    let per: Vec<f64> = (0..n)
        .map(|i| (i * steps..(i + 1) * steps).map(|r| gx[2 * r + 1]).sum::<f64>() * n as f64 * dtheta)
        .collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let analytic = (theta / teacher_p).ln() - ((1.0 - theta) / (1.0 - teacher_p)).ln();
    Ok((mean, (var / n as f64).sqrt(), analytic))
}

fn rkld_statistics() -> Check {
    // Slack for floating-point summation when the estimator has no variance.
    const ROUNDING: f64 = 1e-9;
    let start = Instant::now();
    let n = 100_000;
    let mut rng = rng_from_seed(2024);
    let mut ok = true;
    let mut parts = Vec::new();
    for steps in [1, 2] {
        for theta in [0.2, 0.5, 0.8] {
            let (mean, se, analytic) = bernoulli_gradient(theta, 0.8, steps, n, &mut rng)?;
            ok &= (mean - analytic).abs() <= 3.0 * se + ROUNDING;
            let (same, same_se, _) = bernoulli_gradient(theta, theta, steps, n, &mut rng)?;
            ok &= same.abs() <= 3.0 * same_se + ROUNDING;
            parts.push(format!(
                "{steps}-token theta {theta}: {mean:.4} vs {analytic:.4} (se {se:.1e}), self {same:.1e}"
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(ok && secs < 120.0, parts.join("; "))
}

// ---------------------------------------------------------------- 3

fn rouge_n_oracle(reference: &[u8], candidate: &[u8], n: usize) -> f64 {
    if reference.len() < n {
        return 0.0;
    }
    let mut pool: Vec<&[u8]> = if candidate.len() >= n { candidate.windows(n).collect() } else { Vec::new() };
    let total = reference.len() + 1 - n;
    let mut hits = 0;
    for gram in reference.windows(n) {
        if let Some(i) = pool.iter().position(|c| *c == gram) {
            pool.swap_remove(i);
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn lcs_dp(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

fn random_tokens(rng: &mut Rng) -> Vec<u8> {
    let alphabet = rng.gen_range(1..7u8);
    let len = rng.gen_range(0..20);
    (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
}

fn metric_oracles() -> Check {
    let mut rng = rng_from_seed(33);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (r, c) = (random_tokens(&mut rng), random_tokens(&mut rng));
        let n = rng.gen_range(1..4);
        mismatches += (rouge_n_tokens(&r, &c, n) != rouge_n_oracle(&r, &c, n)) as usize;
    }
    for _ in 0..1000 {
        let (a, b) = (random_tokens(&mut rng), random_tokens(&mut rng));
        mismatches += (lcs_length(&a, &b) != lcs_dp(&a, &b)) as usize;
    }
    let same = rouge_l("a b c d", "a b c d", 1.0);
    let swapped = rouge_l("a b c d", "a c b d", 1.0);
    ensure(
        mismatches == 0 && same == 1.0 && swapped == 0.75,
        format!("{mismatches} mismatches over 2000 pairs; identical {same}, swapped {swapped}"),
    )
}

// ---------------------------------------------------------------- 4

fn auditor() -> Check {
    let corpus = lib(synth_corpus(10, 4, Split::Train))?;
    let cfg = AuditConfig::default();
    let echo = lib(memorization_fraction(&EchoModel::new(&corpus), &corpus, &cfg))?.fraction;
    let pad = lib(memorization_fraction(&ConstantModel::pad(), &corpus, &cfg))?.fraction;
    let half = lib(memorization_fraction(&EchoModel::new(&corpus.subset(&[1, 3, 5, 7, 9])), &corpus, &cfg))?.fraction;

    let mut rng = rng_from_seed(44);
    let mut violations = 0;
    for _ in 0..1000 {
        let target: Vec<u32> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0..3)).collect();
        let mut generated = target.clone();
        generated.truncate(rng.gen_range(0..=target.len()));
        if !generated.is_empty() && rng.gen_bool(0.5) {
            let i = rng.gen_range(0..generated.len());
            generated[i] = rng.gen_range(0..3);
        }
        let mut prev = true;
        for k in 1..=35 {
            let m = lib(exact_match(&generated, &target, k))?.matched;
            violations += (m && !prev) as usize;
            prev = m;
        }
    }
    ensure(
        echo == 1.0 && pad == 0.0 && half == 0.5 && violations == 0,
        format!("echo {echo}, pad {pad}, half {half}; {violations} monotonicity violations in 1000 pairs"),
    )
}

// ---------------------------------------------------------------- 5

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn exhaustive_best(m: &impl LanguageModel, prompt: &[u32], budget: GenerationBudget) -> Result<(Vec<u32>, f64), String> {
    let vocab = m.vocab_size() as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((tokens, score)) = stack.pop() {
        let mut ctx = prompt.to_vec();
        ctx.extend(&tokens);
        let logits = lib(m.prefill(&ctx))?.1;
        let top = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = top + logits.iter().map(|&l| (l as f64 - top).exp()).sum::<f64>().ln();
        for v in 0..vocab {
            let s = score + logits[v as usize] as f64 - lse;
            let mut t = tokens.clone();
            let done = v == budget.stop_token || {
                t.push(v);
                t.len() == budget.max_new_tokens
            };
            if done {
                if best.as_ref().is_none_or(|(bt, bs)| s > *bs || (s == *bs && t < *bt)) {
                    best = Some((t, s));
                }
            } else {
                stack.push((t, s));
            }
        }
    }
    best.ok_or_else(|| "no hypotheses".to_string())
}

fn decoding() -> Check {
    let cfg = ModelConfig::gpt2_style(2, 2, 16, VOCAB_SIZE, 64);
    let mut rng = rng_from_seed(55);
    let flat: Vec<f32> = (0..cfg.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let model = lib(TransformerParams::from_flat(cfg, &flat))?;
    let budget = GenerationBudget::new(10, EOS);
    let mut beam1_diffs = 0;
    for _ in 0..100 {
        let prompt: Vec<u32> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..256)).collect();
        let greedy = lib(greedy_decode(&model, &prompt, budget))?;
        let beam = lib(beam_search_decode(&model, &prompt, 1, budget))?;
        beam1_diffs += (greedy != beam.tokens) as usize;
    }

    let small = GenerationBudget::new(3, 2);
    let mut exhaustive_diffs = 0;
    for seed in 0..20u64 {
        let m = FnModel::new(3, 16, move |ctx: &[u32]| {
            let h = ctx.iter().fold(mix(seed), |h, &t| mix(h ^ (t as u64 + 1)));
            (0..3).map(|v| (mix(h ^ (v + 7)) % 3000) as f32 / 1000.0).collect()
        });
        let (tokens, _) = exhaustive_best(&m, &[0, 1], small)?;
        exhaustive_diffs += (lib(beam_search_decode(&m, &[0, 1], 27, small))?.tokens != tokens) as usize;
    }

    let flat_model = FnModel::new(5, 16, |_: &[u32]| vec![0.5, 1.0, 1.0, 1.0, 0.0]);
    let tie = lib(greedy_decode(&flat_model, &[0], GenerationBudget::new(3, 4)))?;
    ensure(
        beam1_diffs == 0 && exhaustive_diffs == 0 && tie == vec![1, 1, 1],
        format!(
            "beam-1 differs from greedy on {beam1_diffs}/100 prompts; width-27 beam differs from enumeration on {exhaustive_diffs}/20 models; tie decodes to {tie:?}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn saturation() -> Check {
    let start = Instant::now();
    let corpus = lib(synth_corpus(32, 6, Split::Train))?;
    let audit = AuditConfig { k: 16, ..AuditConfig::default() };
    let untrained = lib(init_params(Preset::Teacher.config(), 6))?;
    let before = lib(memorization_fraction(&untrained, &corpus, &audit))?.fraction;
    let mut regime = TrainingRegime::new(RegimeKind::Sft);
    regime.epochs = 200;
    regime.seed = 6;
    regime.optimizer.learning_rate = 1e-3;
    let model = lib(train(&Preset::Teacher.config(), None, &corpus, &regime, None))?;
    let after = lib(memorization_fraction(&model.params, &corpus, &audit))?.fraction;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        after >= 0.9 && before <= 0.02 && secs < 600.0,
        format!("untrained M {before:.3}, after 200 epochs M {after:.3}, {secs:.0}s"),
    )
}

// ---------------------------------------------------------------- 7, 8

const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];
const BUDGET_SECS: f64 = 4.0 * 3600.0;

struct ProtocolRun {
    rows: Vec<ResultRow>,
    seconds: f64,
}

fn protocol_dir(seed: u64) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("protocol-seed{seed}"))
}

/// Runs the default protocol for one seed, reusing a finished run whose
/// configuration matches.
fn protocol_run(seed: u64) -> Result<ProtocolRun, String> {
    let dir = protocol_dir(seed);
    let mut cfg = ExperimentConfig::default_protocol();
    cfg.seed = seed;
    cfg.output_dir = dir.clone();
    let toml = lib(cfg.to_toml())?;
    let timing = dir.join("wall_seconds.txt");
    let cached = fs::read_to_string(dir.join("config.toml")).ok().as_deref() == Some(toml.as_str());
    if cached {
        if let (Ok(csv), Ok(secs)) = (fs::read_to_string(dir.join("results.csv")), fs::read_to_string(&timing)) {
            let seconds = secs.trim().parse().map_err(|e| format!("{}: {e}", timing.display()))?;
            return Ok(ProtocolRun { rows: lib(parse_csv(&csv))?, seconds });
        }
    }
    let start = Instant::now();
    let out = lib(run_experiment(&cfg, &ExperimentOptions { resume: true }))?;
    let seconds = start.elapsed().as_secs_f64();
    fs::write(&timing, format!("{seconds:.1}\n")).map_err(|e| e.to_string())?;
    Ok(ProtocolRun { rows: out.rows, seconds })
}

fn protocol() -> &'static Result<Vec<ProtocolRun>, String> {
    static RUNS: OnceLock<Result<Vec<ProtocolRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| PROTOCOL_SEEDS.iter().map(|&s| protocol_run(s)).collect())
}

fn metrics<'a>(rows: &'a [ResultRow], model: &str, technique: &str) -> Result<&'a RowMetrics, String> {
    rows.iter()
        .find(|r| r.model == model && r.technique == technique)
        .and_then(|r| r.metrics.as_ref())
        .ok_or_else(|| format!("no {technique} result for {model}"))
}

const STUDENTS: [&str; 3] = ["S-L", "S-M", "S-S"];

fn memorization_direction() -> Check {
    let runs = protocol().as_ref().map_err(Clone::clone)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for size in STUDENTS {
        let mut wins = 0;
        let mut pairs = Vec::new();
        for run in runs {
            let sft = metrics(&run.rows, size, "SFT")?.mem_fraction;
            let rkld = metrics(&run.rows, size, "RKLD")?.mem_fraction;
            wins += (sft > rkld) as usize;
            pairs.push(format!("{sft:.3}/{rkld:.3}"));
        }
        ok &= wins >= 2;
        parts.push(format!("{size} SFT>RKLD in {wins}/3 [{}]", pairs.join(" ")));
    }
    let mut ordered = 0;
    let mut chains = Vec::new();
    for run in runs {
        let mut chain = vec![metrics(&run.rows, "T", "SFT (Teacher)")?.mem_fraction];
        for size in STUDENTS {
            chain.push(metrics(&run.rows, size, "SFT")?.mem_fraction);
        }
        ordered += chain.windows(2).all(|w| w[0] >= w[1]) as usize;
        chains.push(chain.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(">="));
    }
    ok &= ordered >= 2;
    parts.push(format!("SFT non-decreasing in size in {ordered}/3 [{}]", chains.join(" ")));
    let seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    ok &= seconds < BUDGET_SECS;
    parts.push(format!("{:.2} h", seconds / 3600.0));
    ensure(ok, parts.join("; "))
}

fn rouge_gap_direction() -> Check {
    let runs = protocol().as_ref().map_err(Clone::clone)?;
    let largest = STUDENTS[0];
    let mut wins = 0;
    let mut pairs = Vec::new();
    for run in runs {
        let sft = metrics(&run.rows, largest, "SFT")?;
        let rkld = metrics(&run.rows, largest, "RKLD")?;
        let (gs, gr) = (sft.r1_train - sft.r1_test, rkld.r1_train - rkld.r1_test);
        wins += (gs > gr) as usize;
        pairs.push(format!("{gs:.3}/{gr:.3}"));
    }
    ensure(wins >= 2, format!("{largest} SFT gap > RKLD gap in {wins}/3 [{}]", pairs.join(" ")))
}

// ---------------------------------------------------------------- 9

fn persistence() -> Check {
    let io = |e: std::io::Error| e.to_string();
    let (a, b) = (tempfile::tempdir().map_err(io)?, tempfile::tempdir().map_err(io)?);
    let ra = lib(run_experiment(&common::small_config(a.path(), 17), &ExperimentOptions::default()))?;
    let rb = lib(run_experiment(&common::small_config(b.path(), 17), &ExperimentOptions::default()))?;
    let same_csv = fs::read(&ra.csv_path).map_err(io)? == fs::read(&rb.csv_path).map_err(io)?;

    let corpus = lib(synth_corpus(8, 2, Split::Train))?;
    let mut regime = TrainingRegime::new(RegimeKind::Sft);
    regime.epochs = 2;
    let model = lib(train(&ModelConfig::gpt2_style(1, 2, 16, VOCAB_SIZE, 256), None, &corpus, &regime, None))?;
    let path = a.path().join("roundtrip.daud");
    lib(save_checkpoint(&model, &path))?;
    let back = lib(load_checkpoint(&path))?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let exact = bits(&back.params.flat()) == bits(&model.params.flat()) && back.regime == model.regime;

    let c = tempfile::tempdir().map_err(io)?;
    let mut partial = common::small_config(c.path(), 17);
    partial.runs.truncate(4);
    lib(run_experiment(&partial, &ExperimentOptions::default()))?;
    let resumed = lib(run_experiment(&common::small_config(c.path(), 17), &ExperimentOptions { resume: true }))?;
    let same_resume = fs::read(&ra.csv_path).map_err(io)? == fs::read(&resumed.csv_path).map_err(io)?;
    ensure(
        same_csv && exact && same_resume,
        format!("repeat csv identical {same_csv}; checkpoint bit-exact {exact}; resumed csv identical {same_resume}"),
    )
}

// ----------------------------------------------------------------

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check); 9] = [
        (1, "loss gradients", gradients),
        (2, "reverse-KL estimator", rkld_statistics),
        (3, "ROUGE oracles", metric_oracles),
        (4, "memorization auditor", auditor),
        (5, "decoding oracles", decoding),
        (6, "memorization saturation", saturation),
        (7, "memorization direction", memorization_direction),
        (8, "ROUGE gap direction", rouge_gap_direction),
        (9, "determinism and persistence", persistence),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
