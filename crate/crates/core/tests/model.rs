use daud_core::data::{EOS, VOCAB_SIZE};
use daud_core::model::stub::FnModel;
use daud_core::model::*;
use daud_core::numerics::{rng_from_seed, Graph, Rng};
use rand::Rng as _;

fn tiny(seed: u64) -> TransformerParams<f32> {
    let cfg = ModelConfig::gpt2_style(2, 2, 16, VOCAB_SIZE, 48);
    let mut rng = rng_from_seed(seed);
    let flat: Vec<f32> = (0..cfg.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    TransformerParams::from_flat(cfg, &flat).unwrap()
}

fn random_ids(rng: &mut Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Logits that are an arbitrary but fixed function of the whole context.
fn hashed_logits(seed: u64, vocab: usize) -> impl Fn(&[u32]) -> Vec<f32> {
    move |ctx: &[u32]| {
        let h = ctx.iter().fold(mix(seed), |h, &t| mix(h ^ (t as u64 + 1)));
        (0..vocab)
            .map(|v| (mix(h ^ (v as u64 * 0x9e37)) % 4000) as f32 / 1000.0 - 2.0)
            .collect()
    }
}

fn logsoftmax(l: &[f32]) -> Vec<f64> {
    let m = l.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + l.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    l.iter().map(|&v| v as f64 - lse).collect()
}

#[test]
fn graph_forward_matches_cached_inference() {
    let p = tiny(3);
    let mut rng = rng_from_seed(4);
    let (batch, seq) = (2, 11);
    let ids = random_ids(&mut rng, batch * seq, VOCAB_SIZE as u32);
    let p64 = p.cast::<f64>();
    let mut g = Graph::<f64>::new();
    let pv = bind_params(&mut g, &p64, false).unwrap();
    let logits = forward(&mut g, &pv, &ids, batch, seq).unwrap();
    let got = g.value(logits);
    assert_eq!(got.shape(), &[batch * seq, VOCAB_SIZE]);
    for b in 0..batch {
        let want = forward_logits(&p64, &ids[b * seq..(b + 1) * seq]).unwrap();
        for (x, y) in got.data()[b * seq * VOCAB_SIZE..(b + 1) * seq * VOCAB_SIZE].iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn logits_are_causal() {
    let p = tiny(5);
    let mut rng = rng_from_seed(6);
    for _ in 0..5 {
        let ids = random_ids(&mut rng, 12, VOCAB_SIZE as u32);
        let t = rng.gen_range(1..12);
        let mut changed = ids.clone();
        changed[t] = (changed[t] + 1) % VOCAB_SIZE as u32;
        let (a, b) = (forward_logits(&p, &ids).unwrap(), forward_logits(&p, &changed).unwrap());
        let cut = t * VOCAB_SIZE;
        assert_eq!(&a.data()[..cut], &b.data()[..cut]);
        assert_ne!(&a.data()[cut..], &b.data()[cut..]);
    }
}

#[test]
fn overlong_input_is_a_length_error() {
    let p = tiny(1);
    let ids = vec![1u32; 49];
    assert!(matches!(forward_logits(&p, &ids), Err(daud_core::Error::Length { len: 49, limit: 48 })));
    let budget = GenerationBudget::new(10, EOS);
    assert!(matches!(greedy_decode(&p, &ids[..40], budget), Err(daud_core::Error::Length { .. })));
}

#[test]
fn beam_width_one_is_greedy() {
    let p = tiny(7);
    let mut rng = rng_from_seed(8);
    let budget = GenerationBudget::new(8, EOS);
    for _ in 0..100 {
        let len = rng.gen_range(1..10);
        let prompt = random_ids(&mut rng, len, 256);
        let (g, score) = greedy_with_score(&p, &prompt, budget).unwrap();
        let b = beam_search_decode(&p, &prompt, 1, budget).unwrap();
        assert_eq!(b.tokens, g);
        assert!((b.score - score).abs() < 1e-9);
    }
}

/// Best complete hypothesis by brute force: every sequence of non-stop
/// tokens shorter than the budget followed by the stop token, and every
/// non-stop sequence that exhausts the budget.
fn exhaustive<F: Fn(&[u32]) -> Vec<f32>>(m: &FnModel<F>, prompt: &[u32], budget: GenerationBudget) -> (Vec<u32>, f64) {
    let vocab = m.vocab_size as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut consider = |tokens: Vec<u32>, score: f64| {
        let better = match &best {
            None => true,
            Some((bt, bs)) => score > *bs || (score == *bs && tokens < *bt),
        };
        if better {
            best = Some((tokens, score));
        }
    };
    let mut frontier = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((tokens, score)) = frontier.pop() {
        let mut ctx = prompt.to_vec();
        ctx.extend(&tokens);
        let lp = logsoftmax(&(m.f)(&ctx));
        for v in 0..vocab {
            let s = score + lp[v as usize];
            if v == budget.stop_token {
                consider(tokens.clone(), s);
                continue;
            }
            let mut t = tokens.clone();
            t.push(v);
            if t.len() == budget.max_new_tokens {
                consider(t, s);
            } else {
                frontier.push((t, s));
            }
        }
    }
    best.unwrap()
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    let budget = GenerationBudget::new(3, 2);
    for seed in 0..50 {
        let m = FnModel::new(3, 16, hashed_logits(seed, 3));
        let prompt = [0u32, 1];
        let (tokens, score) = exhaustive(&m, &prompt, budget);
        let h = beam_search_decode(&m, &prompt, 27, budget).unwrap();
        assert_eq!(h.tokens, tokens, "seed {seed}");
        assert!((h.score - score).abs() < 1e-9);
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let budget = GenerationBudget::new(5, 3);
    for seed in 0..50 {
        let m = FnModel::new(5, 16, hashed_logits(seed, 5));
        let (_, g) = greedy_with_score(&m, &[1], budget).unwrap();
        for w in [2, 3, 4] {
            assert!(beam_search_decode(&m, &[1], w, budget).unwrap().score >= g - 1e-12);
        }
    }
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let flat = FnModel::new(4, 16, |_: &[u32]| vec![0.0; 4]);
    assert_eq!(greedy_decode(&flat, &[0], GenerationBudget::new(3, 3)).unwrap(), vec![0, 0, 0]);
    let pair = FnModel::new(4, 16, |_: &[u32]| vec![-1.0, 2.0, 2.0, -1.0]);
    assert_eq!(greedy_decode(&pair, &[0], GenerationBudget::new(2, 3)).unwrap(), vec![1, 1]);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
}

#[test]
fn greedy_stops_at_stop_token_and_omits_it() {
    let m = FnModel::new(4, 16, |ctx: &[u32]| {
        let mut l = vec![0.0; 4];
        l[if ctx.len() >= 3 { 3 } else { 2 }] = 5.0;
        l
    });
    assert_eq!(greedy_decode(&m, &[0], GenerationBudget::new(10, 3)).unwrap(), vec![2, 2]);
}

#[test]
fn zero_budget_and_zero_beam_are_contract_errors() {
    let m = FnModel::new(3, 16, hashed_logits(0, 3));
    assert!(matches!(
        greedy_decode(&m, &[0], GenerationBudget::new(0, 2)),
        Err(daud_core::Error::Contract(_))
    ));
    assert!(matches!(
        beam_search_decode(&m, &[0], 0, GenerationBudget::new(2, 2)),
        Err(daud_core::Error::Contract(_))
    ));
}

#[test]
fn sampling_is_seeded_and_reports_logprobs() {
    let m = FnModel::new(5, 64, hashed_logits(11, 5));
    let budget = GenerationBudget::new(20, 4);
    let a = sample_decode(&m, &[0], budget, &mut rng_from_seed(1)).unwrap();
    let b = sample_decode(&m, &[0], budget, &mut rng_from_seed(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens.len(), a.logprobs.len());
    let mut ctx = vec![0u32];
    for (&t, &lp) in a.tokens.iter().zip(&a.logprobs) {
        assert!((logsoftmax(&(m.f)(&ctx))[t as usize] - lp).abs() < 1e-12);
        ctx.push(t);
    }
}

#[test]
fn sampling_frequencies_follow_the_distribution() {
    let m = FnModel::new(3, 8, |_: &[u32]| vec![0.0, 1.0f32.ln(), 2.0f32.ln()]);
    let budget = GenerationBudget::new(1, 9);
    let mut rng = rng_from_seed(2);
    let mut counts = [0usize; 3];
    let n = 20_000;
    for _ in 0..n {
        counts[sample_decode(&m, &[0], budget, &mut rng).unwrap().tokens[0] as usize] += 1;
    }
    for (c, p) in counts.iter().zip([0.25, 0.25, 0.5]) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{counts:?}");
    }
}

#[test]
fn init_is_seeded() {
    let c = Preset::StudentSmall.config();
    assert_eq!(init_params(c, 9).unwrap().flat(), init_params(c, 9).unwrap().flat());
    assert_ne!(init_params(c, 9).unwrap().flat(), init_params(c, 10).unwrap().flat());
}
