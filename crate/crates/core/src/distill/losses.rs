//! Training objectives over student logits `[rows, vocab]`.
//!
//! Row `i` of the logits predicts `targets[i]`; `mask[i]` selects the rows
//! that count (response and EOS positions). Every loss is a masked mean.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

fn normalized(mask: &[f32]) -> Result<Vec<f64>> {
    let total: f64 = mask.iter().map(|&m| m as f64).sum();
    if !(total > 0.0) {
        return Err(Error::Contract("loss mask selects no positions".into()));
    }
    Ok(mask.iter().map(|&m| m as f64 / total).collect())
}

/// Mean negative log-likelihood of the gold tokens on masked rows.
pub fn sft_loss<F: Real>(g: &mut Graph<F>, logits: Var, targets: &[u32], mask: &[f32]) -> Result<Var> {
    let w: Vec<F> = normalized(mask)?.into_iter().map(F::of).collect();
    g.weighted_nll(logits, targets, &w)
}

/// Mean cross-entropy `H(q, p)` between the temperature-softened teacher
/// distribution `q` and student distribution `p`. The teacher logits are
/// constants; the result is not rescaled by `tau^2`.
pub fn word_kd_loss<F: Real>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logits: &[F],
    mask: &[f32],
    tau: f64,
) -> Result<Var> {
    let (rows, v) = g.value(student_logits).dims2()?;
    if teacher_logits.len() != rows * v || mask.len() != rows {
        return Err(Error::Dimension(format!(
            "student logits {rows}x{v}, teacher {} values, mask {}",
            teacher_logits.len(),
            mask.len()
        )));
    }
    let w: Vec<F> = normalized(mask)?.into_iter().map(F::of).collect();
    g.soft_cross_entropy(student_logits, teacher_logits, &w, F::of(tau))
}

/// `alpha * word_kd_loss + (1 - alpha) * sft_loss`.
#[allow(clippy::too_many_arguments)]
pub fn mixed_wordkd_loss<F: Real>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logits: &[F],
    targets: &[u32],
    mask: &[f32],
    alpha: f64,
    tau: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("word-KD mixture weight {alpha} outside [0, 1]")));
    }
    let kd = word_kd_loss(g, student_logits, teacher_logits, mask, tau)?;
    let nll = sft_loss(g, student_logits, targets, mask)?;
    let kd = g.scale(kd, F::of(alpha))?;
    let nll = g.scale(nll, F::of(1.0 - alpha))?;
    g.add(kd, nll)
}

/// Entropy of `softmax(logits / tau)` averaged over masked rows.
pub fn masked_entropy(logits: &[f64], vocab: usize, mask: &[f32], tau: f64) -> f64 {
    let total: f64 = mask.iter().map(|&m| m as f64).sum();
    let mut h = 0.0;
    for (row, &m) in logits.chunks(vocab).zip(mask) {
        if m == 0.0 {
            continue;
        }
        let z: Vec<f64> = row.iter().map(|x| x / tau).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        h += m as f64 * z.iter().map(|x| -(x - lse).exp() * (x - lse)).sum::<f64>();
    }
    h / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn logits(g: &mut Graph<f64>, rows: usize, v: usize, f: impl Fn(usize) -> f64) -> Var {
        let t = Tensor::from_fn(&[rows, v], f).unwrap();
        g.param(t).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::new();
        let z = logits(&mut g, 3, 260, |_| 0.7);
        let l = sft_loss(&mut g, z, &[1, 2, 3], &[1.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l).item().unwrap() - 260f64.ln()).abs() < 1e-12);
        assert!((260f64.ln() - 5.5607).abs() < 1e-4);
    }

    #[test]
    fn near_delta_logits_give_near_zero() {
        let mut g = Graph::new();
        let targets = [4u32, 0];
        let z = logits(&mut g, 2, 6, |i| if i % 6 == targets[i / 6] as usize { 20.0 } else { 0.0 });
        let l = sft_loss(&mut g, z, &targets, &[1.0, 1.0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-6);
    }

    #[test]
    fn hand_computed_two_positions() {
        // row 0: logits [0, ln 3] target 1 -> p = 3/4
        // row 1: logits [ln 2, 0] target 1 -> p = 1/3
        let vals = [0.0, 3f64.ln(), 2f64.ln(), 0.0];
        let mut g = Graph::new();
        let z = logits(&mut g, 2, 2, |i| vals[i]);
        let l = sft_loss(&mut g, z, &[1, 1], &[1.0, 1.0]).unwrap();
        let expected = -0.5 * ((0.75f64).ln() + (1.0f64 / 3.0).ln());
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_contract_error() {
        let mut g = Graph::new();
        let z = logits(&mut g, 2, 3, |_| 0.0);
        assert!(matches!(sft_loss(&mut g, z, &[0, 0], &[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn mixture_weight_out_of_range() {
        let mut g = Graph::new();
        let z = logits(&mut g, 1, 3, |_| 0.0);
        let r = mixed_wordkd_loss(&mut g, z, &[0.0; 3], &[0], &[1.0], 1.5, 1.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
