use crate::error::{Error, Result};
use crate::numerics::Real;

/// Hyperparameters for [`AdamState`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.max_grad_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F = f32> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<F: Real> AdamState<F> {
    /// Zero moments congruent with parameters of the given lengths.
    pub fn new(param_lens: &[usize], config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: param_lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<F>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<F>] {
        &self.second_moment
    }

    /// Overwrites the moments; lengths must match the current layout.
    pub fn set_moments(&mut self, step_count: u64, first: Vec<Vec<F>>, second: Vec<Vec<F>>) -> Result<()> {
        let lens = |v: &[Vec<F>]| v.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&first) != lens(&self.first_moment) || lens(&second) != lens(&self.second_moment) {
            return Err(Error::Dimension("moment buffers do not match parameter layout".into()));
        }
        self.step_count = step_count;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }
}

/// One bias-corrected Adam update with optional global-norm clipping.
///
/// A NaN or infinite gradient aborts before anything is modified. When every
/// gradient entry is exactly zero the parameters are left untouched (the
/// moments still decay and the step counter still advances).
pub fn adam_step<F: Real>(params: &mut [&mut [F]], grads: &[&[F]], state: &mut AdamState<F>) -> Result<StepStats> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    let mut sq = 0.0f64;
    let mut all_zero = true;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || g.len() != state.first_moment[i].len() {
            return Err(Error::Dimension(format!(
                "parameter {i}: {} values, {} gradient entries",
                p.len(),
                g.len()
            )));
        }
        for &x in g.iter() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {i}")));
            }
            let x = x.f64();
            all_zero &= x == 0.0;
            sq += x * x;
        }
    }
    let cfg = state.config;
    let grad_norm = sq.sqrt();
    let clip = match cfg.max_grad_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let bc1 = F::of(1.0 - cfg.beta1.powi(t));
    let bc2 = F::of(1.0 - cfg.beta2.powi(t));
    let lr = F::of(cfg.learning_rate);
    let eps = F::of(cfg.epsilon);
    let clip = F::of(clip);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for j in 0..p.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            if !all_zero {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(StepStats {
        grad_norm,
        clipped: clip != F::one(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_moments_is_fixed_point() {
        let mut p = vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        let g = [0.0f32; 3];
        let mut st = AdamState::new(&[3], AdamConfig::default());
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        for g0 in [0.3f64, -0.7, 5.0] {
            let mut p = [1.0f64];
            let cfg = AdamConfig::default();
            let mut st = AdamState::new(&[1], cfg);
            adam_step(&mut [&mut p[..]], &[&[g0][..]], &mut st).unwrap();
            let delta = p[0] - 1.0;
            // m_hat = g', v_hat = g'^2 with g' the clipped gradient, so the
            // step is lr * |g'| / (|g'| + eps).
            let gc = g0.abs().min(1.0);
            let expected = cfg.learning_rate * gc / (gc + cfg.epsilon);
            assert!((delta.abs() - expected).abs() < 1e-15, "{delta} vs {expected}");
            assert_eq!(delta.signum(), -g0.signum());
        }
    }

    #[test]
    fn nan_gradient_leaves_parameters_untouched() {
        let mut p = vec![1.0f32, 2.0];
        let g = [0.1f32, f32::NAN];
        let mut st = AdamState::new(&[2], AdamConfig::default());
        let err = adam_step(&mut [&mut p[..]], &[&g[..]], &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping_reports_pre_clip_norm() {
        let mut p = [0.0f64; 2];
        let mut st = AdamState::new(&[2], AdamConfig::default());
        let s = adam_step(&mut [&mut p[..]], &[&[3.0, 4.0][..]], &mut st).unwrap();
        assert!((s.grad_norm - 5.0).abs() < 1e-12);
        assert!(s.clipped);
        // first-moment buffer holds (1 - beta1) times the clipped gradient
        assert!((st.first_moment()[0][0] - 0.1 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = [0.0f32; 2];
        let mut st = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0f32][..]], &mut st).is_err());
    }
}
