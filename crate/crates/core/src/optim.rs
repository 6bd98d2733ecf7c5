//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{l2_norm, NamedParams, ParamView};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at coordinate {index} ({name})")]
    NonFinite { index: usize, name: String },
    #[error("optimizer state has {state} coordinates, parameters have {params}")]
    Mismatch { state: usize, params: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 1.0, clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// 1 where decoupled decay applies.
    decay_mask: Vec<bool>,
}

fn name_at(view: &ParamView, index: usize) -> String {
    view.entries().find(|e| e.range().contains(&index)).map(|e| e.name.clone()).unwrap_or_default()
}

/// Scales `grads` in place so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global(grads: &mut NamedParams<f32>, max_norm: f64) -> Result<f64, OptimError> {
    if let Some(index) = grads.flat().iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite { index, name: name_at(grads.view(), index) });
    }
    let norm = l2_norm(grads.flat());
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.flat_mut().iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}

impl OptState {
    pub fn new(config: AdamWConfig, view: &ParamView) -> Self {
        let n = view.total_len();
        let mut decay_mask = vec![false; n];
        for e in view.entries() {
            if e.role.decays() {
                decay_mask[e.range()].fill(true);
            }
        }
        OptState { config, step: 0, m: vec![0.0; n], v: vec![0.0; n], decay_mask }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One AdamW update with already clipped gradients: decay
    /// `θ ← θ − η·λ·θ` on matrices and embeddings, then the bias-corrected
    /// Adam step.
    pub fn step(&mut self, params: &mut NamedParams<f32>, grads: &NamedParams<f32>) -> Result<(), OptimError> {
        let n = params.flat().len();
        if self.m.len() != n || grads.flat().len() != n {
            return Err(OptimError::Mismatch { state: self.m.len(), params: n });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        let theta = params.flat_mut();
        for i in 0..n {
            let g = grads.flat()[i];
            let m = b1 * self.m[i] + (1.0 - b1) * g;
            let v = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let mut p = theta[i];
            if self.decay_mask[i] {
                p *= decay;
            }
            theta[i] = p - step_size * m / (v.sqrt() / bc2_sqrt + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::params::ParamRole;

    fn scalar_view(role: ParamRole) -> Arc<ParamView> {
        Arc::new(ParamView::builder().add("w", &[1], role).build())
    }

    #[test]
    fn clip_examples() {
        let view = Arc::new(ParamView::builder().add("a", &[2], ParamRole::Mlp).build());
        let mut g = NamedParams::from_flat(view.clone(), vec![3.0, 4.0]);
        assert_eq!(clip_global(&mut g, 1.0).unwrap(), 5.0);
        assert!((g.flat()[0] - 0.6).abs() < 1e-7 && (g.flat()[1] - 0.8).abs() < 1e-7);

        let mut small = NamedParams::from_flat(view.clone(), vec![0.3, 0.4]);
        clip_global(&mut small, 1.0).unwrap();
        assert_eq!(small.flat(), &[0.3, 0.4]);

        let mut big = NamedParams::from_flat(view, vec![0.0, 4.0]);
        clip_global(&mut big, 1.0).unwrap();
        assert!((big.norm() - 1.0).abs() < 1e-7);
        assert_eq!(big.flat()[1], 1.0);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let view = Arc::new(ParamView::builder().add("a", &[1], ParamRole::Mlp).add("b", &[2], ParamRole::Bias).build());
        let mut g = NamedParams::from_flat(view, vec![1.0, 0.0, f32::NAN]);
        assert_eq!(clip_global(&mut g, 1.0), Err(OptimError::NonFinite { index: 2, name: "b".into() }));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let view = scalar_view(ParamRole::Mlp);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = OptState::new(cfg, &view);
        let mut p = NamedParams::from_flat(view.clone(), vec![0.5]);
        st.step(&mut p, &NamedParams::from_flat(view, vec![1.0])).unwrap();
        assert!((p.flat()[0] - (0.5 - 1e-3)).abs() < 1e-7, "{}", p.flat()[0]);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let view = Arc::new(ParamView::builder().add("w", &[2], ParamRole::Attention).add("ln.g", &[2], ParamRole::Norm).build());
        let mut st = OptState::new(AdamWConfig::default(), &view);
        let mut p = NamedParams::from_flat(view.clone(), vec![1.0, -2.0, 1.0, 3.0]);
        let zero = NamedParams::zeros(view);
        let mut expect = 1.0f32;
        for _ in 0..10 {
            st.step(&mut p, &zero).unwrap();
            expect *= 1.0 - 1e-3;
        }
        assert!((p.flat()[0] - expect).abs() < 1e-6);
        assert!((p.flat()[1] + 2.0 * expect).abs() < 1e-6);
        assert_eq!(&p.flat()[2..], &[1.0, 3.0]);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // f(w) = 0.5 * sum(a_i w_i^2)
        let a = [1.0f32, 4.0, 0.25, 2.0];
        let view = Arc::new(ParamView::builder().add("w", &[4], ParamRole::Mlp).build());
        let f = |w: &[f32]| w.iter().zip(&a).map(|(w, a)| 0.5 * a * w * w).sum::<f32>();
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = OptState::new(cfg, &view);
        let mut p = NamedParams::from_flat(view.clone(), vec![1.0, -1.0, 2.0, 0.5]);
        let start = f(p.flat());
        for _ in 0..100 {
            let g: Vec<f32> = p.flat().iter().zip(&a).map(|(w, a)| a * w).collect();
            let mut g = NamedParams::from_flat(view.clone(), g);
            clip_global(&mut g, 1.0).unwrap();
            st.step(&mut p, &g).unwrap();
        }
        assert!(f(p.flat()) < start);
    }

    #[test]
    fn steps_are_deterministic() {
        let view = Arc::new(ParamView::builder().add("w", &[3], ParamRole::Head).build());
        let run = || {
            let mut st = OptState::new(AdamWConfig::default(), &view);
            let mut p = NamedParams::from_flat(view.clone(), vec![0.1, 0.2, 0.3]);
            for k in 0..5 {
                let g = NamedParams::from_flat(view.clone(), vec![0.3 * k as f32, -0.1, 0.7]);
                st.step(&mut p, &g).unwrap();
            }
            (p.into_flat(), st.m, st.v)
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn clip_is_idempotent(v in proptest::collection::vec(-100f32..100f32, 1..20), c in 0.1f64..10.0) {
            let view = Arc::new(ParamView::builder().add("w", &[v.len()], ParamRole::Mlp).build());
            let mut once = NamedParams::from_flat(view, v);
            clip_global(&mut once, c).unwrap();
            let mut twice = once.clone();
            clip_global(&mut twice, c).unwrap();
            for (a, b) in once.flat().iter().zip(twice.flat()) {
                proptest::prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }
}
