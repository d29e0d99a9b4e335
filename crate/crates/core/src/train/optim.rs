use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ParamStore, Scalar};

use super::RunConfig;

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to `peak_lr * lr_floor_ratio` at `total_steps`.
pub fn lr_at(cfg: &RunConfig, t: u64) -> f64 {
    let t = t.min(cfg.total_steps);
    if t <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * t as f64 / cfg.warmup_steps as f64;
    }
    let floor = cfg.peak_lr * cfg.lr_floor_ratio;
    let progress = (t - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// AdamW moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub step: u64,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Scalar> OptState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected AdamW update of a flat tensor at step `t` (1-based),
/// with decoupled decay `p -= lr * wd * p`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Scalar>(p: &mut [F], g: &[F], m: &mut [F], v: &mut [F], t: u64, lr: f64, wd: f64, h: AdamHyper) {
    let b1 = F::of(h.beta1);
    let b2 = F::of(h.beta2);
    let c1 = F::of(1.0 - h.beta1.powi(t as i32));
    let c2 = F::of(1.0 - h.beta2.powi(t as i32));
    let lr_f = F::of(lr);
    let decay = F::of(lr * wd);
    let eps = F::of(h.eps);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (F::one() - b1) * g[i];
        v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] = p[i] - decay * p[i] - lr_f * mh / (vh.sqrt() + eps);
    }
}

/// L2 norm over every gradient element, accumulated in f64.
pub fn global_norm<F: Scalar>(grads: &ParamStore<F>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rejects non-finite gradients, naming the first offending tensor.
pub fn check_finite<F: Scalar>(grads: &ParamStore<F>) -> Result<()> {
    for (ts, t) in grads.specs().iter().zip(grads.tensors()) {
        if let Some(index) = t.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: ts.name.clone(),
                index,
            });
        }
    }
    Ok(())
}

/// Scales gradients so their global norm is at most `clip`. Returns the
/// norm before clipping.
pub fn clip_grads<F: Scalar>(grads: &mut ParamStore<F>, clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let s = F::of(clip / norm);
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g = *g * s;
            }
        }
    }
    norm
}

/// Clip, then AdamW over every tensor; decay only on tensors flagged
/// for it. Returns the pre-clip gradient norm.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &mut ParamStore<F>,
    opt: &mut OptState<F>,
    lr: f64,
    weight_decay: f64,
    clip: f64,
    h: AdamHyper,
) -> Result<f64> {
    if !grads.same_shape(params) || !opt.m.same_shape(params) || !opt.v.same_shape(params) {
        return Err(Error::invalid("optimizer shapes do not match the parameters"));
    }
    check_finite(grads)?;
    let norm = clip_grads(grads, clip);
    opt.step += 1;
    let decay: Vec<bool> = params.specs().iter().map(|s| s.decay).collect();
    let g = grads.tensors();
    let (m, v) = (opt.m.tensors_mut(), opt.v.tensors_mut());
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let wd = if decay[i] { weight_decay } else { 0.0 };
        adamw_update(p, &g[i], &mut m[i], &mut v[i], opt.step, lr, wd, h);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::train::Stage;
    use crate::vocab::VocabLayout;

    #[test]
    fn schedule_points() {
        let mut cfg = RunConfig::for_stage(Stage::UnifiedPretrain);
        cfg.warmup_steps = 100;
        cfg.total_steps = 1100;
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 100), cfg.peak_lr);
        assert!((lr_at(&cfg, 1100) - cfg.peak_lr / 10.0).abs() < 1e-18);
        let mid = 600;
        let want = 1e-5 + (1e-4 - 1e-5) * 0.5 * (1.0 + (PI * 0.5).cos());
        assert!((lr_at(&cfg, mid) - want).abs() < 1e-18);
    }

    #[test]
    fn scalar_two_steps() {
        let h = AdamHyper::default();
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let (lr, wd) = (0.1, 0.01);
        adamw_update(&mut p, &[0.5], &mut m, &mut v, 1, lr, wd, h);
        adamw_update(&mut p, &[-0.25], &mut m, &mut v, 2, lr, wd, h);

        let mut pe = 1.0f64;
        let (mut me, mut ve) = (0.0, 0.0);
        for (t, g) in [(1, 0.5f64), (2, -0.25)] {
            me = 0.9 * me + 0.1 * g;
            ve = 0.95 * ve + 0.05 * g * g;
            let mh = me / (1.0 - 0.9f64.powi(t));
            let vh = ve / (1.0 - 0.95f64.powi(t));
            pe = pe - lr * wd * pe - lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - pe).abs() < 1e-15, "{} vs {pe}", p[0]);
    }

    fn store() -> ParamStore<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_hidden: 8,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        init_params(&cfg, &VocabLayout::new(256, 2).unwrap(), 1, None).unwrap()
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut p = store();
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut opt = OptState::new(&p);
        adamw_step(&mut p, &mut g, &mut opt, 1e-3, 0.0, 1.0, AdamHyper::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_scales_exactly() {
        let p = store();
        let mut g = p.zeros_like();
        g.tensors_mut()[0][0] = 6.0;
        g.tensors_mut()[1][3] = 8.0;
        let original = g.clone();
        let norm = clip_grads(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        for (a, b) in g.tensors().iter().flatten().zip(original.tensors().iter().flatten()) {
            assert_eq!(*a, b * 0.1);
        }
        assert!(global_norm(&g) <= 1.0 + 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = store();
        let mut g = p.zeros_like();
        g.tensors_mut()[2][1] = f64::NAN;
        let mut opt = OptState::new(&p);
        let err = adamw_step(&mut p, &mut g, &mut opt, 1e-3, 0.0, 1.0, AdamHyper::default()).unwrap_err();
        assert!(err.to_string().contains("layers.0.attn_norm"), "{err}");
        assert_eq!(opt.step, 0);
    }
}
