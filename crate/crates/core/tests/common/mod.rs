//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugen_core::model::{batch_loss, init_params, loss_and_grads, ModelConfig, ParamStore};
use ugen_core::prompt::{pack, PackedBatch, SequenceFormat};
use ugen_core::train::{DataConfig, RunConfig, Stage, World};
use ugen_core::vocab::VocabLayout;

/// The 2-layer, d=16 model over the 370-ID layout used for gradient checks.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_hidden: 32,
        max_seq_len: 32,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn layout_370() -> VocabLayout {
    VocabLayout::new(300, 64).unwrap()
}

/// Seeded parameters with norm gains moved away from 1 so that every
/// tensor has a nontrivial gradient.
pub fn rough_params(seed: u64) -> ParamStore<f64> {
    let mut p = init_params(&grad_check_config(), &layout_370(), seed, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let decays: Vec<bool> = p.specs().iter().map(|s| s.decay).collect();
    for (t, decay) in p.tensors_mut().iter_mut().zip(decays) {
        if !decay {
            for g in t.iter_mut() {
                *g = rng.random_range(0.5..1.5);
            }
        }
    }
    p
}

/// Two rows mixing all three sequence kinds, masked visual slots and
/// trailing padding.
pub fn grad_check_batch() -> PackedBatch {
    let l = layout_370();
    let f = SequenceFormat::new(l, 4);
    let seqs = vec![
        f.text(&[5, 17, 200, 299, 17]).unwrap(),
        f.und(&[300, l.mask(), 363, 310], &[40, 41, 42]).unwrap(),
        f.gen(&[7, 8], &[301, 301, l.mask(), 350]).unwrap(),
        f.gen(&[], &[320, 321, 322, 323]).unwrap(),
    ];
    pack(&seqs, 24, &l).unwrap()
}

pub struct GradCheck {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor: central differences of a loss near 6 carry about
/// 1e-11 of rounding noise, so relative error is meaningless below this.
pub const REL_FLOOR: f64 = 1e-6;

/// Central finite differences on every coordinate of every tensor.
pub fn check_all_gradients(params: &ParamStore<f64>, batch: &PackedBatch) -> GradCheck {
    let (_, grads) = loss_and_grads(params, batch).unwrap();
    let mut p = params.clone();
    let mut out = GradCheck {
        coords: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for ti in 0..p.tensors().len() {
        for i in 0..p.tensors()[ti].len() {
            let orig = p.tensors()[ti][i];
            p.tensors_mut()[ti][i] = orig + FD_STEP;
            let up = batch_loss(&p, batch).unwrap().mean();
            p.tensors_mut()[ti][i] = orig - FD_STEP;
            let down = batch_loss(&p, batch).unwrap().mean();
            p.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[ti][i];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR);
            out.coords += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", p.specs()[ti].name);
            }
        }
    }
    out
}

/// A small but complete data world.
pub fn tiny_data() -> DataConfig {
    DataConfig {
        n_images: 300,
        n_sentences: 300,
        codebook_size: 16,
        codebook_patches: 3000,
        eval_samples: 8,
        ..DataConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 32,
        max_seq_len: 128,
        ..ModelConfig::default()
    }
}

pub fn tiny_run(stage: Stage, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::for_stage(stage);
    cfg.model = tiny_model();
    cfg.data = tiny_data();
    cfg.row_len = 128;
    cfg.total_steps = steps;
    cfg.warmup_steps = steps / 10;
    cfg.batch_size = 10;
    cfg.log_every = (steps / 4).max(1);
    cfg.peak_lr = 1e-3;
    cfg.seed = 5;
    cfg
}

pub fn tiny_world(seed: u64) -> World {
    World::build(&tiny_data(), seed).unwrap()
}

pub struct Reference {
    pub losses: Vec<f64>,
    pub params: ParamStore<f32>,
    pub opt: ugen_core::train::OptState<f32>,
}

/// A trainer with no activation state and no masking: mix, pack, step.
pub fn reference_vanilla(cfg: &RunConfig, world: &World) -> Reference {
    use ugen_core::train::{adamw_step, init_seed, lr_at, mix_batch, mix_seed, AdamHyper, OptState};
    let mut params = init_params(&cfg.model, &world.layout, init_seed(cfg.seed), None).unwrap();
    let mut opt = OptState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed));
    let data = world.datasets(cfg.stage);
    let mut losses = Vec::new();
    for step in 1..=cfg.total_steps {
        let batch = mix_batch(cfg, &world.format, data, &mut rng).unwrap();
        let packed = pack(&batch, cfg.row_len, &world.layout).unwrap();
        let (stats, mut grads) = loss_and_grads(&params, &packed).unwrap();
        let lr = lr_at(cfg, step);
        adamw_step(&mut params, &mut grads, &mut opt, lr, cfg.weight_decay, cfg.grad_clip, AdamHyper::of(cfg)).unwrap();
        losses.push(stats.mean());
    }
    Reference { losses, params, opt }
}
