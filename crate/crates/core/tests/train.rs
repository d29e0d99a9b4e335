mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ugen_core::evalx::{perplexity, recompute_ppl, trajectory};
use ugen_core::model::{batch_loss, loss_and_grads, Checkpoint};
use ugen_core::prompt::{pack, Modality, UnifiedSequence};
use ugen_core::train::{
    checkpoint_name, mix_batch, read_metrics, run_stage, Stage, StageInit, Trainer, FINAL_CHECKPOINT, METRICS_FILE,
};
use ugen_core::vocab::{mask_sequence, Activation, ActivationState};
use ugen_core::Error;

#[test]
fn immediate_activation_equals_masking_free_loop() {
    let world = tiny_world(1);
    let mut cfg = tiny_run(Stage::UnifiedPretrain, 200);
    cfg.activation = Activation::Immediate;
    cfg.log_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(&cfg, &world, StageInit::Scratch, Some(dir.path())).unwrap();
    let reference = reference_vanilla(&cfg, &world);

    let logged: Vec<u64> = read_metrics(&dir.path().join(METRICS_FILE))
        .unwrap()
        .iter()
        .map(|r| r.loss_total.to_bits())
        .collect();
    let want: Vec<u64> = reference.losses.iter().map(|l| l.to_bits()).collect();
    assert_eq!(logged, want);
    let saved = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(saved.params, reference.params);
    assert_eq!(out.checkpoint.params, reference.params);
    let m = saved.moments.unwrap();
    assert_eq!((m.step, &m.m, &m.v), (reference.opt.step, &reference.opt.m, &reference.opt.v));
}

#[test]
fn modality_counts_are_exact_every_step() {
    let world = tiny_world(2);
    let mut cfg = tiny_run(Stage::UnifiedPretrain, 1000);
    cfg.data_ratio = [3, 2, 5];
    cfg.batch_size = 10;
    let mut t = Trainer::new(&cfg, &world, StageInit::Scratch).unwrap();
    for _ in 0..1000 {
        assert_eq!(t.train_step().unwrap().counts, [3, 2, 5]);
    }
}

#[test]
fn never_activated_rows_get_no_gradient() {
    let world = tiny_world(3);
    let mut cfg = tiny_run(Stage::UnifiedPretrain, 30);
    cfg.activation = Activation::period(1_000_000).unwrap();
    let l = world.layout;
    let d = cfg.model.d_model;
    let mut t = Trainer::new(&cfg, &world, StageInit::Scratch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let visual_rows = 0..l.visual_size() * d;
    for _ in 0..30 {
        t.train_step().unwrap();
        assert_eq!(t.act.activated_count(), 0);
        let batch = mix_batch(&cfg, &world.format, world.datasets(cfg.stage), &mut rng).unwrap();
        let masked: Vec<UnifiedSequence> = batch.iter().map(|s| mask_sequence(s, &t.act).unwrap()).collect();
        assert!(masked.iter().flat_map(|s| &s.ids).all(|&id| !l.is_visual(id)));
        let (_, grads) = loss_and_grads(&t.params, &pack(&masked, cfg.row_len, &l).unwrap()).unwrap();
        let g = grads.tensor("aux_embed").unwrap();
        assert!(g[visual_rows.clone()].iter().all(|&x| x == 0.0));
        assert!(g[visual_rows.end..].iter().any(|&x| x != 0.0));
    }
    let fin = run_stage(&cfg, &world, StageInit::Scratch, None).unwrap();
    assert_eq!(fin.checkpoint.activation.unwrap().activated, 0);
}

#[test]
fn perplexity_is_exp_of_training_loss() {
    let world = tiny_world(4);
    let cfg = tiny_run(Stage::UnifiedPretrain, 10);
    let out = run_stage(&cfg, &world, StageInit::Scratch, None).unwrap();
    let act = ActivationState::from_snapshot(world.layout, &out.checkpoint.activation.unwrap()).unwrap();
    let seqs: Vec<UnifiedSequence> = Modality::ALL
        .iter()
        .flat_map(|&m| world.held_out.get(m).iter().take(5).cloned())
        .collect();
    let masked: Vec<UnifiedSequence> = seqs.iter().map(|s| mask_sequence(s, &act).unwrap()).collect();
    let packed = pack(&masked, cfg.row_len, &world.layout).unwrap();
    let (train_stats, _) = loss_and_grads(&out.checkpoint.params, &packed).unwrap();
    let ppl = perplexity(&out.checkpoint.params, &seqs, None, &act, cfg.row_len).unwrap();
    assert!((ppl - train_stats.mean().exp()).abs() <= 1e-6 * ppl);

    let gen_only: Vec<UnifiedSequence> = masked.iter().filter(|s| s.kind.modality() == Some(Modality::Gen)).cloned().collect();
    let gen_loss = batch_loss(&out.checkpoint.params, &pack(&gen_only, cfg.row_len, &world.layout).unwrap()).unwrap();
    let gen_ppl = perplexity(&out.checkpoint.params, &seqs, Some(Modality::Gen), &act, cfg.row_len).unwrap();
    assert!((gen_ppl - gen_loss.mean().exp()).abs() <= 1e-6 * gen_ppl);

    let text_only = &seqs[..5];
    let err = perplexity(&out.checkpoint.params, text_only, Some(Modality::Und), &act, cfg.row_len).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn trajectory_matches_checkpoint_recomputation() {
    let world = tiny_world(5);
    let mut cfg = tiny_run(Stage::UnifiedPretrain, 40);
    cfg.activation = Activation::period(1).unwrap();
    cfg.log_every = 10;
    cfg.checkpoint_every = 10;
    let dir = tempfile::tempdir().unwrap();
    run_stage(&cfg, &world, StageInit::Scratch, Some(dir.path())).unwrap();
    let points = trajectory(dir.path()).unwrap();
    assert_eq!(points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    for p in &points {
        let ckpt = Checkpoint::load(&dir.path().join(checkpoint_name(p.step))).unwrap();
        let ppl = recompute_ppl(&ckpt, &cfg, &world).unwrap();
        assert!((ppl - p.ppl).abs() <= 1e-4 * p.ppl, "step {}: {ppl} vs {}", p.step, p.ppl);
    }
}

#[test]
fn staged_pipeline_warm_starts_and_continues() {
    let world = tiny_world(6);
    let text_cfg = {
        let mut c = tiny_run(Stage::TextPretrain, 20);
        c.data_ratio = [1, 0, 0];
        c
    };
    let text = run_stage(&text_cfg, &world, StageInit::Scratch, None).unwrap();
    assert!(text.metrics.iter().all(|r| r.loss_und.is_none() && r.loss_gen.is_none()));
    let uni_cfg = tiny_run(Stage::UnifiedPretrain, 20);
    let warm = Trainer::new(&uni_cfg, &world, StageInit::WarmText(text.checkpoint.params.clone())).unwrap();
    assert_eq!(warm.params.text_embed(), text.checkpoint.params.text_embed());
    let uni = run_stage(&uni_cfg, &world, StageInit::WarmText(text.checkpoint.params), None).unwrap();
    let sft_cfg = tiny_run(Stage::Sft, 10);
    let cont = Trainer::new(&sft_cfg, &world, StageInit::Continue(uni.checkpoint.params.clone())).unwrap();
    assert_eq!(cont.params, uni.checkpoint.params);
    assert_eq!(cont.opt.step, 0);
    let sft = run_stage(&sft_cfg, &world, StageInit::Continue(uni.checkpoint.params), None).unwrap();
    assert_eq!(sft.checkpoint.stage, "sft");
}
