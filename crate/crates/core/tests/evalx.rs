mod common;

use common::*;
use ugen_core::evalx::{
    compare_three_way, evaluate, gen_score, perplexity, sweep_activation, sweep_vocab, to_csv, EvalOptions,
    COMPARE_NAMES,
};
use ugen_core::infer::SamplingConfig;
use ugen_core::model::{init_params, loss_and_grads};
use ugen_core::prompt::pack;
use ugen_core::train::{adamw_step, run_stage, AdamHyper, OptState, PromptStyle, Stage, StageInit, World};
use ugen_core::vocab::{Activation, ActivationState};

fn opts() -> EvalOptions {
    EvalOptions {
        n_und: 3,
        n_gen: 3,
        caption_tokens: 24,
        sampling: SamplingConfig {
            seed: 4,
            ..SamplingConfig::default()
        },
    }
}

#[test]
fn single_k_sweep_equals_direct_run() {
    let mut cfg = tiny_run(Stage::UnifiedPretrain, 12);
    cfg.activation = Activation::period(2).unwrap();
    let rows = sweep_vocab(&cfg, &[16], None).unwrap();
    assert_eq!(rows.len(), 1);
    let mut direct = cfg.clone();
    direct.activation = Activation::Immediate;
    let world = World::build(&direct.data, direct.seed).unwrap();
    let out = run_stage(&direct, &world, StageInit::Scratch, None).unwrap();
    assert_eq!(rows[0].final_ppl.to_bits(), out.metrics.last().unwrap().ppl.to_bits());
}

#[test]
fn vocab_sweep_shares_the_corpus_and_writes_reports() {
    let cfg = tiny_run(Stage::UnifiedPretrain, 6);
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_vocab(&cfg, &[8, 16, 32], Some(dir.path())).unwrap();
    assert_eq!(rows.iter().map(|r| r.codebook_size).collect::<Vec<_>>(), vec![8, 16, 32]);
    assert!(rows.windows(2).all(|w| w[0].corpus_digest == w[1].corpus_digest));
    let csv = std::fs::read_to_string(dir.path().join("sweep_vocab.csv")).unwrap();
    assert_eq!(csv, to_csv(&rows));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep_vocab.jsonl")).unwrap().lines().count(), 3);
    assert!(dir.path().join("k16-seed5").join("metrics.jsonl").exists());
    assert!(sweep_vocab(&cfg, &[], None).is_err());
}

#[test]
fn activation_sweep_flags_and_baseline() {
    let cfg = tiny_run(Stage::UnifiedPretrain, 12);
    let world = World::build(&cfg.data, cfg.seed).unwrap();
    // 16 visual IDs at k = 1 finish by step 16 > 12; k = 100 never finishes
    let speeds = [Activation::period(100).unwrap(), Activation::Immediate];
    let rows = sweep_activation(&cfg, &speeds, &StageInit::Scratch, &opts(), None).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].incomplete_activation);
    assert!(!rows[1].incomplete_activation);
    assert!(rows.windows(2).all(|w| w[0].data_digest == w[1].data_digest));
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.score));
    }

    let alone = sweep_activation(&cfg, &[Activation::Immediate], &StageInit::Scratch, &opts(), None).unwrap();
    let mut vanilla = cfg.clone();
    vanilla.activation = Activation::Immediate;
    let out = run_stage(&vanilla, &world, StageInit::Scratch, None).unwrap();
    assert_eq!(alone[0].final_ppl.to_bits(), out.metrics.last().unwrap().ppl.to_bits());
    assert_eq!(alone[0].metrics, rows[1].metrics);
    assert_eq!(alone[0].score, 1.0);
}

#[test]
fn three_way_table_schema_and_vanilla_row() {
    let cfg = tiny_run(Stage::UnifiedPretrain, 8);
    let progressive = Activation::period(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = compare_three_way(&cfg, progressive, &StageInit::Scratch, &opts(), Some(dir.path())).unwrap();
    assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), COMPARE_NAMES);
    let present = |r: &ugen_core::evalx::CompareRow| [r.text_ppl.is_some(), r.und_accuracy.is_some(), r.gen_overall.is_some()];
    assert_eq!(present(&rows[0]), [true, false, false]);
    assert_eq!(present(&rows[1]), [false, true, false]);
    assert_eq!(present(&rows[2]), [false, false, true]);
    assert_eq!(present(&rows[3]), [true, true, true]);
    assert_eq!(present(&rows[4]), [true, true, true]);
    assert!(rows[..3].iter().all(|r| r.text_delta_pct.is_none() && r.gen_delta_pct.is_none()));
    let csv = to_csv(&rows);
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().contains(",-,"));

    // the vanilla row against an independently launched immediate run
    let world = World::build(&cfg.data, cfg.seed).unwrap();
    let mut vanilla = cfg.clone();
    vanilla.activation = Activation::Immediate;
    let out = run_stage(&vanilla, &world, StageInit::Scratch, None).unwrap();
    let report = evaluate(&out.checkpoint, &vanilla, &world, &opts()).unwrap();
    assert_eq!(rows[3].text_ppl.unwrap().to_bits(), report.text_ppl.to_bits());
    assert_eq!(rows[3].und_accuracy, Some(report.und_accuracy));
    assert_eq!(rows[3].gen_overall, Some(report.gen_score.overall));
    let saved = ugen_core::model::Checkpoint::load(&dir.path().join("vanilla-seed5").join("final.ugck")).unwrap();
    assert_eq!(saved.params, out.checkpoint.params);
}

#[test]
fn report_ranges_and_bitwise_gen_score() {
    let cfg = tiny_run(Stage::UnifiedPretrain, 10);
    let world = World::build(&cfg.data, cfg.seed).unwrap();
    let out = run_stage(&cfg, &world, StageInit::Scratch, None).unwrap();
    let r = evaluate(&out.checkpoint, &cfg, &world, &opts()).unwrap();
    for p in [r.text_ppl, r.und_ppl, r.gen_ppl] {
        assert!(p >= 1.0);
    }
    let g = r.gen_score;
    for f in [r.und_accuracy, g.overall, g.object, g.color, g.count, g.position] {
        assert!((0.0..=1.0).contains(&f));
    }
    assert_eq!(g.n, 3);
    assert_eq!(r.config_digest, cfg.digest());
    let act = ActivationState::from_snapshot(world.layout, &out.checkpoint.activation.unwrap()).unwrap();
    let s = opts().sampling;
    let a = gen_score(&out.checkpoint.params, &world, &act, PromptStyle::Plain, 5, &s).unwrap();
    let b = gen_score(&out.checkpoint.params, &world, &act, PromptStyle::Plain, 5, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn memorizer_perplexity_approaches_one() {
    let world = tiny_world(8);
    let cfg = tiny_run(Stage::UnifiedPretrain, 1);
    let seq = world.pretrain.gen[0].clone();
    let act = ActivationState::new(world.layout, Activation::Immediate, 0);
    let mut p = init_params(&cfg.model, &world.layout, 1, None).unwrap();
    let mut opt = OptState::new(&p);
    let packed = pack(std::slice::from_ref(&seq), cfg.row_len, &world.layout).unwrap();
    let before = perplexity(&p, std::slice::from_ref(&seq), None, &act, cfg.row_len).unwrap();
    for _ in 0..300 {
        let (_, mut g) = loss_and_grads(&p, &packed).unwrap();
        adamw_step(&mut p, &mut g, &mut opt, 1e-2, 0.0, 1.0, AdamHyper::default()).unwrap();
    }
    let after = perplexity(&p, std::slice::from_ref(&seq), None, &act, cfg.row_len).unwrap();
    assert!(before > 10.0 && after < 1.05, "{before} -> {after}");
}
