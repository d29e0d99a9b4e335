mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugen_core::model::{batch_loss, forward_row, init_params, Checkpoint, ModelConfig, ParamStore};
use ugen_core::prompt::{pack, SequenceFormat};
use ugen_core::vocab::{TokenId, VocabLayout};

#[test]
fn every_gradient_matches_finite_differences() {
    let params = rough_params(3);
    let r = check_all_gradients(&params, &grad_check_batch());
    assert_eq!(r.coords, params.num_params());
    assert!(r.max_rel_err < 1e-4, "max relative error {:e} at {}", r.max_rel_err, r.worst);
}

#[test]
fn tied_head_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..grad_check_config()
    };
    let params: ParamStore<f64> = init_params(&cfg, &layout_370(), 4, None).unwrap();
    let r = check_all_gradients(&params, &grad_check_batch());
    assert!(r.max_rel_err < 1e-4, "max relative error {:e} at {}", r.max_rel_err, r.worst);
}

fn logits_of(params: &ParamStore<f64>, ids: &[TokenId], blocks: &[usize]) -> Vec<f64> {
    forward_row(params, ids, blocks).unwrap().into_logits()
}

#[test]
fn logits_are_causal() {
    let params = rough_params(5);
    let v = layout_370().total_size();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(2..=32);
        let ids: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let cut = rng.random_range(0..n - 1);
        let mut changed = ids.clone();
        for id in &mut changed[cut + 1..] {
            *id = rng.random_range(0..v as u32);
        }
        let blocks = vec![0; n];
        let (a, b) = (logits_of(&params, &ids, &blocks), logits_of(&params, &changed, &blocks));
        assert_eq!(a[..(cut + 1) * v], b[..(cut + 1) * v]);
    }
}

#[test]
fn first_position_ignores_context_window() {
    let l = layout_370();
    let mut short = grad_check_config();
    short.max_seq_len = 4;
    let long = ModelConfig {
        max_seq_len: 64,
        ..short
    };
    let a: ParamStore<f64> = init_params(&short, &l, 2, None).unwrap();
    let b: ParamStore<f64> = init_params(&long, &l, 2, None).unwrap();
    assert_eq!(logits_of(&a, &[l.sos()], &[0]), logits_of(&b, &[l.sos()], &[0]));
}

fn sample_logits(params: &ParamStore<f64>, row: &[TokenId], blocks: &[usize], start: usize, len: usize) -> Vec<f64> {
    let v = params.layout().total_size();
    logits_of(params, row, blocks)[start * v..(start + len) * v].to_vec()
}

#[test]
fn co_packed_samples_are_isolated() {
    let l = layout_370();
    let f = SequenceFormat::new(l, 4);
    let params = rough_params(6);
    let a = f.und(&[300, 301, 302, 303], &[9, 10, 11]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alone = logits_of(&params, &a.ids, &vec![0; a.len()]);
    for _ in 0..10 {
        let x: Vec<TokenId> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..300)).collect();
        let y: Vec<TokenId> = (0..4).map(|_| rng.random_range(300..364)).collect();
        let b = f.gen(&x, &y).unwrap();
        let batch = pack(&[a.clone(), b.clone()], 32, &l).unwrap();
        let row = &batch.rows[0];
        let span = row.samples.iter().find(|s| row.ids[s.start..s.start + s.len] == a.ids[..]).unwrap();
        let got = sample_logits(&params, &row.ids, &row.block_starts(), span.start, span.len);
        assert_eq!(got, alone);

        // a placed after b, so its positions restart mid-row
        let mut ids = b.ids.clone();
        ids.extend_from_slice(&a.ids);
        let mut blocks = vec![0; b.len()];
        blocks.extend(std::iter::repeat_n(b.len(), a.len()));
        assert_eq!(sample_logits(&params, &ids, &blocks, b.len(), a.len()), alone);
    }
}

#[test]
fn uniform_and_saturated_losses() {
    let l = layout_370();
    let f = SequenceFormat::new(l, 4);
    let batch = pack(&[f.text(&[1, 2, 3]).unwrap(), f.gen(&[4], &[300, 301, 302, 303]).unwrap()], 16, &l).unwrap();
    let zero: ParamStore<f64> = ParamStore::zeros(grad_check_config(), l).unwrap();
    let s = batch_loss(&zero, &batch).unwrap();
    assert!((s.mean() - 370f64.ln()).abs() <= 1e-6 * 370f64.ln());
    assert!((s.mean().exp() - 370.0).abs() <= 1e-6 * 370.0);

    // a head that only scores `[EOS]` drives single-step `[SOS] -> [EOS]` to zero loss
    let mut p = zero.clone();
    let d = p.config().d_model;
    p.tensor_mut("final_norm").unwrap().fill(1.0);
    let e = l.sos() as usize;
    p.tensor_mut("aux_embed").unwrap()[(e - l.visual_base() as usize) * d..][..d].fill(1.0);
    let eos = l.eos() as usize;
    p.tensor_mut("head").unwrap()[eos * d..(eos + 1) * d].fill(1000.0 / d as f64);
    let one = pack(&[f.text(&[]).unwrap()], 2, &l).unwrap();
    assert!(batch_loss(&p, &one).unwrap().mean() < 1e-9);
}

#[test]
fn warm_start_keeps_donor_text_loss() {
    let l = layout_370();
    let f = SequenceFormat::new(l, 4);
    let cfg = grad_check_config();
    let donor: ParamStore<f64> = init_params(&cfg, &l, 10, None).unwrap();
    let warm = init_params(&cfg, &l, 11, Some(&donor)).unwrap();
    let text = pack(
        &[f.text(&[3, 99, 250]).unwrap(), f.text(&[]).unwrap(), f.text(&[7; 9]).unwrap()],
        32,
        &l,
    )
    .unwrap();
    assert_eq!(batch_loss(&warm, &text).unwrap(), batch_loss(&donor, &text).unwrap());
    assert_eq!(warm.text_embed(), donor.text_embed());
    assert_ne!(warm.aux_embed(), donor.aux_embed());
    let fresh = init_params(&cfg, &l, 10, None).unwrap();
    assert_eq!(fresh, donor);
}

#[test]
fn checkpoint_round_trip_preserves_logits_bitwise() {
    let l = VocabLayout::new(300, 64).unwrap();
    let params: ParamStore<f32> = init_params(&grad_check_config(), &l, 1, None).unwrap();
    let ckpt = Checkpoint {
        step: 3,
        stage: "unified_pretrain".into(),
        activation: None,
        params,
        moments: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ugck");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let ids = [l.sos(), 5, 300, l.soi(), 301, l.eos()];
    let blocks = [0; 6];
    let a = forward_row(&ckpt.params, &ids, &blocks).unwrap().into_logits();
    let b = forward_row(&back.params, &ids, &blocks).unwrap().into_logits();
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
