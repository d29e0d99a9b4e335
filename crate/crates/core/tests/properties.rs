use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ugen_core::infer::{sample_next, SamplingConfig};
use ugen_core::prompt::{pack, SeqKind, SequenceFormat, UnifiedSequence};
use ugen_core::vocab::{mask_sequence, Activation, ActivationState, TokenClass, TokenId, VocabLayout};

fn layout() -> VocabLayout {
    VocabLayout::new(300, 64).unwrap()
}

fn format() -> SequenceFormat {
    SequenceFormat::new(layout(), 16)
}

/// An activation state after `steps` steps of period `k`.
fn state(k: u64, seed: u64, steps: u64) -> ActivationState {
    let mut s = ActivationState::new(layout(), Activation::period(k).unwrap(), seed);
    for _ in 0..steps {
        s.advance();
    }
    s
}

fn textual() -> impl Strategy<Value = TokenId> {
    0..300u32
}

/// Visual IDs or `[MASK]`.
fn image_token() -> impl Strategy<Value = TokenId> {
    prop_oneof![9 => 300..364u32, 1 => Just(layout().mask())]
}

fn image() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(image_token(), 16)
}

fn sequence() -> impl Strategy<Value = UnifiedSequence> {
    let f = format();
    prop_oneof![
        prop::collection::vec(textual(), 0..30).prop_map(move |x| f.text(&x).unwrap()),
        (image(), prop::collection::vec(textual(), 1..30)).prop_map(move |(y, x)| f.und(&y, &x).unwrap()),
        (prop::collection::vec(textual(), 0..30), image()).prop_map(move |(x, y)| f.gen(&x, &y).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn masking_is_safe(
        ids in prop::collection::vec(0..370u32, 0..80),
        k in 1..20u64,
        seed in 0..1000u64,
        steps in 0..1500u64,
    ) {
        let st = state(k, seed, steps);
        let l = layout();
        let seq = UnifiedSequence { ids: ids.clone(), kind: SeqKind::Interleaved, segments: Vec::new() };
        let out = mask_sequence(&seq, &st).unwrap();
        prop_assert_eq!(out.ids.len(), ids.len());
        for (&a, &b) in ids.iter().zip(&out.ids) {
            match l.classify(a).unwrap() {
                TokenClass::Visual if !st.is_active(a) => prop_assert_eq!(b, l.mask()),
                _ => prop_assert_eq!(b, a),
            }
            prop_assert!(!l.is_visual(b) || st.is_active(b));
        }
        prop_assert_eq!(mask_sequence(&out, &st).unwrap(), out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn activation_is_monotone(k in 1..8u64, seed in any::<u64>(), schedule in prop::collection::vec(any::<bool>(), 1..300)) {
        let mut st = ActivationState::new(layout(), Activation::period(k).unwrap(), seed);
        let mut twin = st.clone();
        let mut prev = st.activated_count();
        for advance in schedule {
            let fired = if advance { st.advance() } else { st.tick() };
            if advance { twin.advance(); } else { twin.tick(); }
            let now = st.activated_count();
            prop_assert!(now >= prev);
            prop_assert_eq!(now - prev, usize::from(fired.is_some()));
            prop_assert_eq!(now + st.pending_count(), 64);
            if let Some(id) = fired {
                prop_assert!(st.is_active(id) && !st.pending().contains(&id));
            }
            prev = now;
        }
        prop_assert_eq!(st.activated_visual(), twin.activated_visual());
    }

    #[test]
    fn format_parse_bijection(x in prop::collection::vec(textual(), 0..40), y in image()) {
        let f = format();
        let t = f.text(&x).unwrap();
        let back = f.parse(&t.ids).unwrap();
        prop_assert_eq!(back.kind, SeqKind::TextOnly);
        prop_assert_eq!(back.text_ids(), x.clone());
        prop_assert_eq!(&back, &t);

        let g = f.gen(&x, &y).unwrap();
        let back = f.parse(&g.ids).unwrap();
        let want_kind = if x.is_empty() { SeqKind::UnconditionalImage } else { SeqKind::TextToImage };
        prop_assert_eq!(back.kind, want_kind);
        prop_assert_eq!((back.text_ids(), back.image_ids()), (x.clone(), y.clone()));
        prop_assert_eq!(&back, &g);

        if !x.is_empty() {
            let u = f.und(&y, &x).unwrap();
            prop_assert_eq!(u.len(), 16 + x.len() + 4);
            let back = f.parse(&u.ids).unwrap();
            prop_assert_eq!(back.kind, SeqKind::ImageToText);
            prop_assert_eq!((back.image_ids(), back.text_ids()), (y, x));
            prop_assert_eq!(&back, &u);
        }
    }

    #[test]
    fn packing_conserves_tokens(seqs in prop::collection::vec(sequence(), 1..20), row_len in 60..160usize) {
        let l = layout();
        let batch = pack(&seqs, row_len, &l).unwrap();
        let mut want: BTreeMap<TokenId, usize> = BTreeMap::new();
        for s in &seqs {
            for &id in &s.ids {
                *want.entry(id).or_default() += 1;
            }
        }
        let mut got: BTreeMap<TokenId, usize> = BTreeMap::new();
        let mut spans: Vec<Vec<TokenId>> = Vec::new();
        for row in &batch.rows {
            prop_assert_eq!(row.ids.len(), row_len);
            prop_assert!(row.ids[row.used_len()..].iter().all(|&id| id == l.pad()));
            for &id in &row.ids[..row.used_len()] {
                *got.entry(id).or_default() += 1;
            }
            let mut expect_start = 0;
            for s in &row.samples {
                prop_assert_eq!(s.start, expect_start);
                expect_start += s.len;
                prop_assert_eq!(row.ids[s.start], l.sos());
                spans.push(row.ids[s.start..s.start + s.len].to_vec());
            }
        }
        prop_assert_eq!(got, want);
        let mut inputs: Vec<Vec<TokenId>> = seqs.iter().map(|s| s.ids.clone()).collect();
        inputs.sort();
        spans.sort();
        prop_assert_eq!(spans, inputs);
        let targets: usize = seqs.iter().map(|s| s.len() - 1).sum();
        prop_assert_eq!(batch.target_count(), targets);
    }

    #[test]
    fn greedy_choice_ignores_logit_shift(logits in prop::collection::vec(-20.0f64..20.0, 8), shift in -100.0f64..100.0) {
        let allowed: Vec<TokenId> = (0..8).collect();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let cfg = SamplingConfig::greedy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_next(&logits, &cfg, &allowed, &mut rng).unwrap();
        let b = sample_next(&shifted, &cfg, &allowed, &mut rng).unwrap();
        let best = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(a, b);
        prop_assert_eq!(logits[a as usize], best);
    }
}
