mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textsr::nn::{ParamStore, Tape, Tensor};
use textsr::textcodec::{detokenize, tokenize, ByteTokenSeq, TextEncoder, VOCAB_SIZE};

fn tiny_encoder(seed: u64) -> (TextEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(tiny_text(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut store, seed + 100, 0.5);
    (enc, store)
}

/// Hand-rolled UTF-8 encoder, independent of `str::as_bytes`.
fn utf8(c: char) -> Vec<u8> {
    let u = c as u32;
    match u {
        0..=0x7f => vec![u as u8],
        0x80..=0x7ff => vec![0xc0 | (u >> 6) as u8, 0x80 | (u & 0x3f) as u8],
        0x800..=0xffff => vec![0xe0 | (u >> 12) as u8, 0x80 | ((u >> 6) & 0x3f) as u8, 0x80 | (u & 0x3f) as u8],
        _ => vec![
            0xf0 | (u >> 18) as u8,
            0x80 | ((u >> 12) & 0x3f) as u8,
            0x80 | ((u >> 6) & 0x3f) as u8,
            0x80 | (u & 0x3f) as u8,
        ],
    }
}

#[test]
fn cjk_ids_match_manual_utf8() {
    let want: Vec<u16> = utf8('中').iter().map(|&b| b as u16 + 3).chain([1, 0, 0, 0, 0]).collect();
    assert_eq!(want, vec![231, 187, 176, 1, 0, 0, 0, 0]);
    assert_eq!(tokenize("中", 8).ids(), &want[..]);
    for s in ["é", "€", "😀", "a中😀"] {
        let manual: Vec<u8> = s.chars().flat_map(utf8).collect();
        let ids: Vec<u8> = tokenize(s, 16).ids().iter().take(manual.len()).map(|&i| (i - 3) as u8).collect();
        assert_eq!(ids, manual, "{s}");
    }
}

#[test]
fn encoder_matches_dense_oracle() {
    let (enc, store) = tiny_encoder(1);
    let w = Weights(&store);
    for text in ["AB", "", "中", "WXYZ"] {
        let seq = tokenize(text, 4);
        let got = enc.encode(&seq, &store).unwrap();
        let want = encoder_oracle(&w, &enc.config, seq.ids(), seq.mask());
        let diff = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "{text}: {diff}");
        assert!(want.iter().any(|v| v.abs() > 1e-3));
    }
}

#[test]
fn all_pad_input_gives_zero_features() {
    let (enc, store) = tiny_encoder(2);
    let seq = ByteTokenSeq::from_ids(vec![0; 4]);
    assert!(seq.mask().iter().all(|m| !m));
    let f = enc.encode(&seq, &store).unwrap();
    assert!(f.values.iter().all(|&v| v == 0.0));
}

#[test]
fn pad_position_values_are_inert() {
    let (enc, store) = tiny_encoder(3);
    let base = tokenize("Q", 4);
    let a = enc.encode(&base, &store).unwrap();
    for junk in [[7u16, 200], [258, 2], [0, 0]] {
        let mut ids = base.ids().to_vec();
        ids[2] = junk[0];
        ids[3] = junk[1];
        let seq = ByteTokenSeq::with_mask(ids, base.mask().to_vec());
        assert_eq!(enc.encode(&seq, &store).unwrap(), a);
    }
}

#[test]
fn wrong_length_is_rejected() {
    let (enc, store) = tiny_encoder(4);
    assert!(enc.encode(&tokenize("A", 5), &store).is_err());
}

#[test]
fn encoder_gradients_match_central_differences() {
    let (enc, mut store) = tiny_encoder(5);
    let seqs = [tokenize("A7", 4), tokenize("中", 4), tokenize("", 4)];
    let refs: Vec<&ByteTokenSeq> = seqs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let probe: Vec<f64> = (0..3 * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, store, &refs).unwrap();
        let p = tape.mul_const(out, &Tensor::new(&[3, 4, 8], probe.clone()));
        let s = tape.sum(p);
        (tape.value(s).data()[0], tape, s)
    };
    let (_, tape, s) = loss(&store);
    let grads = tape.backward(s);
    let used: Vec<usize> = seqs.iter().flat_map(|q| q.ids().iter().map(|&i| i as usize)).collect();
    let h = 1e-5;
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let idx: Vec<usize> = if store.name(id) == "text.embed" {
            let mut v: Vec<usize> = used.iter().flat_map(|&t| t * 8..(t + 1) * 8).collect();
            v.extend([0, 8 * 100 + 3, n - 1]);
            v.sort_unstable();
            v.dedup();
            v
        } else {
            (0..n).collect()
        };
        for j in idx {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let lp = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig - h;
            let lm = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
            assert!(rel < 1e-4, "{}[{j}]: analytic {ana:e} numeric {num:e}", store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 500, "{checked}");
}

fn text_strategy() -> impl Strategy<Value = String> {
    let ch = prop_oneof![
        (0x20u32..0x7f).prop_map(|u| char::from_u32(u).unwrap()),
        (0xa0u32..0x100).prop_map(|u| char::from_u32(u).unwrap()),
        (0x4e00u32..0x9fa6).prop_map(|u| char::from_u32(u).unwrap()),
        (0x1f600u32..0x1f650).prop_map(|u| char::from_u32(u).unwrap()),
    ];
    proptest::collection::vec(ch, 0..16).prop_map(|v| v.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip_when_it_fits(s in text_strategy()) {
        let m = 64;
        let seq = tokenize(&s, m);
        prop_assert!(seq.ids().iter().all(|&i| (i as usize) < VOCAB_SIZE));
        prop_assert_eq!(seq.len(), m);
        if s.len() <= m - 1 {
            prop_assert!(!seq.truncated());
            prop_assert_eq!(detokenize(&seq), s);
            prop_assert_eq!(seq.ids().iter().filter(|&&i| i == 1).count(), 1);
        } else {
            prop_assert!(seq.truncated());
            prop_assert!(!seq.ids().contains(&1));
        }
    }

    #[test]
    fn pad_never_precedes_eos(s in text_strategy(), m in 2usize..24) {
        let seq = tokenize(&s, m);
        let ids = seq.ids();
        if let Some(eos) = ids.iter().position(|&i| i == 1) {
            prop_assert!(!ids[..eos].contains(&0));
            prop_assert!(seq.mask()[..=eos].iter().all(|&k| k));
            prop_assert!(seq.mask()[eos + 1..].iter().all(|&k| !k));
        }
    }
}
