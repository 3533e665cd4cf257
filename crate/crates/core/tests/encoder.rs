mod common;

use proptest::prelude::*;
use relattn::data::{encode_batch, RelationInstance, Span, Vocabularies};
use relattn::encoder::{
    assemble_input, attention_head, encode, multi_head, sinusoidal_encoding, EncoderConfig, NormKind, PositionMode,
    ResidualKind,
};
use relattn::model::{init_params, ForwardMode, Init, InitScheme, ParamSpec};
use relattn::tensor::{ParamStore, RngState, Tape, Tensor};

fn head_store(d: usize, dh: usize, max_len: usize, rng: &mut RngState) -> ParamStore {
    let specs = [
        ParamSpec::weight("h.wq", d, dh),
        ParamSpec::weight("h.wk", d, dh),
        ParamSpec::weight("h.wv", d, dh),
        ParamSpec::weight("h.wr", d, dh),
        ParamSpec::weight("h.rel", 2 * max_len - 1, dh),
    ];
    init_params(&specs, InitScheme::Kaiming, rng)
}

fn cfg(mode: PositionMode) -> EncoderConfig {
    EncoderConfig { position_mode: mode, num_heads: 2, ff_hidden: 8, max_len: 10, ..Default::default() }
}

fn run_head(store: &ParamStore, cfg: &EncoderConfig, e: &[f64], n: usize, d: usize, mask: &[bool]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new(store);
    let ev = tape.leaf(Tensor::new(&[1, n, d], e.to_vec()).unwrap());
    let t = attention_head(&mut tape, cfg, "h", ev, mask, ForwardMode::Deterministic, &mut RngState::new(0)).unwrap();
    (
        tape.value(t.out).data().to_vec(),
        tape.value(t.weights).data().to_vec(),
        tape.value(t.v).data().to_vec(),
    )
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut rng = RngState::new(3);
    let (n, d, dh) = (5, 6, 3);
    let store = head_store(d, dh, 10, &mut rng);
    let token = common::random_vec(&mut rng, d, 1.0);
    let e: Vec<f64> = (0..n).flat_map(|_| token.clone()).collect();
    let (out, w, v) = run_head(&store, &cfg(PositionMode::None), &e, n, d, &[true; 5]);
    for x in &w {
        assert!((x - 0.2).abs() < 1e-15);
    }
    let mean: Vec<f64> = (0..dh).map(|c| (0..n).map(|j| v[j * dh + c]).sum::<f64>() / n as f64).collect();
    for i in 0..n {
        assert!(common::max_abs_diff(&out[i * dh..(i + 1) * dh], &mean) < 1e-12);
    }
}

#[test]
fn single_valid_key_takes_all_weight() {
    let mut rng = RngState::new(4);
    let (n, d, dh) = (4, 6, 2);
    let store = head_store(d, dh, 10, &mut rng);
    let e = common::random_vec(&mut rng, n * d, 1.0);
    let mask = [false, false, true, false];
    for mode in [PositionMode::None, PositionMode::Relative] {
        let (out, w, v) = run_head(&store, &cfg(mode), &e, n, d, &mask);
        for i in 0..n {
            assert_eq!(&w[i * n..(i + 1) * n], &[0.0, 0.0, 1.0, 0.0]);
            assert!(common::max_abs_diff(&out[i * dh..(i + 1) * dh], &v[2 * dh..3 * dh]) < 1e-15);
        }
    }
}

#[test]
fn constant_pair_scores_give_uniform_attention() {
    // With W_q = 0 every pairwise score is zero, so only the mask shapes the weights.
    let mut rng = RngState::new(5);
    let (n, d, dh) = (6, 4, 2);
    let mut store = head_store(d, dh, 10, &mut rng);
    store.get_mut("h.wq").unwrap().data_mut().fill(0.0);
    let e = common::random_vec(&mut rng, n * d, 1.0);
    let mask = [true, true, false, true, false, true];
    let (_, w, _) = run_head(&store, &cfg(PositionMode::None), &e, n, d, &mask);
    for i in 0..n {
        for j in 0..n {
            let expect = if mask[j] { 0.25 } else { 0.0 };
            assert!((w[i * n + j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_output_projection_yields_bias() {
    let mut rng = RngState::new(6);
    let c = cfg(PositionMode::Relative);
    let d = 6;
    let mut store = init_params(&c.param_specs(d), InitScheme::Kaiming, &mut rng);
    store.get_mut("enc.0.attn.wo").unwrap().data_mut().fill(0.0);
    let bias = common::random_vec(&mut rng, d, 1.0);
    store.get_mut("enc.0.attn.bo").unwrap().data_mut().copy_from_slice(&bias);
    let n = 3;
    let mut tape = Tape::new(&store);
    let e = tape.leaf(Tensor::new(&[1, n, d], common::random_vec(&mut rng, n * d, 1.0)).unwrap());
    let (out, _) = multi_head(&mut tape, &c, 0, e, &[true; 3], ForwardMode::Deterministic, &mut RngState::new(0)).unwrap();
    let out = tape.value(out).data();
    for i in 0..n {
        assert_eq!(&out[i * d..(i + 1) * d], bias.as_slice());
    }
}

#[test]
fn zeroed_feed_forward_reduces_to_layer_norm_of_input() {
    let mut rng = RngState::new(7);
    let c = EncoderConfig { norm: NormKind::Layer, ..cfg(PositionMode::Relative) };
    let (n, d) = (4, 6);
    let mut store = init_params(&c.param_specs(d), InitScheme::Kaiming, &mut rng);
    for name in ["enc.0.ff.w2", "enc.0.ff.b2"] {
        store.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let gamma = common::random_vec(&mut rng, d, 1.0);
    let beta = common::random_vec(&mut rng, d, 1.0);
    store.get_mut("enc.0.norm_out.gamma").unwrap().data_mut().copy_from_slice(&gamma);
    store.get_mut("enc.0.norm_out.beta").unwrap().data_mut().copy_from_slice(&beta);
    let x = common::random_vec(&mut rng, n * d, 2.0);
    let mut tape = Tape::new(&store);
    let e = tape.leaf(Tensor::new(&[1, n, d], x.clone()).unwrap());
    let out = encode(&mut tape, &c, e, &[true; 4], ForwardMode::Deterministic, &mut RngState::new(0)).unwrap();
    let expect = common::layer_norm(&x, d, &gamma, &beta, c.norm_eps);
    assert!(common::max_abs_diff(tape.value(out.h).data(), &expect) < 1e-12);
}

#[test]
fn padding_rows_stay_zero_in_every_variant() {
    let mut rng = RngState::new(8);
    let (n, d) = (5, 6);
    let mask = [true, true, true, false, false];
    for mode in [PositionMode::Relative, PositionMode::AbsoluteSinusoidal, PositionMode::None] {
        for norm in [NormKind::Batch, NormKind::Layer] {
            for residual in [ResidualKind::SingleSpan, ResidualKind::OriginalTwo] {
                let c = EncoderConfig { norm, residual, ..cfg(mode) };
                let mut store = init_params(&c.param_specs(d), InitScheme::Kaiming, &mut rng);
                for (name, t) in store.iter_mut() {
                    if name.ends_with("beta") || name.ends_with("b2") || name.ends_with("bo") {
                        t.data_mut().fill(0.3);
                    }
                }
                let mut x = common::random_vec(&mut rng, n * d, 1.0);
                x[3 * d..].fill(0.0);
                for fm in [ForwardMode::Train, ForwardMode::Deterministic] {
                    let mut tape = Tape::new(&store);
                    let e = tape.leaf(Tensor::new(&[1, n, d], x.clone()).unwrap());
                    let out = encode(&mut tape, &c, e, &mask, fm, &mut RngState::new(1)).unwrap();
                    let h = tape.value(out.h).data();
                    assert!(h[3 * d..].iter().all(|&v| v == 0.0), "{mode:?} {norm:?} {residual:?}");
                    assert!(h[..3 * d].iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}

#[test]
fn input_assembly_concatenates_and_adds_object_offsets() {
    let inst = RelationInstance {
        id: "x".into(),
        tokens: vec!["a".into(), "b".into()],
        pos_tags: vec!["NN".into(), "VB".into()],
        ner_tags: vec!["O".into(), "PERSON".into()],
        subj_span: Span::single(0),
        obj_span: Span::single(1),
        relation: "r".into(),
    };
    let vocabs = Vocabularies::from_training(std::slice::from_ref(&inst), 1);
    let batch = encode_batch(&[&inst], &vocabs, 10).unwrap();
    let specs = [
        ParamSpec::new("emb.word", &[vocabs.words.len(), 2], Init::Embedding),
        ParamSpec::new("emb.ner", &[vocabs.ner.len(), 1], Init::Embedding),
        ParamSpec::new("emb.pos", &[vocabs.pos.len(), 1], Init::Embedding),
        ParamSpec::new("emb.objpos", &[4, 4], Init::Embedding),
    ];
    let store = init_params(&specs, InitScheme::Kaiming, &mut RngState::new(9));
    let row = |name: &str, id: usize| store.get(name).unwrap().row(id).to_vec();
    let mut tape = Tape::new(&store);
    let plain = assemble_input(&mut tape, &batch, None).unwrap();
    let objpos = [1, 3];
    let shifted = assemble_input(&mut tape, &batch, Some(&objpos)).unwrap();
    for (t, &o) in objpos.iter().enumerate() {
        let mut expect = row("emb.word", batch.words[t]);
        expect.extend(row("emb.ner", batch.ner[t]));
        expect.extend(row("emb.pos", batch.pos[t]));
        assert_eq!(&tape.value(plain).data()[t * 4..(t + 1) * 4], expect.as_slice());
        let o = row("emb.objpos", o);
        let sum: Vec<f64> = expect.iter().zip(&o).map(|(a, b)| a + b).collect();
        assert_eq!(&tape.value(shifted).data()[t * 4..(t + 1) * 4], sum.as_slice());
    }
}

#[test]
fn sinusoids_reject_odd_width() {
    assert!(sinusoidal_encoding(4, 5).is_err());
    let pe = sinusoidal_encoding(3, 4).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn overlong_sequences_are_rejected() {
    let c = EncoderConfig { max_len: 3, ..cfg(PositionMode::Relative) };
    let d = 4;
    let store = init_params(&c.param_specs(d), InitScheme::Kaiming, &mut RngState::new(1));
    let mut tape = Tape::new(&store);
    let e = tape.leaf(Tensor::zeros(&[1, 4, d]));
    let err = encode(&mut tape, &c, e, &[true; 4], ForwardMode::Deterministic, &mut RngState::new(0));
    assert!(matches!(err, Err(relattn::Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn head_matches_explicit_relative_oracle(seed in 0u64..10_000, n in 1usize..8, dh in 1usize..4) {
        let mut rng = RngState::new(seed);
        let err = common::cases::attention_head_case(&mut rng, n, 2 * dh, dh, 8);
        prop_assert!(err < 1e-10, "error {err}");
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, n in 1usize..8) {
        let mut rng = RngState::new(seed);
        let d = 4;
        let store = head_store(d, 2, 10, &mut rng);
        let e = common::random_vec(&mut rng, n * d, 3.0);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
        mask[rng.below(n)] = true;
        let (_, w, _) = run_head(&store, &cfg(PositionMode::Relative), &e, n, d, &mask);
        for i in 0..n {
            let row = &w[i * n..(i + 1) * n];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &x) in row.iter().enumerate() {
                prop_assert!(x >= 0.0);
                if !mask[j] {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }
}
