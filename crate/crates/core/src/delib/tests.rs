use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_params, Coords, Gradients};
use crate::beam::Hypothesis;
use crate::data::{FrameSequence, FIRST_REGULAR};
use crate::model::Model;

fn tiny_model(regular: usize, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(ModelConfig::tiny(regular), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde1b);
    m.params.randomize(scale, &mut rng);
    m
}

fn frames(t: usize, dim: usize, rng: &mut ChaCha8Rng) -> FrameSequence {
    FrameSequence::new(t, dim, (0..t * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn beam_of(seqs: &[&[u32]]) -> Beam {
    Beam::new(
        seqs.iter()
            .enumerate()
            .map(|(i, s)| Hypothesis::new(s.to_vec(), -(i as f64)))
            .collect(),
    )
}

fn set_param(m: &mut Model, name: &str, value: f64) {
    let id = m.params.find(name).unwrap();
    m.params.get_mut(id).values_mut().iter_mut().for_each(|v| *v = value);
}

/// Logits of a fixed teacher-forced run.
fn run_logits(m: &Model, fs: &FrameSequence, beam: &Beam, h: usize, mode: AttentionMode, y: &[u32]) -> Vec<f64> {
    let mut g = Graph::new(&m.params);
    let e = m.encode(&mut g, fs).unwrap();
    let ep = m.delib.additional_encode(&mut g, e, true).unwrap();
    let hb = m.delib.encode_hypotheses(&mut g, beam, h).unwrap();
    let ctx = m.delib.context(&mut g, ep, Some(&hb), mode).unwrap();
    let logits = m.delib.teacher_forced_logits(&mut g, &ctx, &[y.to_vec()]).unwrap();
    g.value(logits).values().to_vec()
}

#[test]
fn hypothesis_encoding_shape_and_padding() {
    let mut cfg = ModelConfig::tiny(3);
    cfg.l_pad = 24;
    let m = Model::new(cfg, 1).unwrap();
    let mut g = Graph::new(&m.params);
    let beam = beam_of(&[&[3, 4], &[5]]);
    let hb = m.delib.encode_hypotheses(&mut g, &beam, 8).unwrap();
    assert_eq!(g.value(hb.matrix).shape(), &[192, m.config.hyp_enc_dim()]);
    assert_eq!(hb.rows(), 192);
    assert_eq!(hb.tokens[0], hb.tokens[2]);
    assert_eq!(hb.tokens[1][0], 5);
    assert_eq!(hb.source_of(100), 4);
    assert_eq!(hb.token_at(24), 5);
    let one = m.delib.encode_hypotheses(&mut g, &beam, 1).unwrap();
    assert_eq!(g.value(one.matrix).rows(), 24);
    assert_eq!(g.value(one.matrix).values(), &g.value(hb.matrix).values()[..24 * m.config.hyp_enc_dim()]);
    assert!(m.delib.encode_hypotheses(&mut g, &Beam::default(), 2).is_err());
}

#[test]
fn hypothesis_blocks_are_independent() {
    let m = tiny_model(3, 2, 0.5);
    let d = m.config.hyp_enc_dim() * m.config.l_pad;
    let encode = |seqs: &[&[u32]]| {
        let mut g = Graph::new(&m.params);
        let padded = seqs.iter().map(|s| crate::data::pad_hypothesis(s, m.config.l_pad)).collect();
        let hb = m.delib.encode_padded(&mut g, padded).unwrap();
        g.value(hb.matrix).values().to_vec()
    };
    let base = encode(&[&[3, 4], &[5, 5, 3], &[4], &[]]);
    let edited = encode(&[&[3, 4], &[5, 5, 3], &[3, 3, 3], &[]]);
    for i in [0, 1, 3] {
        assert_eq!(base[i * d..(i + 1) * d], edited[i * d..(i + 1) * d]);
    }
    assert_ne!(base[2 * d..3 * d], edited[2 * d..3 * d]);
    let permuted = encode(&[&[3, 4], &[], &[5, 5, 3], &[4]]);
    for (i, j) in [(0, 0), (1, 3), (2, 1), (3, 2)] {
        assert_eq!(base[j * d..(j + 1) * d], permuted[i * d..(i + 1) * d]);
    }
    let alone = encode(&[&[4]]);
    assert_eq!(alone[..], base[2 * d..3 * d]);
}

#[test]
fn additional_encoder_bypass_and_zero_weights() {
    let mut m = tiny_model(2, 3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fs = frames(7, 3, &mut rng);
    let mut g = Graph::new(&m.params);
    let e = m.encode(&mut g, &fs).unwrap();
    let off = m.delib.additional_encode(&mut g, e, false).unwrap();
    assert_eq!(off, e);
    let on = m.delib.additional_encode(&mut g, e, true).unwrap();
    assert_eq!(g.value(on).shape(), g.value(e).shape());
    drop(g);
    for name in ["delib.ae0.wx", "delib.ae0.wh", "delib.ae0.b", "delib.ae0.proj"] {
        set_param(&mut m, name, 0.0);
    }
    let mut g = Graph::new(&m.params);
    let e = m.encode(&mut g, &fs).unwrap();
    let on = m.delib.additional_encode(&mut g, e, true).unwrap();
    assert!(g.value(on).values().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_sum_to_one_in_every_mode() {
    let m = tiny_model(3, 4, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fs = frames(6, 3, &mut rng);
    let beam = beam_of(&[&[3, 4, 5], &[4]]);
    for mode in AttentionMode::ALL {
        let mut g = Graph::new(&m.params);
        let e = m.encode(&mut g, &fs).unwrap();
        let hb = m.delib.encode_hypotheses(&mut g, &beam, 2).unwrap();
        let ctx = m.delib.context(&mut g, e, Some(&hb), mode).unwrap();
        let st = m.delib.initial_state(&mut g, 2);
        let out = m.delib.step(&mut g, &ctx, &[SOS, 3], &st).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[2, m.config.vocab_size]);
        assert_eq!(out.text_weights.is_some(), mode.uses_text());
        assert_eq!(out.audio_weights.is_some(), mode.uses_acoustics());
        for w in [out.text_weights, out.audio_weights].into_iter().flatten() {
            let p = g.attention_probs(w).unwrap();
            for h in 0..p.heads {
                for q in 0..p.queries {
                    let s: f64 = (0..p.sources).map(|s| p.get(h, q, s)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn zero_acoustic_values_make_both_equal_text_only() {
    let mut m = tiny_model(3, 5, 1.0);
    set_param(&mut m, "delib.audio_att.wv", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fs = frames(5, 3, &mut rng);
    let beam = beam_of(&[&[3, 4], &[5]]);
    let y = [4, 3, EOS];
    let both = run_logits(&m, &fs, &beam, 2, AttentionMode::Both, &y);
    let text = run_logits(&m, &fs, &beam, 2, AttentionMode::TextOnly, &y);
    assert_eq!(both, text);
}

#[test]
fn single_side_modes_ignore_the_other_input() {
    let m = tiny_model(3, 6, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fs1 = frames(5, 3, &mut rng);
    let fs2 = frames(8, 3, &mut rng);
    let b1 = beam_of(&[&[3, 4], &[5]]);
    let b2 = beam_of(&[&[5, 5, 5, 4]]);
    let y = [5, 3, EOS];
    let a1 = run_logits(&m, &fs1, &b1, 2, AttentionMode::AcousticsOnly, &y);
    let a2 = run_logits(&m, &fs1, &b2, 2, AttentionMode::AcousticsOnly, &y);
    assert_eq!(a1, a2);
    let t1 = run_logits(&m, &fs1, &b1, 2, AttentionMode::TextOnly, &y);
    let t2 = run_logits(&m, &fs2, &b1, 2, AttentionMode::TextOnly, &y);
    assert_eq!(t1, t2);
    let both1 = run_logits(&m, &fs1, &b1, 2, AttentionMode::Both, &y);
    let both2 = run_logits(&m, &fs2, &b1, 2, AttentionMode::Both, &y);
    assert_ne!(both1, both2);
}

fn scoring_context<'a>(m: &'a Model, g: &mut Graph<'a>, fs: &FrameSequence, beam: &Beam) -> DelibContext {
    let e = m.encode(g, fs).unwrap();
    let ep = m.delib.additional_encode(g, e, true).unwrap();
    let hb = m.delib.encode_hypotheses(g, beam, 2).unwrap();
    m.delib.context(g, ep, Some(&hb), AttentionMode::Both).unwrap()
}

#[test]
fn sequence_log_prob_is_sum_of_steps() {
    let m = tiny_model(3, 7, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fs = frames(6, 3, &mut rng);
    let beam = beam_of(&[&[3, 4], &[5]]);
    let mut g = Graph::new(&m.params);
    let ctx = scoring_context(&m, &mut g, &fs, &beam);
    let y = [4u32, 5, 3, EOS];
    let total = m.delib.sequence_log_prob(&mut g, &ctx, &y).unwrap();
    let total = g.value(total).item();
    let mut state = m.delib.initial_state(&mut g, 1);
    let mut prev = SOS;
    let mut stepwise = 0.0;
    for &tok in &y {
        let out = m.delib.step(&mut g, &ctx, &[prev], &state).unwrap();
        let mut row = g.value(out.logits).row(0).to_vec();
        crate::autodiff::log_softmax_in_place(&mut row);
        stepwise += row[tok as usize];
        state = out.state;
        prev = tok;
    }
    assert!((total - stepwise).abs() < 1e-12);
    assert!(total <= 0.0);
    let batch = m.delib.sequence_log_probs(&mut g, &ctx, &[vec![3, EOS], y.to_vec(), vec![EOS]]).unwrap();
    assert_eq!(g.value(batch[1]).item(), total);
    assert!(m.delib.sequence_log_prob(&mut g, &ctx, &[3, 4]).is_err());
    assert!(matches!(
        m.delib.sequence_log_prob(&mut g, &ctx, &[77, EOS]),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn forced_eos_model_gives_near_zero_log_prob() {
    let mut m = tiny_model(1, 8, 0.1);
    let b = m.params.find("delib.output.b").unwrap();
    m.params.get_mut(b).values_mut()[EOS as usize] = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fs = frames(4, 3, &mut rng);
    let mut g = Graph::new(&m.params);
    let ctx = scoring_context(&m, &mut g, &fs, &beam_of(&[&[3]]));
    let lp = m.delib.sequence_log_prob(&mut g, &ctx, &[EOS]).unwrap();
    assert!(g.value(lp).item() > -1e-20);
}

#[test]
fn probability_mass_over_short_sequences() {
    let m = tiny_model(2, 9, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fs = frames(4, 3, &mut rng);
    let mut g = Graph::new(&m.params);
    let ctx = scoring_context(&m, &mut g, &fs, &beam_of(&[&[3, 4]]));
    let mut mass = Vec::new();
    let mut total = 0.0;
    let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..6 {
        let seqs: Vec<Vec<u32>> = prefixes.iter().map(|p| [p.clone(), vec![EOS]].concat()).collect();
        for lp in m.delib.sequence_log_probs(&mut g, &ctx, &seqs).unwrap() {
            total += g.value(lp).item().exp();
        }
        mass.push(total);
        prefixes = prefixes
            .iter()
            .flat_map(|p| (FIRST_REGULAR..FIRST_REGULAR + 2).map(move |k| [p.clone(), vec![k]].concat()))
            .collect();
    }
    assert!(mass.windows(2).all(|w| w[1] >= w[0]));
    assert!(*mass.last().unwrap() <= 1.0 + 1e-12);
    assert!(mass[5] > mass[3]);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let m = tiny_model(2, 20 + seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = frames(4, 3, &mut rng);
        let beam = beam_of(&[&[3, 4], &[4]]);
        let y = [4u32, 3, EOS];
        let loss = |store: &ParamStore| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(store);
            let ctx = scoring_context(&m, &mut g, &fs, &beam);
            let ce = m.delib.cross_entropy(&mut g, &ctx, &y)?;
            let value = g.value(ce).item();
            Ok((value, g.backward(ce)?))
        };
        let (_, grads) = loss(&m.params).unwrap();
        let err = check_params(
            |s| Ok(loss(s)?.0),
            &m.params,
            &grads,
            1e-5,
            Coords::Sample {
                per_param: 3,
                seed,
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}
