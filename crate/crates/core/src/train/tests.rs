use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_params, Coords, ParamStore};
use crate::data::{SyntheticTask, TaskConfig, Vocab};
use crate::model::{AttentionMode, ModelConfig};

fn toy_corpus(n: usize, sigma: f64) -> Vec<Utterance> {
    let cfg = TaskConfig {
        feature_dim: 3,
        min_len: 1,
        max_len: 3,
        frames_per_token: 2,
        noise_sigma: sigma,
        signature_seed: 5,
    };
    SyntheticTask::new(Vocab::toy(3).unwrap(), cfg).unwrap().generate_corpus(11, n)
}

fn toy_model(seed: u64) -> Model {
    Model::new(ModelConfig::tiny(3), seed).unwrap()
}

fn small_decode() -> DecodeConfig {
    DecodeConfig {
        first_beam: 3,
        hyps: 2,
        max_len: Some(6),
        ..DecodeConfig::default()
    }
}

fn config(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        decode: small_decode(),
        lr: 0.5,
        ..TrainConfig::new(stage, 3)
    }
}

fn without_time(logs: &[StepLog]) -> Vec<(usize, Stage, u64)> {
    logs.iter().map(|l| (l.step, l.stage, l.loss.to_bits())).collect()
}

#[test]
fn delib_ce_keeps_first_pass_frozen() {
    let corpus = toy_corpus(12, 0.0);
    let mut m = toy_model(1);
    let before: Vec<u64> = Group::ALL.iter().map(|&g| m.params.fingerprint(g)).collect();
    let enc_bytes = m.params.clone();
    train(&mut m, &corpus, &config(Stage::DelibCe, 5), |_| {}).unwrap();
    assert_eq!(m.params.fingerprint(Group::Enc), before[0]);
    assert_eq!(m.params.fingerprint(Group::Rnnt), before[1]);
    assert_ne!(m.params.fingerprint(Group::Delib), before[2]);
    for ((_, a), (_, b)) in m.params.iter().zip(enc_bytes.iter()) {
        if a.group != Group::Delib {
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
    }
}

#[test]
fn delib_ce_loss_decreases_on_clean_data() {
    let corpus = toy_corpus(24, 0.0);
    let mut m = toy_model(2);
    let mut cfg = config(Stage::DelibCe, 60);
    cfg.optimizer = OptimizerKind::Adam;
    cfg.lr = 0.02;
    let logs = train(&mut m, &corpus, &cfg, |_| {}).unwrap();
    let head: f64 = logs[..10].iter().map(|l| l.loss).sum();
    let tail: f64 = logs[50..].iter().map(|l| l.loss).sum();
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn training_is_deterministic_across_runs_and_threads() {
    let corpus = toy_corpus(12, 0.3);
    for stage in [Stage::Rnnt, Stage::Mwer, Stage::Joint] {
        let mut runs = Vec::new();
        for threads in [1, 1, 3] {
            let mut m = toy_model(4);
            let mut cfg = config(stage, 3);
            cfg.threads = threads;
            let logs = train(&mut m, &corpus, &cfg, |_| {}).unwrap();
            runs.push((without_time(&logs), m.params));
        }
        assert_eq!(runs[0], runs[1], "{stage}");
        assert_eq!(runs[0], runs[2], "{stage}");
    }
}

#[test]
fn joint_with_zero_lambda_is_pure_rnnt() {
    let corpus = toy_corpus(8, 0.3);
    let mut a = toy_model(6);
    let mut b = toy_model(6);
    let delib_before = a.params.fingerprint(Group::Delib);
    let mut joint = config(Stage::Joint, 3);
    joint.lambda = 0.0;
    let rnnt = config(Stage::Rnnt, 3);
    train(&mut a, &corpus, &joint, |_| {}).unwrap();
    let rl = train(&mut b, &corpus, &rnnt, |_| {}).unwrap();
    assert!(rl.iter().all(|l| l.loss > 0.0));
    assert_eq!(a.params.fingerprint(Group::Enc), b.params.fingerprint(Group::Enc));
    assert_eq!(a.params.fingerprint(Group::Rnnt), b.params.fingerprint(Group::Rnnt));
    assert_eq!(a.params.fingerprint(Group::Delib), delib_before);

    let utt = &corpus[0];
    let (_, first) = frozen_first_pass(&a, utt, &joint.decode).unwrap();
    let mut g = Graph::new(&a.params);
    let l = joint_objective(&a, &mut g, utt, &first, 0.0, &joint.decode).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.group_norm(&a.params, Group::Delib), 0.0);
}

fn cosine(a: &Gradients, b: &Gradients, store: &ParamStore, group: Group) -> f64 {
    let mut dot = 0.0;
    for ((id, x), (_, y)) in a.iter().zip(b.iter()) {
        if store.param(id).group == group {
            dot += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    dot / (a.group_norm(store, group) * b.group_norm(store, group))
}

#[test]
fn large_lambda_encoder_gradient_follows_ce() {
    let corpus = toy_corpus(2, 0.3);
    let mut m = toy_model(7);
    m.params.randomize(0.5, &mut ChaCha8Rng::seed_from_u64(7));
    let utt = &corpus[0];
    let dcfg = small_decode();
    let (_, first) = frozen_first_pass(&m, utt, &dcfg).unwrap();
    let grad_of = |lambda: f64| {
        let mut g = Graph::new(&m.params);
        let l = joint_objective(&m, &mut g, utt, &first, lambda, &dcfg).unwrap();
        g.backward(l).unwrap()
    };
    let ce_only = {
        let mut g = Graph::new(&m.params);
        let e = m.encode(&mut g, utt.frames()).unwrap();
        let ctx = second_pass_context(&m, &mut g, e, &first, &dcfg).unwrap();
        let l = ce_objective(&m.delib, &mut g, &ctx, utt.reference()).unwrap();
        g.backward(l).unwrap()
    };
    let small = grad_of(1.0);
    let large = grad_of(1e6);
    let cos = cosine(&large, &ce_only, &m.params, Group::Enc);
    assert!(cos > 0.999_999, "{cos} {}", ce_only.group_norm(&m.params, Group::Enc));
    let ce_norm = ce_only.group_norm(&m.params, Group::Enc);
    assert!(ce_norm > 0.0);
    assert!(large.group_norm(&m.params, Group::Enc) > 1e3 * small.group_norm(&m.params, Group::Enc));
}

#[test]
fn objective_gradients_match_finite_differences() {
    let corpus = toy_corpus(4, 0.3);
    let mut m = toy_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    m.params.randomize(0.4, &mut rng);
    let dcfg = DecodeConfig {
        mode: AttentionMode::Both,
        ..small_decode()
    };
    let utt = &corpus[1];
    let (e_const, first) = frozen_first_pass(&m, utt, &dcfg).unwrap();
    let nbest = vec![
        utt.reference().to_vec(),
        vec![3, 4],
        vec![5],
    ];
    type Objective<'a> = Box<dyn Fn(&ParamStore) -> Result<(f64, Gradients)> + 'a>;
    let objectives: Vec<(&str, Objective)> = vec![
        (
            "rnnt",
            Box::new(|s: &ParamStore| {
                let mut g = Graph::new(s);
                let l = rnnt_objective(&m, &mut g, utt)?;
                Ok((g.value(l).item(), g.backward(l)?))
            }),
        ),
        (
            "mwer",
            Box::new(|s: &ParamStore| {
                let mut g = Graph::new(s);
                let e = g.input(e_const.clone());
                let ctx = second_pass_context(&m, &mut g, e, &first, &dcfg)?;
                let (l, _) = mwer_objective(&m.delib, &mut g, &ctx, &nbest, utt.reference(), 0.01)?;
                Ok((g.value(l).item(), g.backward(l)?))
            }),
        ),
        (
            "joint",
            Box::new(|s: &ParamStore| {
                let mut g = Graph::new(s);
                let l = joint_objective(&m, &mut g, utt, &first, 0.7, &dcfg)?;
                Ok((g.value(l).item(), g.backward(l)?))
            }),
        ),
    ];
    for (name, f) in &objectives {
        let (_, grads) = f(&m.params).unwrap();
        let err = check_params(
            |s| Ok(f(s)?.0),
            &m.params,
            &grads,
            1e-4,
            Coords::Sample {
                per_param: 2,
                seed: 1,
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn stage_names_and_validation() {
    for s in [Stage::Rnnt, Stage::DelibCe, Stage::Mwer, Stage::Joint] {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    let mut cfg = TrainConfig::new(Stage::Mwer, 0);
    cfg.mwer_beam = 1;
    assert!(cfg.validate().is_err());
    cfg.mwer_beam = 2;
    cfg.lambda = -1.0;
    assert!(cfg.validate().is_err());
    let line = StepLog {
        step: 3,
        stage: Stage::DelibCe,
        loss: 0.1,
        wall_ms: 7,
    };
    assert_eq!(line.csv(), "3,delib-ce,0.1,7");
}

#[test]
fn learning_rate_decays_linearly() {
    let mut cfg = TrainConfig::new(Stage::Rnnt, 0);
    cfg.steps = 5;
    assert_eq!(cfg.lr_at(3), cfg.lr);
    cfg.lr = 0.5;
    cfg.lr_final_scale = 0.25;
    let rates: Vec<f64> = (1..=5).map(|s| cfg.lr_at(s)).collect();
    assert_eq!(rates, vec![0.5, 0.40625, 0.3125, 0.21875, 0.125]);
    cfg.lr_final_scale = 0.0;
    assert!(cfg.validate().is_err());
}
