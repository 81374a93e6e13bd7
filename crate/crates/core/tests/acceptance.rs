//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 9`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deliberation::autodiff::{check_params, log_add_exp, log_softmax_in_place, Coords, Gradients, Graph, ParamStore, Tensor};
use deliberation::data::{SyntheticTask, TaskConfig, Utterance, Vocab, BLANK, EOS, FIRST_REGULAR, SOS};
use deliberation::decode::{
    decode_two_pass, first_pass, rescore_first_pass, second_pass_context, terminated, DecodeConfig,
};
use deliberation::eval::{
    compute_wer, estimate_flops, evaluate, heatmap_csv, heatmap_pgm, parse_heatmap_csv, parse_pgm, AttentionWeights,
    DecodeKind, EvalResult, FlopsInput,
};
use deliberation::rnnt::{beam_search, greedy_decode, SearchConfig};
use deliberation::train::{
    frozen_first_pass, joint_objective, mwer_loss, mwer_objective, mwer_value, rnnt_objective, train, ce_objective,
    OptimizerKind, Stage, StepLog, TrainConfig,
};
use deliberation::{AttentionMode, Model, ModelConfig, Settings};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: deliberation::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_model(regular: usize, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(ModelConfig::tiny(regular), seed).expect("tiny config is valid");
    m.params.randomize(scale, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xacce97));
    m
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, v).expect("consistent shape")
}

fn toy_corpus(n: usize, seed: u64) -> Vec<Utterance> {
    let cfg = TaskConfig {
        feature_dim: 3,
        min_len: 1,
        max_len: 3,
        frames_per_token: 2,
        noise_sigma: 0.3,
        signature_seed: 5,
    };
    SyntheticTask::new(Vocab::toy(3).expect("toy vocab"), cfg)
        .expect("valid task")
        .generate_corpus(seed, n)
}

fn random_utterance(frames: usize, dim: usize, seed: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let frames = deliberation::data::FrameSequence::new(frames, dim, data).expect("consistent frames");
    Utterance::new(frames, vec![FIRST_REGULAR]).expect("valid utterance")
}

/// Sum over every monotone alignment path of the joint log-distributions.
fn enumerated_nll(m: &Model, e: &Tensor, y: &[u32]) -> f64 {
    let mut g = Graph::new(&m.params);
    let ev = g.input(e.clone());
    let enc = m.rnnt.project_encoder(&mut g, ev).expect("projection");
    let pred = m.rnnt.predict_sequence(&mut g, y).expect("prediction");
    let lp = m.rnnt.joint(&mut g, enc, pred).expect("joint");
    let table = g.value(lp);
    let u1 = y.len() + 1;
    let at = |t: usize, u: usize, k: u32| table.row(t * u1 + u)[k as usize];
    fn walk(at: &dyn Fn(usize, usize, u32) -> f64, y: &[u32], frames: usize, t: usize, u: usize, acc: f64, total: &mut f64) {
        if t == frames {
            if u == y.len() {
                *total = log_add_exp(*total, acc);
            }
            return;
        }
        walk(at, y, frames, t + 1, u, acc + at(t, u, BLANK), total);
        if u < y.len() {
            walk(at, y, frames, t, u + 1, acc + at(t, u, y[u]), total);
        }
    }
    let mut total = f64::NEG_INFINITY;
    walk(&at, y, e.rows(), 0, 0, 0.0, &mut total);
    -total
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let regular = rng.random_range(1..=2);
        let m = random_model(regular, seed, 1.0);
        let frames = rng.random_range(1..=4);
        let u = rng.random_range(0..=3);
        let y: Vec<u32> = (0..u)
            .map(|_| rng.random_range(FIRST_REGULAR..FIRST_REGULAR + regular as u32))
            .collect();
        let e = random_matrix(frames, m.config.encoder_dim(), &mut rng);
        let oracle = enumerated_nll(&m, &e, &y);
        let mut g = Graph::new(&m.params);
        let ev = g.input(e);
        let loss = lib(m.rnnt.loss(&mut g, ev, &y))?;
        worst = worst.max((g.value(loss).item() - oracle).abs());
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    ensure(worst <= 1e-8, || format!("max |dp - enumeration| = {worst:e}"))?;
    Ok(format!("50 models, max |dp - enumeration| = {worst:.2e}, {:.2?}", start.elapsed()))
}

/// Central-difference step.
const FD_STEP: f64 = 1e-4;

type Objective<'a> = Box<dyn Fn(&ParamStore) -> deliberation::Result<(f64, Gradients)> + 'a>;

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let corpus = toy_corpus(20, 77);
    let dcfg = DecodeConfig {
        first_beam: 3,
        hyps: 2,
        max_len: Some(6),
        ..DecodeConfig::default()
    };
    let mut worst = [0.0f64; 4];
    let names = ["ce", "rnnt", "mwer+ce", "joint"];
    for seed in 0..20u64 {
        let m = random_model(3, 500 + seed, 0.4);
        let utt = &corpus[seed as usize];
        let mode = [AttentionMode::Both, AttentionMode::AcousticsOnly, AttentionMode::TextOnly][seed as usize % 3];
        let cfg = DecodeConfig {
            mode,
            use_ae: seed % 2 == 0,
            ..dcfg
        };
        let (e_const, first) = lib(frozen_first_pass(&m, utt, &cfg))?;
        let nbest = vec![utt.reference().to_vec(), vec![FIRST_REGULAR, FIRST_REGULAR + 1], vec![FIRST_REGULAR + 2]];
        let context_loss = |s: &ParamStore, kind: usize| -> deliberation::Result<(f64, Gradients)> {
            let mut g = Graph::new(s);
            let e = g.input(e_const.clone());
            let ctx = second_pass_context(&m, &mut g, e, &first, &cfg)?;
            let l = if kind == 0 {
                ce_objective(&m.delib, &mut g, &ctx, utt.reference())?
            } else {
                mwer_objective(&m.delib, &mut g, &ctx, &nbest, utt.reference(), 0.01)?.0
            };
            Ok((g.value(l).item(), g.backward(l)?))
        };
        let objectives: [Objective; 4] = [
            Box::new(|s| context_loss(s, 0)),
            Box::new(|s| {
                let mut g = Graph::new(s);
                let l = rnnt_objective(&m, &mut g, utt)?;
                Ok((g.value(l).item(), g.backward(l)?))
            }),
            Box::new(|s| context_loss(s, 1)),
            Box::new(|s| {
                let mut g = Graph::new(s);
                let l = joint_objective(&m, &mut g, utt, &first, 1.0, &cfg)?;
                Ok((g.value(l).item(), g.backward(l)?))
            }),
        ];
        for (k, f) in objectives.iter().enumerate() {
            let (_, grads) = lib(f(&m.params))?;
            let coords = Coords::Sample {
                per_param: 2,
                seed: seed + 1,
            };
            let err = lib(check_params(|s| Ok(f(s)?.0), &m.params, &grads, FD_STEP, coords))?;
            worst[k] = worst[k].max(err);
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    let summary = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|&w| w <= 1e-4), || format!("max relative error above 1e-4: {summary}"))?;
    Ok(format!("20 configurations per loss, max relative error {summary}, {:.1?}", start.elapsed()))
}

fn mwer_graph(log_probs: &[f64], errors: &[usize]) -> deliberation::Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars: Vec<_> = log_probs.iter().map(|&x| g.input(Tensor::scalar(x))).collect();
    let (l, _) = mwer_loss(&mut g, &vars, errors)?;
    Ok(g.value(l).item())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..8 {
        let lp: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..0.0)).collect();
        let w = rng.random_range(0..6);
        let errors = vec![w; n];
        let (v, _) = lib(mwer_value(&lp, &errors))?;
        let gv = lib(mwer_graph(&lp, &errors))?;
        ensure(v == 0.0 && gv == 0.0, || format!("equal errors gave {v} / {gv}"))?;
    }
    let hand = [0.6f64.ln(), 0.4f64.ln()];
    let (v, stats) = lib(mwer_value(&hand, &[2, 0]))?;
    let gv = lib(mwer_graph(&hand, &[2, 0]))?;
    ensure((v - 0.2).abs() <= 1e-12 && (gv - 0.2).abs() <= 1e-12, || format!("hand case gave {v} / {gv}"))?;
    ensure(stats.mean_error == 1.0, || format!("mean error {}", stats.mean_error))?;
    let lp = [-0.5, -1.25, -3.0, -0.75];
    let errors = [3, 1, 0, 2];
    let (base, _) = lib(mwer_value(&lp, &errors))?;
    let base_graph = lib(mwer_graph(&lp, &errors))?;
    for offset in [-64.0, -2.5, 0.125, 7.0, 1024.0] {
        let shifted: Vec<f64> = lp.iter().map(|x| x + offset).collect();
        let (v, _) = lib(mwer_value(&shifted, &errors))?;
        let gv = lib(mwer_graph(&shifted, &errors))?;
        ensure(v == base && gv == base_graph, || format!("offset {offset} changed the loss: {v} vs {base}"))?;
    }
    Ok("equal errors give 0, hand case 0.2, 5 offsets leave the loss bit-identical".into())
}

/// Regular-symbol sequences over `regular` symbols of length at most `max`.
fn all_sequences(regular: u32, max: usize) -> Vec<Vec<u32>> {
    let mut all = vec![Vec::new()];
    let mut frontier = all.clone();
    for _ in 0..max {
        frontier = frontier
            .iter()
            .flat_map(|p| (FIRST_REGULAR..FIRST_REGULAR + regular).map(move |k| [p.clone(), vec![k]].concat()))
            .collect();
        all.extend(frontier.clone());
    }
    all
}

fn criterion_4() -> Outcome {
    let mut cases = 0;
    for seed in 0..12u64 {
        let regular = 1 + (seed % 2) as usize;
        let m = random_model(regular, 40 + seed, 1.0);
        let utt = random_utterance(3 + seed as usize % 3, m.config.feature_dim, seed);
        let max_len = 4;
        let cfg = DecodeConfig {
            second_beam: 10_000,
            max_len: Some(max_len),
            ..DecodeConfig::default()
        };
        let found = lib(decode_two_pass(&m, &utt, &cfg))?;
        let mut g = Graph::new(&m.params);
        let (e, first) = lib(first_pass(&m, &mut g, &utt, &cfg))?;
        let ctx = lib(second_pass_context(&m, &mut g, e, &first, &cfg))?;
        let mut best: Option<(f64, Vec<u32>)> = None;
        for y in all_sequences(regular as u32, max_len - 1) {
            let lp = lib(m.delib.sequence_log_prob(&mut g, &ctx, &terminated(&y)))?;
            let s = g.value(lp).item();
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, y));
            }
        }
        let (_, argmax) = best.expect("at least the empty sequence");
        let top = found.second.top().map(|h| h.tokens.clone());
        ensure(top.as_ref() == Some(&argmax), || format!("seed {seed}: search {top:?}, argmax {argmax:?}"))?;
        cases += 1;
    }
    for seed in 0..20u64 {
        let m = random_model(3, 200 + seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_matrix(rng.random_range(1..7), m.config.encoder_dim(), &mut rng);
        let mut g = Graph::new(&m.params);
        let ev = g.input(e);
        let cfg = SearchConfig {
            beam: 1,
            max_symbols_per_frame: 3,
        };
        let beam = lib(beam_search(&m.rnnt, &mut g, ev, cfg))?;
        let greedy = lib(greedy_decode(&m.rnnt, &mut g, ev, 3))?;
        ensure(beam.len() == 1 && beam.top() == Some(&greedy), || {
            format!("seed {seed}: beam-1 {:?} vs greedy {greedy:?}", beam.top())
        })?;
    }
    Ok(format!("{cases} exhaustive second-pass searches equal the argmax, 20 beam-1 runs equal greedy"))
}

/// Teacher-forced log-probability by stepping the decoder one token at a time.
fn stepped_log_prob(m: &Model, g: &mut Graph, ctx: &deliberation::delib::DelibContext, y: &[u32]) -> f64 {
    let mut state = m.delib.initial_state(g, 1);
    let mut prev = SOS;
    let mut total = 0.0;
    for &t in y {
        let out = m.delib.step(g, ctx, &[prev], &state).expect("decoder step");
        let mut row = g.value(out.logits).row(0).to_vec();
        log_softmax_in_place(&mut row);
        total += row[t as usize];
        prev = t;
        state = out.state;
    }
    total
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut hyps = 0;
    for seed in 0..10u64 {
        let m = random_model(4, 60 + seed, 0.8);
        let utt = random_utterance(6 + seed as usize % 4, m.config.feature_dim, 90 + seed);
        let cfg = DecodeConfig {
            first_beam: 6,
            hyps: 3,
            use_ae: seed % 2 == 1,
            ..DecodeConfig::default()
        };
        let out = lib(rescore_first_pass(&m, &utt, &cfg))?;
        let mut a: Vec<_> = out.first.iter().map(|h| h.tokens.clone()).collect();
        let mut b: Vec<_> = out.second.iter().map(|h| h.tokens.clone()).collect();
        a.sort();
        b.sort();
        ensure(a == b, || format!("seed {seed}: rescored beam is not a permutation"))?;
        let mut g = Graph::new(&m.params);
        let (e, first) = lib(first_pass(&m, &mut g, &utt, &cfg))?;
        let ctx = lib(second_pass_context(&m, &mut g, e, &first, &cfg))?;
        for h in out.second.iter() {
            let mut y = h.tokens.clone();
            y.push(EOS);
            worst = worst.max((stepped_log_prob(&m, &mut g, &ctx, &y) - h.log_prob).abs());
            hyps += 1;
        }
        ensure(out.second.hyps().windows(2).all(|w| w[0].log_prob >= w[1].log_prob), || {
            format!("seed {seed}: rescored beam is not sorted")
        })?;
    }
    ensure(worst <= 1e-9, || format!("max score difference {worst:e}"))?;
    Ok(format!("10 beams ({hyps} hypotheses) permuted, max score difference {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let input = FlopsInput::reference_deliberation();
    let full = estimate_flops(&input) / 1e9;
    let las = estimate_flops(&input.without_text()) / 1e9;
    let ratio = full / las;
    ensure((7.0..=9.5).contains(&full), || format!("{full:.4} GFLOPS outside [7.0, 9.5]"))?;
    ensure((1.5..=2.1).contains(&ratio), || format!("ratio {ratio:.4} outside [1.5, 2.1]"))?;
    Ok(format!("{full:.4} GFLOPS, acoustic-only {las:.4} GFLOPS, ratio {ratio:.4}"))
}

/// Settings of the end-to-end run. Every second-pass configuration gets the
/// same training budget.
struct TrendRecipe {
    settings: Settings,
    rnnt_steps: usize,
    delib_steps: usize,
    mwer_steps: usize,
    mwer_lr: f64,
    train_utterances: usize,
    test_utterances: usize,
}

impl TrendRecipe {
    fn new() -> deliberation::Result<Self> {
        let settings = Settings::default()
            .with("noise_sigma", 0.55)?
            .with("init", "fan-in")?
            .with("optimizer", "adam")?
            .with("lr", 0.01)?
            .with("clip_norm", 5)?
            .with("lr_final_scale", 0.1)?;
        Ok(Self {
            settings,
            rnnt_steps: 3000,
            delib_steps: 4000,
            mwer_steps: 300,
            mwer_lr: 0.001,
            train_utterances: 2000,
            test_utterances: 200,
        })
    }

    fn train_config(&self, stage: Stage, steps: usize, seed: u64, mode: AttentionMode) -> deliberation::Result<TrainConfig> {
        let mut cfg = TrainConfig::from_settings(&self.settings.clone().with("seed", seed)?)?;
        cfg.stage = stage;
        cfg.steps = steps;
        cfg.decode.mode = mode;
        Ok(cfg)
    }
}

struct TrendRun {
    first_pass: f64,
    beam: [f64; 3],
    rescore_both: f64,
    mwer_beam: f64,
    elapsed: Duration,
}

/// Utterance `i` of a corpus uses seed `seed + i`, so the two ranges must
/// not overlap.
const TRAIN_SEED: u64 = 11;
const TEST_SEED: u64 = 1_000_000;

const MODES: [AttentionMode; 3] = [AttentionMode::Both, AttentionMode::AcousticsOnly, AttentionMode::TextOnly];

fn run_trend(recipe: &TrendRecipe) -> deliberation::Result<TrendRun> {
    let start = Instant::now();
    let s = &recipe.settings;
    let task = SyntheticTask::new(Vocab::toy(s.usize("vocab_size")?)?, TaskConfig::from_settings(s)?)?;
    let train_set = task.generate_corpus(TRAIN_SEED, recipe.train_utterances);
    let test_set = task.generate_corpus(TEST_SEED, recipe.test_utterances);
    let mut base = Model::with_init(ModelConfig::from_settings(s)?, 13, s.get("init").parse()?)?;
    let rnnt = recipe.train_config(Stage::Rnnt, recipe.rnnt_steps, 14, AttentionMode::Both)?;
    train(&mut base, &train_set, &rnnt, |_| {})?;
    let decode = DecodeConfig::from_settings(s)?;
    let score = |m: &Model, mode: AttentionMode, kind: DecodeKind| -> deliberation::Result<EvalResult> {
        evaluate(m, &test_set, &DecodeConfig { mode, ..decode }, kind, 1)
    };
    let first_pass = score(&base, AttentionMode::Both, DecodeKind::FirstPass)?.wer;
    let mut beam = [0.0; 3];
    let mut both = None;
    for (i, &mode) in MODES.iter().enumerate() {
        let mut m = base.clone();
        m.config.attention = mode;
        let cfg = recipe.train_config(Stage::DelibCe, recipe.delib_steps, 15, mode)?;
        train(&mut m, &train_set, &cfg, |_| {})?;
        beam[i] = score(&m, mode, DecodeKind::Beam)?.wer;
        if mode == AttentionMode::Both {
            both = Some(m);
        }
    }
    let mut both = both.expect("both is trained");
    let rescore_both = score(&both, AttentionMode::Both, DecodeKind::Rescore)?.wer;
    let mut mwer = recipe.train_config(Stage::Mwer, recipe.mwer_steps, 16, AttentionMode::Both)?;
    mwer.lr = recipe.mwer_lr;
    train(&mut both, &train_set, &mwer, |_| {})?;
    let mwer_beam = score(&both, AttentionMode::Both, DecodeKind::Beam)?.wer;
    Ok(TrendRun {
        first_pass,
        beam,
        rescore_both,
        mwer_beam,
        elapsed: start.elapsed(),
    })
}

fn criterion_7() -> Outcome {
    let recipe = lib(TrendRecipe::new())?;
    let run = lib(run_trend(&recipe))?;
    let [both, acoustic, text] = run.beam;
    let summary = format!(
        "first pass {:.4}, both {both:.4}, acoustic {acoustic:.4}, text {text:.4}, both rescore {:.4}, after MWER {:.4}, {:.0?}",
        run.first_pass, run.rescore_both, run.mwer_beam, run.elapsed
    );
    let mut failed = Vec::new();
    if !(0.10..=0.30).contains(&run.first_pass) {
        failed.push("first-pass WER outside 10-30%");
    }
    if both > 0.9 * run.first_pass {
        failed.push("(a) both improves by less than 10% relative");
    }
    if both > acoustic.min(text) {
        failed.push("(b) both is worse than a single attention");
    }
    if run.mwer_beam > both {
        failed.push("(c) MWER degrades WER");
    }
    if both > run.rescore_both + 0.01 {
        failed.push("(d) beam search worse than rescoring by more than 1 point");
    }
    if run.elapsed > Duration::from_secs(15 * 60) {
        failed.push("runtime above 15 min");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failed.join("; ")))
    }
}

fn log_bits(logs: &[StepLog]) -> Vec<(usize, u64)> {
    logs.iter().map(|l| (l.step, l.loss.to_bits())).collect()
}

fn criterion_8() -> Outcome {
    let corpus = toy_corpus(16, 31);
    let small = DecodeConfig {
        first_beam: 3,
        second_beam: 3,
        hyps: 2,
        max_len: Some(6),
        ..DecodeConfig::default()
    };
    let mut stages = 0;
    for stage in [Stage::Rnnt, Stage::DelibCe, Stage::Mwer, Stage::Joint] {
        let run = |threads: usize| -> deliberation::Result<(Vec<(usize, u64)>, Vec<u64>)> {
            let mut m = Model::new(ModelConfig::tiny(3), 21)?;
            let cfg = TrainConfig {
                steps: 10,
                batch_size: 4,
                optimizer: OptimizerKind::Adam,
                lr: 0.01,
                threads,
                decode: small,
                ..TrainConfig::new(stage, 22)
            };
            let logs = train(&mut m, &corpus, &cfg, |_| {})?;
            let fingerprints = deliberation::autodiff::Group::ALL.iter().map(|&g| m.params.fingerprint(g)).collect();
            Ok((log_bits(&logs), fingerprints))
        };
        let reference = lib(run(1))?;
        for threads in [1, 2, 4] {
            ensure(lib(run(threads))? == reference, || format!("{} differs at {threads} threads", stage.name()))?;
        }
        stages += 1;
    }
    let m = random_model(3, 23, 0.5);
    for kind in [DecodeKind::FirstPass, DecodeKind::Beam, DecodeKind::Rescore] {
        let reference = lib(evaluate(&m, &corpus, &small, kind, 1))?;
        for threads in [1, 2, 4] {
            let other = lib(evaluate(&m, &corpus, &small, kind, threads))?;
            let same = other.outputs == reference.outputs && other.wer.to_bits() == reference.wer.to_bits();
            ensure(same, || format!("{kind} decoding differs at {threads} threads"))?;
        }
    }
    Ok(format!("{stages} stages x 10 steps and 3 decode modes bit-identical at 1, 2 and 4 threads"))
}

fn naive_edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for i in 0..1000 {
        let r: Vec<u32> = (0..rng.random_range(1..12)).map(|_| rng.random_range(3..9)).collect();
        let h: Vec<u32> = (0..rng.random_range(0..12)).map(|_| rng.random_range(3..9)).collect();
        let expected = naive_edit_distance(&h, &r) as f64 / r.len() as f64;
        let got = lib(compute_wer(std::slice::from_ref(&r), std::slice::from_ref(&h)))?;
        ensure(got == expected, || format!("pair {i}: {got} vs {expected}"))?;
        refs.push(r);
        hyps.push(h);
    }
    let errors: usize = refs.iter().zip(&hyps).map(|(r, h)| naive_edit_distance(h, r)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    let corpus = lib(compute_wer(&refs, &hyps))?;
    let expected = errors as f64 / words as f64;
    ensure(corpus == expected, || format!("corpus WER {corpus} vs {expected}"))?;
    Ok(format!("1000 pairs exact, corpus WER {corpus:.6}"))
}

fn criterion_10() -> Outcome {
    let matrices = [
        (1, 1, vec![1.0]),
        (2, 3, vec![0.2, 0.3, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        (3, 4, vec![0.7, 0.1, 0.1, 0.1, 0.0, 0.0, 1.0, 0.0, 0.123456789, 0.876543211, 0.0, 0.0]),
    ];
    for (rows, cols, values) in matrices {
        let w = lib(AttentionWeights::new(rows, cols, values.clone()))?;
        let source: Vec<String> = (0..cols).map(|c| format!("s{c}")).collect();
        let output: Vec<String> = (0..rows).map(|r| format!("o{r}")).collect();
        let csv = lib(heatmap_csv(&w, &source, &output))?;
        let (parsed, src, out) = lib(parse_heatmap_csv(&csv))?;
        ensure(src == source && out == output, || format!("{rows}x{cols}: labels changed"))?;
        ensure(parsed.len() == rows && parsed.iter().all(|r| r.len() == cols), || format!("{rows}x{cols}: CSV shape"))?;
        for (r, row) in parsed.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                let v = values[r * cols + c];
                ensure((p - v).abs() <= 5e-7, || format!("{rows}x{cols}: ({r},{c}) {p} vs {v}"))?;
            }
        }
        let (pw, ph, pixels) = lib(parse_pgm(&heatmap_pgm(&w)))?;
        ensure(pw == cols && ph == rows, || format!("PGM is {pw}x{ph}, expected {cols}x{rows}"))?;
        let expected: Vec<u8> = values.iter().map(|p| (255.0 * p).round() as u8).collect();
        ensure(pixels == expected, || format!("{rows}x{cols}: pixels {pixels:?} vs {expected:?}"))?;
    }
    Ok("3 matrices round-trip within 5e-7, PGM sizes and pixels match".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("RNN-T loss equals alignment enumeration", criterion_1),
        ("gradients match finite differences", criterion_2),
        ("expected-error loss properties", criterion_3),
        ("exhaustive decoding oracles", criterion_4),
        ("rescoring contract", criterion_5),
        ("cost estimate", criterion_6),
        ("end-to-end trends", criterion_7),
        ("determinism across thread counts", criterion_8),
        ("WER equals naive edit distance", criterion_9),
        ("heatmap export", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
