use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use deliberation::config::parse_config;
use deliberation::data::{read_corpus, write_corpus, SyntheticTask, TaskConfig, Utterance, Vocab, FIRST_REGULAR};
use deliberation::decode::{format_nbest, format_top1, DecodeConfig};
use deliberation::eval::{
    attention_trace, estimate_flops, evaluate, export_heatmap, run_ablation, AblationGrid, AttentionSide, AttentionSize,
    DecodeKind, FlopsInput,
};
use deliberation::model::MODEL_KEYS;
use deliberation::train::{
    load_checkpoint, load_checkpoint_with_settings, save_checkpoint_with_settings, train as run_training, TrainConfig,
    LOG_HEADER,
};
use deliberation::{AttentionMode, Model, ModelConfig, Settings};

use crate::{CliError, CliResult, Common, DecodeFlags, OnOff, Side};

type Pairs = Vec<(String, String)>;

fn split_set(item: &str) -> CliResult<(String, String)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Config file pairs followed by flag overrides, in precedence order.
fn explicit_pairs(common: &Common, flags: Vec<(&str, Option<String>)>) -> CliResult<(Pairs, Pairs)> {
    let file = match &common.config {
        Some(path) => parse_config(&fs::read_to_string(path)?)?.into_iter().collect(),
        None => Vec::new(),
    };
    let mut overrides: Pairs = common.set.iter().map(|s| split_set(s)).collect::<CliResult<_>>()?;
    let fixed = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
    ];
    for (k, v) in flags.into_iter().chain(fixed) {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    Ok((file, overrides))
}

fn decode_pairs(d: &DecodeFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("decode_mode", d.mode.clone()),
        ("attention", d.attention.clone()),
        ("hyps", d.hyps.map(|v| v.to_string())),
        ("use_ae", d.ae.map(|v| v.value().to_string())),
    ]
}

fn resolve(common: &Common, flags: Vec<(&str, Option<String>)>) -> CliResult<Settings> {
    let (file, overrides) = explicit_pairs(common, flags)?;
    let mut s = Settings::default();
    for (k, v) in file.iter().chain(&overrides) {
        s.set(k, v)?;
    }
    Ok(s)
}

/// Settings for a run on a loaded checkpoint: the checkpoint's settings
/// (without its seed) are the defaults and fix the architecture; explicit
/// architecture values must agree with it.
fn resolve_with_checkpoint(common: &Common, flags: Vec<(&str, Option<String>)>, stored: Settings) -> CliResult<Settings> {
    let (file, overrides) = explicit_pairs(common, flags)?;
    let mut s = stored.with("seed", "")?;
    let arch = s.clone();
    for (k, v) in file.iter().chain(&overrides) {
        s.set(k, v)?;
        if MODEL_KEYS.contains(&k.as_str()) && k != "attention" && s.get(k) != arch.get(k) {
            return Err(CliError::Usage(format!(
                "{k} = {v} conflicts with the checkpoint ({})",
                arch.get(k)
            )));
        }
    }
    Ok(s)
}

fn print_settings(s: &Settings) {
    print!("{}", s.to_text());
}

fn note(line: impl AsRef<str>) {
    println!("# {}", line.as_ref());
}

fn vocab_of(config: &ModelConfig) -> CliResult<Vocab> {
    Ok(Vocab::toy(config.vocab_size - FIRST_REGULAR as usize)?)
}

fn load_data(path: &Path) -> CliResult<Vec<Utterance>> {
    let data = read_corpus(path)?;
    if data.is_empty() {
        return Err(deliberation::Error::Format(format!("{} holds no utterances", path.display())).into());
    }
    Ok(data)
}

fn check_dims(model: &Model, data: &[Utterance]) -> CliResult<()> {
    if let Some(u) = data.iter().find(|u| u.frames().dim() != model.config.feature_dim) {
        return Err(deliberation::Error::Format(format!(
            "corpus feature dim {} differs from the model's {}",
            u.frames().dim(),
            model.config.feature_dim
        ))
        .into());
    }
    let vocab = model.config.vocab_size as u32;
    if let Some(&t) = data.iter().flat_map(|u| u.reference()).find(|&&t| t >= vocab) {
        return Err(deliberation::Error::TokenOutOfRange {
            id: t,
            vocab: vocab as usize,
        }
        .into());
    }
    Ok(())
}

pub fn gen_data(common: &Common, utterances: Option<usize>, out: &Path) -> CliResult<()> {
    let s = resolve(common, vec![("utterances", utterances.map(|v| v.to_string()))])?;
    let seed = s.seed()?;
    print_settings(&s);
    let task = SyntheticTask::new(Vocab::toy(s.usize("vocab_size")?)?, TaskConfig::from_settings(&s)?)?;
    let corpus = task.generate_corpus(seed, s.usize("utterances")?);
    write_corpus(out, &corpus)?;
    note(format!("wrote {} utterances to {} (seed {seed})", corpus.len(), out.display()));
    Ok(())
}

pub fn train(
    common: &Common,
    mut flags: Vec<(&str, Option<String>)>,
    decode: &DecodeFlags,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> CliResult<()> {
    flags.extend(decode_pairs(decode));
    let (s, mut model) = match init {
        Some(path) => {
            let (model, stored) = load_checkpoint_with_settings(path)?;
            (resolve_with_checkpoint(common, flags, stored)?, model)
        }
        None => {
            let s = resolve(common, flags)?;
            let model = Model::with_init(ModelConfig::from_settings(&s)?, s.seed()?, s.get("init").parse()?)?;
            (s, model)
        }
    };
    let mut model_cfg = model.config.clone();
    model_cfg.attention = s.get("attention").parse()?;
    model.config = model_cfg;
    let cfg = TrainConfig::from_settings(&s)?;
    print_settings(&s);
    let corpus = load_data(data)?;
    check_dims(&model, &corpus)?;
    let every = (cfg.steps / 10).max(1);
    let mut lines = format!("{LOG_HEADER}\n");
    let logs = run_training(&mut model, &corpus, &cfg, |l| {
        lines.push_str(&l.csv());
        lines.push('\n');
        if l.step % every == 0 || l.step == cfg.steps {
            note(format!("step {} loss {}", l.step, l.loss));
        }
    })?;
    if let Some(path) = log {
        fs::write(path, lines)?;
    }
    save_checkpoint_with_settings(out, &model, &s)?;
    note(format!("{} steps of {} (seed {}); checkpoint {}", logs.len(), cfg.stage, cfg.seed, out.display()));
    Ok(())
}

fn decode_setup(
    common: &Common,
    flags: &DecodeFlags,
    checkpoint: &Path,
) -> CliResult<(Settings, Model, DecodeConfig, DecodeKind)> {
    let (model, stored) = load_checkpoint_with_settings(checkpoint)?;
    let s = resolve_with_checkpoint(common, decode_pairs(flags), stored)?;
    let cfg = DecodeConfig::from_settings(&s)?;
    let kind: DecodeKind = s.get("decode_mode").parse()?;
    print_settings(&s);
    Ok((s, model, cfg, kind))
}

pub fn decode(
    common: &Common,
    flags: &DecodeFlags,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    nbest: Option<&Path>,
) -> CliResult<()> {
    let (s, model, cfg, kind) = decode_setup(common, flags, checkpoint)?;
    let corpus = load_data(data)?;
    check_dims(&model, &corpus)?;
    let vocab = vocab_of(&model.config)?;
    let render = |t: &[u32]| vocab.render(t);
    let start = Instant::now();
    let result = evaluate(&model, &corpus, &cfg, kind, s.usize("threads")?)?;
    let (mut top, mut all) = (String::new(), String::new());
    for (i, o) in result.outputs.iter().enumerate() {
        let id = format!("utt{i:05}");
        let _ = writeln!(top, "{}", format_top1(&id, &o.second, render));
        all.push_str(&format_nbest(&id, &o.second, render));
    }
    fs::write(out, top)?;
    if let Some(path) = nbest {
        fs::write(path, all)?;
    }
    note(format!(
        "decoded {} utterances ({kind}) in {} ms; wer {:.6}; first-pass wer {:.6}",
        corpus.len(),
        start.elapsed().as_millis(),
        result.wer,
        result.first_pass_wer
    ));
    Ok(())
}

pub fn eval(common: &Common, flags: &DecodeFlags, checkpoint: &Path, data: &Path) -> CliResult<()> {
    let (s, model, cfg, kind) = decode_setup(common, flags, checkpoint)?;
    let corpus = load_data(data)?;
    check_dims(&model, &corpus)?;
    let result = evaluate(&model, &corpus, &cfg, kind, s.usize("threads")?)?;
    note(format!("utterances {}", corpus.len()));
    note(format!("first-pass wer {:.6}", result.first_pass_wer));
    note(format!("{kind} wer {:.6}", result.wer));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn flops(mb: f64, md: f64, n: f64, h: f64, b: f64, frames: f64, lpad: f64, attention_params: f64) -> CliResult<()> {
    let values = [mb, md, n, h, b, frames, lpad, attention_params];
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CliError::Usage("flops inputs must be finite and non-negative".into()));
    }
    let layer = AttentionSize::even(attention_params / 2.0);
    let input = FlopsInput {
        m_b: mb,
        m_d: md,
        n,
        h,
        b,
        t_frames: frames,
        l_pad: lpad,
        acoustic: Some(layer),
        text: Some(layer),
    };
    println!("mb = {mb}\nmd = {md}\nn = {n}\nh = {h}\nb = {b}\nframes = {frames}\nlpad = {lpad}\nattention_params = {attention_params}");
    let full = estimate_flops(&input);
    let las = estimate_flops(&input.without_text());
    println!("deliberation_gflops = {:.4}", full / 1e9);
    println!("acoustic_only_gflops = {:.4}", las / 1e9);
    if las > 0.0 {
        println!("ratio = {:.4}", full / las);
    }
    Ok(())
}

pub fn heatmap(
    common: &Common,
    flags: &DecodeFlags,
    checkpoint: &Path,
    data: &Path,
    index: usize,
    side: Side,
    out: &Path,
) -> CliResult<()> {
    let (_, model, cfg, kind) = decode_setup(common, flags, checkpoint)?;
    let corpus = load_data(data)?;
    check_dims(&model, &corpus)?;
    let utt = corpus
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("utterance {index} out of range (corpus has {})", corpus.len())))?;
    let side = match side {
        Side::Text => AttentionSide::Text,
        Side::Acoustic => AttentionSide::Acoustic,
    };
    let trace = attention_trace(&model, utt, &cfg, kind, side)?;
    let vocab = vocab_of(&model.config)?;
    let sym = |t: u32| vocab.symbol(t).unwrap_or("?").to_string();
    let l_pad = model.config.l_pad;
    let sources: Vec<String> = trace
        .sources
        .iter()
        .enumerate()
        .map(|(r, t)| match t {
            Some(t) => format!("h{}:{}", r / l_pad, sym(*t)),
            None => format!("t{r}"),
        })
        .collect();
    let outputs: Vec<String> = trace.outputs.iter().map(|&t| sym(t)).collect();
    export_heatmap(&trace.weights, &sources, &outputs, out)?;
    note(format!(
        "{}x{} weights written to {}.csv and .pgm",
        trace.weights.rows(),
        trace.weights.cols(),
        out.with_extension("").display()
    ));
    Ok(())
}

pub struct AblateGrid {
    pub hyps: Vec<usize>,
    pub modes: Vec<String>,
    pub ae: Vec<OnOff>,
    pub decodes: Vec<String>,
}

pub fn ablate(
    common: &Common,
    dir: &Path,
    baseline: Option<&Path>,
    data: &Path,
    out: &Path,
    grid: AblateGrid,
) -> CliResult<()> {
    let baseline_path = baseline.map(Path::to_path_buf).unwrap_or_else(|| dir.join("rnnt.ckpt"));
    let (base, stored) = load_checkpoint_with_settings(&baseline_path)?;
    let s = resolve_with_checkpoint(common, Vec::new(), stored)?;
    print_settings(&s);
    let grid = AblationGrid {
        modes: grid.modes.iter().map(|m| m.parse()).collect::<Result<Vec<AttentionMode>, _>>()?,
        hyps: grid.hyps,
        ae: grid.ae.iter().map(|&a| a == OnOff::On).collect(),
        decode: grid.decodes.iter().map(|d| d.parse()).collect::<Result<Vec<DecodeKind>, _>>()?,
    };
    let corpus = load_data(data)?;
    check_dims(&base, &corpus)?;
    let cfg = DecodeConfig::from_settings(&s)?;
    let report = run_ablation(&corpus, &base, &grid, &cfg, s.usize("threads")?, |key| {
        Ok(load_checkpoint(&dir.join(key.checkpoint_name()))?)
    })?;
    let csv = report.to_csv();
    fs::write(out, &csv)?;
    for line in csv.lines() {
        note(line);
    }
    Ok(())
}
