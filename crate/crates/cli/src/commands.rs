use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ahnlab::analysis::{complexity_with, grad_probe, preset, ratios, ComplexitySpec, MixerKind};
use ahnlab::attention::MixerMode;
use ahnlab::corpus::{write_synthetic, Corpus, Split};
use ahnlab::distill::{eval_csv, evaluate_modes, DistillConfig, Objective, Phase, Sampler, StepMetrics, Trainer};
use ahnlab::kvtext::KvText;
use ahnlab::model::{ArraySelect, Container, Mixer, Model, ModelConfig};
use ahnlab::Error;
use anyhow::{Context, Result};
use clap::Args;

use crate::run_config::{emit, ensure_dir, parse_list, Common, Overrides, RunConfig};

const TRAIN_KEYS: &[&str] = &[
    "phase",
    "corpus",
    "base",
    "checkpoint_every",
    "eval_sequences",
    "log_every",
];

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory holding `train/` and `heldout/`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// `pretrain` (all base weights, cross-entropy) or `distill` (memory only).
    #[arg(long)]
    phase: Option<Phase>,
    /// Base checkpoint whose weights are frozen during distillation.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    /// Fixed window `N` or inclusive range `LO..HI`.
    #[arg(long)]
    window_sampler: Option<Sampler>,
    #[arg(long)]
    sink_sampler: Option<Sampler>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from `model.ckpt` and `state.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop (after checkpointing) once this many steps are done, keeping the schedule.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Any other config key, as `KEY=VALUE`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

pub fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let mut ov = Overrides::default();
    ov.path("corpus", &a.corpus)
        .opt("phase", &a.phase)
        .path("base", &a.base)
        .opt("objective", &a.objective)
        .opt("window_sampler", &a.window_sampler)
        .opt("sink_sampler", &a.sink_sampler)
        .opt("lr", &a.lr)
        .opt("steps", &a.steps)
        .opt("batch_size", &a.batch_size)
        .opt("seq_len", &a.seq_len)
        .opt("checkpoint_every", &a.checkpoint_every)
        .pairs(&a.set)?;
    let known: Vec<&str> = TRAIN_KEYS
        .iter()
        .chain(ModelConfig::keys())
        .chain(DistillConfig::keys())
        .copied()
        .collect();
    let rc = RunConfig::resolve(common, ov.0, &known)?;

    let phase: Phase = rc.get("phase")?.unwrap_or(Phase::Distill);
    let checkpoint_every: usize = rc.get("checkpoint_every")?.unwrap_or(100);
    let log_every: usize = rc.get("log_every")?.unwrap_or(50).max(1);
    let eval_sequences: usize = rc.get("eval_sequences")?.unwrap_or(16);
    let base = rc.path("base");
    if phase == Phase::Pretrain && base.is_some() {
        return Err(Error::Config("`base` applies to the distill phase only".into()).into());
    }
    let corpus_dir = rc.require_path("corpus")?;
    let corpus = Corpus::load(&corpus_dir)?;

    let out = &common.out_dir;
    ensure_dir(out)?;
    let (model_path, state_path, log_path) = (
        out.join("model.ckpt"),
        out.join("state.ckpt"),
        out.join("train.log.tsv"),
    );

    let seed: u64 = rc.get("seed")?.unwrap_or(0);
    let model = if a.resume {
        Model::<f32>::load_checkpoint(&model_path)?
    } else {
        fresh_model(&rc, phase, base.as_deref(), seed)?
    };
    let dcfg = distill_config(&rc, &model.cfg)?;
    let mut log: Vec<String>;
    let mut trainer = if a.resume {
        let trainer = Trainer::resume(model, &Container::load(&state_path)?)?;
        if trainer.cfg != dcfg || trainer.phase != phase {
            return Err(Error::Config("resolved config differs from the run being resumed".into()).into());
        }
        log = read_log(&log_path, trainer.step)?;
        trainer
    } else {
        let total = dcfg.total_steps(corpus.bytes(Split::Train));
        log = vec![StepMetrics::TSV_HEADER.to_string()];
        Trainer::new(model, dcfg, phase, total)?
    };

    // Echo the fully resolved settings next to the artifacts.
    let mut resolved = trainer.model.cfg.to_kv();
    resolved.merge(&trainer.cfg.to_kv());
    resolved.set("phase", phase);
    resolved.set("corpus", corpus_dir.display());
    if let Some(b) = &base {
        resolved.set("base", b.display());
    }
    resolved.set("checkpoint_every", checkpoint_every);
    resolved.set("eval_sequences", eval_sequences);
    resolved.set("log_every", log_every);
    let config_path = emit(out, "config.txt", resolved.to_text().as_bytes())?;

    let total = trainer.total;
    let stop = a.stop_after.map_or(total, |s| s.min(total));
    let started = Instant::now();
    let save = |trainer: &Trainer<f32>, log: &[String]| -> Result<()> {
        trainer.model.save_checkpoint(&model_path)?;
        trainer.save_state(&state_path)?;
        emit(out, "train.log.tsv", (log.join("\n") + "\n").as_bytes())?;
        Ok(())
    };
    while trainer.step < stop {
        let m = match trainer.run_step(&corpus) {
            Ok(m) => m,
            Err(e @ Error::NonFinite(_)) => {
                let dump = dump_nonfinite(out, &trainer, &corpus, &log, &e)?;
                eprintln!("non-finite values at step {}; dump in {}", trainer.step, dump.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        log.push(m.tsv());
        if trainer.step % log_every == 0 || trainer.step == stop {
            eprintln!(
                "step {}/{total} loss {:.5} lr {:.2e} grad_norm {:.4} ({:.0?})",
                trainer.step,
                m.loss,
                m.lr,
                m.grad_norm,
                started.elapsed()
            );
        }
        if checkpoint_every > 0 && trainer.step % checkpoint_every == 0 {
            save(&trainer, &log)?;
        }
    }
    save(&trainer, &log)?;

    let mut paths = vec![config_path, log_path, model_path, state_path];
    if trainer.step == total && eval_sequences > 0 {
        let seqs = corpus.spaced(Split::Heldout, trainer.cfg.seq_len + 1, eval_sequences)?;
        let model = &trainer.model;
        let configured = model.cfg.mixer();
        let mut mixers = vec![Mixer::full(), configured.with_mode(MixerMode::SinksSwa)];
        if configured.mode != MixerMode::SinksSwa && configured.mode != MixerMode::Full {
            mixers.push(configured);
        }
        let rows = evaluate_modes(model, &seqs, &mixers)?;
        paths.push(emit(out, "metrics.csv", eval_csv(&rows).as_bytes())?);
    }
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Training settings; the window and sink samplers default to the model's
/// own geometry.
fn distill_config(rc: &RunConfig, model: &ModelConfig) -> Result<DistillConfig> {
    let mut kv = rc.kv.clone();
    if kv.get_str("window_sampler").is_none() {
        kv.set("window_sampler", Sampler::Fixed(model.window));
    }
    if kv.get_str("sink_sampler").is_none() {
        kv.set("sink_sampler", Sampler::Fixed(model.sinks));
    }
    Ok(DistillConfig::from_kv(&kv)?)
}

/// Model for a new run. Distillation starts from the base checkpoint's
/// configuration, with any model keys given on the command line applied on top.
fn fresh_model(rc: &RunConfig, phase: Phase, base: Option<&Path>, seed: u64) -> Result<Model<f32>> {
    let mut kv = KvText::default();
    let base = match base {
        Some(path) => {
            let c = Container::load(path).with_context(|| format!("loading base {}", path.display()))?;
            // The student's mixer follows its memory variant unless given explicitly.
            let stored = KvText::parse(&c.config)?;
            for k in stored.keys().filter(|&k| k != "mixer_mode") {
                kv.set(k, stored.get_str(k).unwrap_or_default());
            }
            Some(c)
        }
        None => None,
    };
    for k in ModelConfig::keys() {
        if let Some(v) = rc.kv.get_str(k) {
            kv.set(k, v);
        }
    }
    let cfg = ModelConfig::from_kv(&kv)?;
    let mut model = Model::<f32>::init(&cfg, seed)?;
    match base {
        Some(c) => {
            model.load_arrays(&c, ArraySelect::BaseOnly)?;
        }
        None if phase == Phase::Distill => {
            eprintln!("warning: distilling without --base; the teacher is a random model")
        }
        None => {}
    }
    Ok(model)
}

/// Log lines up to and including `step`, so a resumed run appends cleanly.
fn read_log(path: &Path, step: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().take(step + 1).map(str::to_string).collect())
}

fn dump_nonfinite(out: &Path, trainer: &Trainer<f32>, corpus: &Corpus, log: &[String], err: &Error) -> Result<PathBuf> {
    let mut text = format!("error\t{err}\nstep\t{}\n", trainer.step);
    if let Ok(batch) = trainer.draw(corpus, trainer.step) {
        let _ = writeln!(text, "sinks\t{}\nwindow\t{}", batch.sinks, batch.window);
    }
    text.push_str("# recent log\n");
    for line in log.iter().skip(log.len().saturating_sub(20)) {
        text.push_str(line);
        text.push('\n');
    }
    trainer.model.save_checkpoint(&out.join("nonfinite.ckpt"))?;
    emit(out, "nonfinite.txt", text.as_bytes())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated mixer modes, e.g. `swa,ahn-gdn,ct-max`.
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated window sizes; defaults to the model's window.
    #[arg(long)]
    windows: Option<String>,
    /// Held-out sequences to score.
    #[arg(long, default_value_t = 16)]
    sequences: usize,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
}

pub fn eval(common: &Common, a: EvalArgs) -> Result<()> {
    let rc = RunConfig::resolve(common, KvText::default(), ModelConfig::keys())?;
    let container = Container::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = Model::<f32>::from_container(&container)?;
    if rc.kv.keys().next().is_some() {
        // A config given alongside a checkpoint must describe the same network.
        let mut kv = model.cfg.to_kv();
        kv.merge(&rc.kv);
        if !ModelConfig::from_kv(&kv)?.same_arch(&model.cfg) {
            return Err(Error::ConfigHash.into());
        }
    }
    let modes: Vec<MixerMode> = match &a.modes {
        Some(m) => parse_list(m, "mixer mode")?,
        None => vec![MixerMode::SinksSwa, model.cfg.mixer_mode],
    };
    let windows: Vec<usize> = match &a.windows {
        Some(w) => parse_list(w, "window")?,
        None => vec![model.cfg.window],
    };
    if windows.is_empty() || windows.contains(&0) {
        return Err(Error::Config("windows must be positive".into()).into());
    }
    let corpus = Corpus::load(&a.corpus)?;
    let seqs = corpus.spaced(Split::Heldout, a.seq_len + 1, a.sequences)?;
    let mut mixers = vec![Mixer::full()];
    for &mode in modes.iter().filter(|m| m.is_windowed()) {
        for &window in &windows {
            mixers.push(Mixer {
                mode,
                sinks: model.cfg.sinks,
                window,
            });
        }
    }
    let rows = evaluate_modes(&model, &seqs, &mixers)?;
    ensure_dir(&common.out_dir)?;
    let path = emit(&common.out_dir, "eval.csv", eval_csv(&rows).as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `qwen3b`, `qwen7b`, `qwen14b` or `custom`.
    #[arg(long, default_value = "qwen3b")]
    preset: String,
    #[arg(long = "L")]
    l: Option<u64>,
    #[arg(long = "W")]
    w: Option<u64>,
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    head_dim: Option<u64>,
    #[arg(long)]
    n_q: Option<u64>,
    #[arg(long)]
    n_kv: Option<u64>,
    #[arg(long)]
    n_layers: Option<u64>,
    #[arg(long)]
    base_params: Option<f64>,
    /// Count only the dominant attention terms for the memory's FLOPs.
    #[arg(long)]
    omit_minor: bool,
}

const BENCH_KEYS: &[&str] = &["l", "w", "d", "head_dim", "n_q", "n_kv", "n_layers", "base_params"];

pub fn bench(common: &Common, a: BenchArgs) -> Result<()> {
    let mut ov = Overrides::default();
    ov.opt("l", &a.l)
        .opt("w", &a.w)
        .opt("d", &a.d)
        .opt("head_dim", &a.head_dim)
        .opt("n_q", &a.n_q)
        .opt("n_kv", &a.n_kv)
        .opt("n_layers", &a.n_layers)
        .opt("base_params", &a.base_params);
    let rc = RunConfig::resolve(common, ov.0, BENCH_KEYS)?;
    let start = match a.preset.as_str() {
        "custom" => None,
        name => Some(preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?),
    };
    let field = |key: &str, from: Option<u64>| -> Result<u64> {
        match (rc.get(key)?, from) {
            (Some(v), _) | (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::Config(format!("custom bench needs `{key}`")).into()),
        }
    };
    let spec = ComplexitySpec {
        l: field("l", start.map(|s| s.l))?,
        w: field("w", start.map(|s| s.w))?,
        d: field("d", start.map(|s| s.d))?,
        h: field("head_dim", start.map(|s| s.h))?,
        n_q: field("n_q", start.map(|s| s.n_q))?,
        n_kv: field("n_kv", start.map(|s| s.n_kv))?,
        n_layers: field("n_layers", start.map(|s| s.n_layers))?,
        base_params: match (rc.get("base_params")?, start) {
            (Some(v), _) => v,
            (None, Some(s)) => s.base_params,
            (None, None) => return Err(Error::Config("custom bench needs `base_params`".into()).into()),
        },
    };
    spec.validate()?;
    print!("{}", bench_csv(&spec, a.omit_minor)?);
    Ok(())
}

/// Per-layer absolute costs and percentages of full attention for every mixer.
fn bench_csv(spec: &ComplexitySpec, omit_minor: bool) -> Result<String> {
    let full = complexity_with(spec, MixerKind::Full, omit_minor)?;
    let mut out = String::from("mixer,params_extra,flops_mixing,memory_cache,params_pct,flops_pct,cache_pct\n");
    for kind in MixerKind::ALL {
        let c = complexity_with(spec, kind, omit_minor)?;
        let r = ratios(spec, kind)?;
        let _ = writeln!(
            out,
            "{kind},{},{},{},{:.4},{:.4},{:.4}",
            c.params_extra,
            c.flops_mixing,
            c.memory_cache,
            100.0 * r.params,
            100.0 * c.flops_mixing as f64 / full.flops_mixing as f64,
            100.0 * r.cache
        );
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file whose bytes form the probed sequence.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sinks: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

pub fn probe(common: &Common, a: ProbeArgs) -> Result<()> {
    RunConfig::resolve(common, KvText::default(), &[])?;
    let model = Model::<f32>::load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?
        .cast::<f64>();
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
    let report = grad_probe(
        &model,
        &tokens,
        a.sinks.unwrap_or(model.cfg.sinks),
        a.window.unwrap_or(model.cfg.window),
    )?;
    ensure_dir(&common.out_dir)?;
    let path = emit(&common.out_dir, "probe.csv", report.to_csv().as_bytes())?;
    eprintln!("probe loss {:.6e}, max magnitude {:.6e}", report.loss, report.max);
    println!("{}", path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 8 << 20)]
    train_bytes: usize,
    #[arg(long, default_value_t = 5 << 20)]
    heldout_bytes: usize,
}

pub fn corpus(common: &Common, a: CorpusArgs) -> Result<()> {
    let rc = RunConfig::resolve(common, KvText::default(), &["seed"])?;
    let seed: u64 = rc.get("seed")?.unwrap_or(0);
    for shard in write_synthetic(&common.out_dir, seed, a.train_bytes, a.heldout_bytes)? {
        println!("{}", shard.path.display());
    }
    Ok(())
}
