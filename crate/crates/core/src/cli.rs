//! Command-line front end: `train`, `eval`, `generate`, `energy`, `ablate`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{AblationVariant, ModelConfig};
use crate::decode::{self, DecodeConfig, DecodeMode, EvalChunk, GenerationRecord};
use crate::energy::{DenseBaseline, EnergyConstants, EnergyReport, Regime};
use crate::error::{Error, Result};
use crate::model::{param_count, AuxWeights, Model};
use crate::tokenizer::Vocab;
use crate::training::{train_loop, AdamW, Schedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "SL_SEED";

#[derive(Parser, Debug)]
#[command(name = "spikegate", version, about = "Spike-gated language model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on raw byte files.
    Train(TrainArgs),
    /// Report per-file and token-weighted perplexity.
    Eval(EvalArgs),
    /// Generate a continuation of a prompt.
    Generate(GenerateArgs),
    /// Print the analytical per-token energy breakdown.
    Energy(EnergyArgs),
    /// Train one ablation variant under the same budget as `train`.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file (`key=value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, e.g. `--steps 50 --data a.txt`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub variant: String,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// greedy, sampling or adaptive.
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub t_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub t_max: f64,
    #[arg(long, default_value_t = 16)]
    pub max_tokens: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vocabulary file (`id<TAB>hex` lines); byte-level if omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[arg(long, default_value_t = 0.89)]
    pub sparsity: f64,
    /// neuromorphic or dense.
    #[arg(long, default_value = "neuromorphic")]
    pub regime: String,
    /// Model configuration (`key=value` lines); the 194M shape if omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Vec<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub log_out: Option<PathBuf>,
    pub checkpoint_interval: usize,
    seed_set: bool,
}

impl Default for RunConfig {
    /// Desk-scale smoke settings: the toy model, 200 steps, short warmup.
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig {
                schedule: Schedule {
                    peak_lr: 3e-3,
                    warmup_steps: 20,
                    total_steps: 200,
                    floor_lr: 3e-4,
                },
                optimizer: AdamW::default(),
                steps: 200,
                batch_size: 8,
                seed: 0,
                aux: Some(AuxWeights::default()),
                max_grad_norm: 1.0,
            },
            data: Vec::new(),
            checkpoint_out: None,
            log_out: None,
            checkpoint_interval: 0,
            seed_set: false,
        }
    }
}

impl RunConfig {
    pub const RUN_KEYS: [&'static str; 17] = [
        "steps",
        "batch_size",
        "seed",
        "peak_lr",
        "warmup_steps",
        "total_steps",
        "floor_lr",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "max_grad_norm",
        "auxce",
        "aux_lambda",
        "aux_rho",
        "checkpoint_interval",
        "data",
    ];

    /// Sets one key. `data` appends; `checkpoint_out` and `log_out` take
    /// paths; everything else is a model or run hyperparameter.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        let t = &mut self.train;
        let aux = t.aux.unwrap_or_default();
        match key {
            "steps" => t.steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                self.seed_set = true;
            }
            "peak_lr" => t.schedule.peak_lr = num(key, value)?,
            "warmup_steps" => t.schedule.warmup_steps = num(key, value)?,
            "total_steps" => t.schedule.total_steps = num(key, value)?,
            "floor_lr" => t.schedule.floor_lr = num(key, value)?,
            "beta1" => t.optimizer.beta1 = num(key, value)?,
            "beta2" => t.optimizer.beta2 = num(key, value)?,
            "adam_eps" => t.optimizer.eps = num(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = num(key, value)?,
            "max_grad_norm" => t.max_grad_norm = num(key, value)?,
            "auxce" => t.aux = num::<bool>(key, value)?.then_some(aux),
            "aux_lambda" => {
                t.aux = Some(AuxWeights {
                    lambda: num(key, value)?,
                    ..aux
                })
            }
            "aux_rho" => {
                t.aux = Some(AuxWeights {
                    rho: num(key, value)?,
                    ..aux
                })
            }
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "data" => self.data.extend(value.split(',').filter(|s| !s.is_empty()).map(PathBuf::from)),
            "checkpoint_out" | "checkpoint" => self.checkpoint_out = Some(PathBuf::from(value)),
            "log_out" | "log" => self.log_out = Some(PathBuf::from(value)),
            "preset" => {
                self.model = match value.trim() {
                    "toy" => ModelConfig::toy(),
                    "reference" => ModelConfig::reference(),
                    other => return Err(Error::Config(format!("unknown preset '{other}'"))),
                }
            }
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Reads `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line '{line}'")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs (dashes in keys read as underscores).
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got '{flag}'")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                    (key.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let aux = t.aux.unwrap_or_default();
        let mut s = self.model.to_canonical_text();
        let run = [
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("peak_lr", t.schedule.peak_lr.to_string()),
            ("warmup_steps", t.schedule.warmup_steps.to_string()),
            ("total_steps", t.schedule.total_steps.to_string()),
            ("floor_lr", t.schedule.floor_lr.to_string()),
            ("beta1", t.optimizer.beta1.to_string()),
            ("beta2", t.optimizer.beta2.to_string()),
            ("adam_eps", t.optimizer.eps.to_string()),
            ("weight_decay", t.optimizer.weight_decay.to_string()),
            ("max_grad_norm", t.max_grad_norm.to_string()),
            ("auxce", t.aux.is_some().to_string()),
            ("aux_lambda", aux.lambda.to_string()),
            ("aux_rho", aux.rho.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ];
        for (k, v) in run {
            s.push_str(&format!("{k}={v}\n"));
        }
        for d in &self.data {
            s.push_str(&format!("data={}\n", d.display()));
        }
        if let Some(p) = &self.checkpoint_out {
            s.push_str(&format!("checkpoint_out={}\n", p.display()));
        }
        if let Some(p) = &self.log_out {
            s.push_str(&format!("log_out={}\n", p.display()));
        }
        s
    }

    /// Builds from an optional file, then overrides, then `SL_SEED` if no
    /// seed was given; checks that data files exist.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        if !cfg.seed_set {
            if let Some(s) = env_seed {
                cfg.set("seed", &s)?;
            }
        }
        cfg.model.validate()?;
        cfg.train.schedule.validate()?;
        if cfg.data.is_empty() {
            return Err(Error::Config("no training data (use --data PATH)".into()));
        }
        if let Some(missing) = cfg.data.iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("data file not found: {}", missing.display())));
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::NonFiniteGradient { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn read_corpus(paths: &[PathBuf], vocab: &Vocab) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        out.extend(vocab.encode(&bytes, false));
    }
    Ok(out)
}

fn byte_vocab_for(cfg: &ModelConfig) -> Result<Vocab> {
    let v = Vocab::bytes();
    if cfg.vocab < v.size() {
        return Err(Error::Config(format!(
            "model vocab {} is smaller than the byte vocabulary ({})",
            cfg.vocab,
            v.size()
        )));
    }
    Ok(v)
}

fn run_training(cfg: &RunConfig, tag: Option<AblationVariant>, out: &mut dyn Write) -> Result<()> {
    let vocab = byte_vocab_for(&cfg.model)?;
    let corpus = read_corpus(&cfg.data, &vocab)?;
    let mut model = Model::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    let prefix = tag.map(|v| format!("variant={v}\t")).unwrap_or_default();
    writeln!(
        out,
        "{prefix}params={} tokens={} steps={} seed={}",
        param_count(&cfg.model).total(),
        corpus.len(),
        cfg.train.steps,
        cfg.train.seed
    )?;
    let mut log = match &cfg.log_out {
        Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let history = train_loop(&mut model, &corpus, &cfg.train, |t, m| {
        let line = t.log_line();
        if let Some(w) = log.as_mut() {
            writeln!(w, "{line}")?;
        }
        if t.step % 10 == 0 || t.step + 1 == cfg.train.steps {
            writeln!(out, "{prefix}{line}")?;
        }
        if let (Some(path), true) = (&cfg.checkpoint_out, cfg.checkpoint_interval > 0) {
            if (t.step + 1) % cfg.checkpoint_interval == 0 {
                checkpoint::save(m, path)?;
            }
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(path) = &cfg.checkpoint_out {
        checkpoint::save(&model, path)?;
        writeln!(out, "{prefix}checkpoint={}", path.display())?;
    }
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        writeln!(
            out,
            "{prefix}initial_main_loss={} final_main_loss={}",
            first.main_loss, last.main_loss
        )?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides, std::env::var(SEED_ENV).ok())?;
    run_training(&cfg, None, out)
}

fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let variant: AblationVariant = args.variant.parse()?;
    let mut cfg = RunConfig::resolve(args.train.config.as_deref(), &args.train.overrides, std::env::var(SEED_ENV).ok())?;
    cfg.model.variant = variant;
    cfg.model.validate()?;
    if variant == AblationVariant::TopKMask {
        writeln!(
            out,
            "variant={variant}\ttopk_k={} of d_model={}",
            cfg.model.topk_k(cfg.model.d_model),
            cfg.model.d_model
        )?;
    }
    run_training(&cfg, Some(variant), out)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let vocab = byte_vocab_for(&model.config)?;
    let mut chunks = Vec::new();
    for path in &args.data {
        let stream = read_corpus(std::slice::from_ref(path), &vocab)?;
        let chunk: EvalChunk = decode::evaluate(&model, &stream)?;
        let ppl = decode::token_weighted_ppl(&[chunk])?;
        writeln!(out, "{}\ttokens={}\tloss={}\tppl={}", path.display(), chunk.tokens, chunk.loss, ppl)?;
        chunks.push(chunk);
    }
    let total: usize = chunks.iter().map(|c| c.tokens).sum();
    writeln!(out, "overall\ttokens={total}\tppl={}", decode::token_weighted_ppl(&chunks)?)?;
    Ok(())
}

fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let vocab = match &args.vocab {
        Some(p) => Vocab::load(p)?,
        None => byte_vocab_for(&model.config)?,
    };
    if vocab.size() > model.config.vocab {
        return Err(Error::Config("vocabulary larger than the model's".into()));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} is not an integer")))?,
            Err(_) => 0,
        },
    };
    let mode = match args.mode.as_str() {
        "greedy" => DecodeMode::Greedy,
        "sampling" => DecodeMode::Sampling {
            temperature: args.temperature.unwrap_or(0.7),
            top_k: args.top_k.unwrap_or(50),
        },
        "adaptive" => DecodeMode::Adaptive {
            base_temperature: args.temperature.unwrap_or(0.8),
            top_k: args.top_k.unwrap_or(50),
            t_min: args.t_min,
            t_max: args.t_max,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}' (expected greedy, sampling or adaptive)"
            )))
        }
    };
    let prompt = vocab.encode(args.prompt.as_bytes(), false);
    let cfg = DecodeConfig {
        mode,
        max_tokens: args.max_tokens,
        seed,
    };
    let generation = decode::generate(&model, &prompt, &cfg)?;
    let cont = generation.continuation(prompt.len());
    let text = vocab.decode_lossy(cont)?;
    let record = GenerationRecord::new(args.prompt.clone(), cont, text, &mode, seed);
    write!(out, "{}", record.to_text())?;
    Ok(())
}

fn cmd_energy(args: &EnergyArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&args.sparsity) {
        return Err(Error::Config(format!("--sparsity {} outside [0, 1]", args.sparsity)));
    }
    let regime: Regime = args.regime.parse()?;
    let cfg = match &args.config {
        Some(p) => {
            let mut run = RunConfig {
                model: ModelConfig::reference(),
                ..RunConfig::default()
            };
            run.apply_text(&fs::read_to_string(p)?)?;
            run.model.validate()?;
            run.model
        }
        None => ModelConfig::reference(),
    };
    let report = EnergyReport::build(&cfg, &EnergyConstants::default(), &DenseBaseline::gpt2_201m(), args.sparsity)?;
    write!(out, "{}", report.to_text(regime))?;
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Energy(a) => cmd_energy(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["--steps".into(), "7".into(), "--peak-lr=0.01".into(), "--data".into(), "a,b".into()])
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        back.seed_set = cfg.seed_set;
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.train.steps, 7);
        assert_eq!(back.data.len(), 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["--nonsense".into(), "1".into()]).is_err());
        assert!(cfg.apply_overrides(&["steps".into()]).is_err());
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.txt");
        fs::write(&data, b"abc").unwrap();
        let d = data.to_string_lossy().to_string();
        let cfg = RunConfig::resolve(None, &["--data".into(), d.clone()], Some("42".into())).unwrap();
        assert_eq!(cfg.train.seed, 42);
        let cfg = RunConfig::resolve(None, &["--data".into(), d, "--seed".into(), "5".into()], Some("42".into())).unwrap();
        assert_eq!(cfg.train.seed, 5);
    }
}
