//! Autoregressive generation, repetition/diversity metrics and
//! token-weighted perplexity.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::training::cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sampling {
        temperature: f64,
        top_k: usize,
    },
    /// Temperature follows the normalized entropy of the next-token
    /// distribution, see [`adaptive_temperature`].
    Adaptive {
        base_temperature: f64,
        top_k: usize,
        t_min: f64,
        t_max: f64,
    },
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Sampling { .. } => "sampling",
            Self::Adaptive { .. } => "adaptive",
        }
    }

    pub fn sampling() -> Self {
        Self::Sampling {
            temperature: 0.7,
            top_k: 50,
        }
    }

    pub fn adaptive() -> Self {
        Self::Adaptive {
            base_temperature: 0.8,
            top_k: 50,
            t_min: 0.1,
            t_max: 2.0,
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Greedy => write!(f, "greedy"),
            Self::Sampling { temperature, top_k } => write!(f, "sampling(T={temperature}, top_k={top_k})"),
            Self::Adaptive {
                base_temperature,
                top_k,
                t_min,
                t_max,
            } => write!(
                f,
                "adaptive(T={base_temperature}, top_k={top_k}, range=[{t_min}, {t_max}])"
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_tokens: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let k_ok = |k: usize| (1..=vocab).contains(&k);
        let ok = match self.mode {
            DecodeMode::Greedy => true,
            DecodeMode::Sampling { temperature, top_k } => temperature > 0.0 && k_ok(top_k),
            DecodeMode::Adaptive {
                base_temperature,
                top_k,
                t_min,
                t_max,
            } => base_temperature > 0.0 && t_min > 0.0 && t_min <= t_max && k_ok(top_k),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decode settings {}", self.mode)))
        }
    }
}

/// Natural-log entropy of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Entropy (nats) of `softmax(logits)`, as `ln Z − Σ p·(x − max)`. Equal
/// logits give exactly `ln V` and a single finite winner exactly 0, which
/// summing `−p·ln p` does not.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let spread: f64 = e
        .iter()
        .zip(logits)
        .filter(|(&ei, _)| ei > 0.0)
        .map(|(&ei, &x)| ei / z * (x - max))
        .sum();
    (z.ln() - spread).max(0.0)
}

/// `clamp(base·H/ln V, t_min, t_max)` with `H` the entropy of
/// `softmax(logits)`.
pub fn adaptive_temperature(logits: &[f64], base: f64, t_min: f64, t_max: f64) -> f64 {
    let v = logits.len();
    let ratio = if v > 1 {
        (entropy_of_logits(logits) / (v as f64).ln()).min(1.0)
    } else {
        0.0
    };
    (base * ratio).clamp(t_min, t_max)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest logits (ties to the lower index).
fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k.max(1));
    idx
}

fn sample_top_k(logits: &[f64], temperature: f64, k: usize, rng: &mut impl Rng) -> usize {
    let keep = top_k(logits, k);
    if keep.len() == 1 {
        return keep[0];
    }
    let kept: Vec<f64> = keep.iter().map(|&i| logits[i]).collect();
    let p = softmax(&kept, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return keep[j];
        }
    }
    // u landed in the rounding gap at the top; take the last candidate with mass
    keep[p.iter().rposition(|&x| x > 0.0).unwrap_or(0)]
}

pub fn sample_next(logits: &[f64], mode: &DecodeMode, rng: &mut impl Rng) -> usize {
    match *mode {
        DecodeMode::Greedy => argmax(logits),
        DecodeMode::Sampling { temperature, top_k } => sample_top_k(logits, temperature, top_k, rng),
        DecodeMode::Adaptive {
            base_temperature,
            top_k,
            t_min,
            t_max,
        } => {
            let t = adaptive_temperature(logits, base_temperature, t_min, t_max);
            sample_top_k(logits, t, top_k, rng)
        }
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> Result<(usize, usize)> {
    if n == 0 || tokens.len() < n {
        return Err(Error::UndefinedMetric(format!(
            "{n}-grams need at least {n} tokens, got {}",
            tokens.len()
        )));
    }
    let distinct: HashSet<&[usize]> = tokens.windows(n).collect();
    Ok((distinct.len(), tokens.len() - n + 1))
}

/// `1 − distinct/total` over the length-`n` windows.
pub fn rep_n(tokens: &[usize], n: usize) -> Result<f64> {
    let (d, t) = ngram_counts(tokens, n)?;
    Ok(1.0 - d as f64 / t as f64)
}

/// `distinct/total` over the length-`n` windows.
pub fn distinct_n(tokens: &[usize], n: usize) -> Result<f64> {
    let (d, t) = ngram_counts(tokens, n)?;
    Ok(d as f64 / t as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated continuation.
    pub tokens: Vec<usize>,
    /// Entropy (nats) of the next-token distribution at each step.
    pub entropies: Vec<f64>,
}

impl Generation {
    pub fn continuation(&self, prompt_len: usize) -> &[usize] {
        &self.tokens[prompt_len..]
    }
}

/// Re-runs the full forward pass over the growing sequence each step.
/// `prompt + max_tokens` must fit the model context.
pub fn generate<T: Scalar>(model: &Model<T>, prompt: &[usize], cfg: &DecodeConfig) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Config("prompt must be non-empty".into()));
    }
    cfg.validate(model.config.vocab)?;
    let needed = prompt.len() + cfg.max_tokens;
    if needed > model.config.seq_len {
        return Err(Error::ContextOverflow {
            needed,
            limit: model.config.seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.to_vec();
    let mut entropies = Vec::with_capacity(cfg.max_tokens);
    for _ in 0..cfg.max_tokens {
        let out = model.forward(std::slice::from_ref(&tokens), false)?;
        let v = model.config.vocab;
        let last = &out.logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
        let logits: Vec<f64> = last.iter().map(|x| x.as_f64()).collect();
        entropies.push(entropy_of_logits(&logits));
        tokens.push(sample_next(&logits, &cfg.mode, &mut rng));
    }
    Ok(Generation { tokens, entropies })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalChunk {
    /// Mean cross-entropy (nats) over the chunk.
    pub loss: f64,
    pub tokens: usize,
}

/// `exp(Σ T·L / Σ T)`.
pub fn token_weighted_ppl(chunks: &[EvalChunk]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation chunks".into()));
    }
    if chunks.iter().any(|c| c.tokens == 0) {
        return Err(Error::UndefinedMetric("chunk with zero tokens".into()));
    }
    let total: usize = chunks.iter().map(|c| c.tokens).sum();
    let weighted: f64 = chunks.iter().map(|c| c.tokens as f64 * c.loss).sum();
    Ok((weighted / total as f64).exp())
}

/// Mean next-token loss over a token stream, scored in non-overlapping
/// windows of the model context.
pub fn evaluate<T: Scalar>(model: &Model<T>, stream: &[usize]) -> Result<EvalChunk> {
    if stream.len() < 2 {
        return Err(Error::UndefinedMetric("need at least two tokens to score".into()));
    }
    let s = model.config.seq_len;
    let mut weighted = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + s).min(stream.len() - 1);
        let input = stream[start..end].to_vec();
        let target = &stream[start + 1..end + 1];
        let out = model.forward(std::slice::from_ref(&input), false)?;
        let v = model.config.vocab;
        let logits = out.logits.reshape(&[input.len(), v])?;
        let (loss, n) = cross_entropy(&logits, target, None)?;
        weighted += loss * n as f64;
        count += n;
        start = end;
    }
    Ok(EvalChunk {
        loss: weighted / count as f64,
        tokens: count,
    })
}

/// One generated sample with its metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub prompt: String,
    pub tokens: Vec<usize>,
    pub text: String,
    pub rep_4: Option<f64>,
    pub distinct: [Option<f64>; 4],
    pub mode: String,
    pub seed: u64,
}

impl GenerationRecord {
    /// Metrics are computed on the continuation only; `None` when it is too
    /// short for the n-gram order.
    pub fn new(prompt: String, continuation: &[usize], text: String, mode: &DecodeMode, seed: u64) -> Self {
        Self {
            prompt,
            tokens: continuation.to_vec(),
            text,
            rep_4: rep_n(continuation, 4).ok(),
            distinct: [1, 2, 3, 4].map(|n| distinct_n(continuation, n).ok()),
            mode: mode.name().to_string(),
            seed,
        }
    }

    pub fn to_text(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let ids: Vec<String> = self.tokens.iter().map(usize::to_string).collect();
        format!(
            "prompt: {:?}\ntokens: {}\ntext: {:?}\nrep_4: {}\ndistinct_1: {}\ndistinct_2: {}\ndistinct_3: {}\ndistinct_4: {}\nmode: {}\nseed: {}\n",
            self.prompt,
            ids.join(" "),
            self.text,
            fmt(self.rep_4),
            fmt(self.distinct[0]),
            fmt(self.distinct[1]),
            fmt(self.distinct[2]),
            fmt(self.distinct[3]),
            self.mode,
            self.seed,
        )
    }
}
