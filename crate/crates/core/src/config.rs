//! Model hyperparameters and their canonical `key=value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which component set the model is built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    Full,
    /// Dynamic prior replaced by a learned position-independent bias.
    StaticPrior,
    /// Attention path removed; fusion fixed to the decay path.
    NoAttention,
    /// No attention and no dynamic prior.
    DecayOnly,
    /// Every LIF gating site replaced by a deterministic top-k mask.
    TopKMask,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        Self::Full,
        Self::StaticPrior,
        Self::NoAttention,
        Self::DecayOnly,
        Self::TopKMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::StaticPrior => "static_prior",
            Self::NoAttention => "no_attention",
            Self::DecayOnly => "decay_only",
            Self::TopKMask => "topk_mask",
        }
    }

    pub fn has_attention(self) -> bool {
        !matches!(self, Self::NoAttention | Self::DecayOnly)
    }

    pub fn has_dynamic_prior(self) -> bool {
        !matches!(self, Self::StaticPrior | Self::DecayOnly)
    }

    pub fn has_static_prior(self) -> bool {
        matches!(self, Self::StaticPrior)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant '{s}'; valid: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateChoice {
    ATan,
    Sigmoid,
}

/// Gradient treatment of the hard reset `V ← V·(1−s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetGrad {
    /// `s` treated as a constant: `∂V'/∂V = 1 − s`.
    Detached,
    /// Surrogate also flows through the reset: `∂V'/∂V = 1 − s − V·σ'(V)`.
    Surrogate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub d_prior: usize,
    pub seq_len: usize,
    pub chunk: usize,
    pub window: usize,
    pub n_global: usize,
    pub beta: f64,
    pub theta: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub kappa: f64,
    pub sigmoid_alpha: f64,
    pub surrogate: SurrogateChoice,
    pub reset_grad: ResetGrad,
    pub gate_init: f64,
    pub gamma_init: f64,
    pub prior_scale: f64,
    pub init_std: f64,
    pub ln_eps: f64,
    pub variant: AblationVariant,
    pub topk_keep: f64,
    pub topk_multiplicative: bool,
}

impl ModelConfig {
    /// The 194M-scale configuration.
    pub fn reference() -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_head: 64,
            d_ff: 4096,
            vocab: 48_000,
            d_prior: 192,
            seq_len: 512,
            chunk: 64,
            window: 256,
            n_global: 4,
            ..Self::toy()
        }
    }

    /// Desk-scale default: byte vocabulary, two small layers.
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_head: 8,
            d_ff: 64,
            vocab: 259,
            d_prior: 8,
            seq_len: 32,
            chunk: 8,
            window: 16,
            n_global: 4,
            beta: 0.95,
            theta: 1.0,
            clamp_lo: -3.0,
            clamp_hi: 3.0,
            kappa: 2.0,
            sigmoid_alpha: 10.0,
            surrogate: SurrogateChoice::ATan,
            reset_grad: ResetGrad::Detached,
            gate_init: 0.0,
            gamma_init: 9f64.ln(),
            prior_scale: 0.1,
            init_std: 0.02,
            ln_eps: 1e-5,
            variant: AblationVariant::Full,
            topk_keep: 0.11,
            topk_multiplicative: false,
        }
    }

    /// Small shape with given width, heads, depth, sequence and vocabulary;
    /// FFN and prior widths follow the usual 2× and /4 ratios.
    pub fn small(d_model: usize, n_heads: usize, n_layers: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            n_layers,
            seq_len,
            vocab,
            d_ff: 2 * d_model,
            d_prior: (d_model / 4).max(1),
            chunk: seq_len.clamp(1, 8),
            window: (seq_len / 2).max(1),
            ..Self::toy()
        }
    }

    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("d_prior", self.d_prior),
            ("seq_len", self.seq_len),
            ("chunk", self.chunk),
            ("window", self.window),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config("d_head must be even for rotary encoding".into()));
        }
        if !(self.clamp_lo < self.theta && self.theta <= self.clamp_hi) {
            return Err(Error::Config(
                "need clamp_lo < theta <= clamp_hi".into(),
            ));
        }
        if !(self.beta.is_finite() && self.kappa > 0.0 && self.sigmoid_alpha > 0.0) {
            return Err(Error::Config("beta finite, kappa and sigmoid_alpha positive".into()));
        }
        if !(self.topk_keep > 0.0 && self.topk_keep <= 1.0) {
            return Err(Error::Config("topk_keep must lie in (0, 1]".into()));
        }
        if !(self.prior_scale >= 0.0) || !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("prior_scale, ln_eps, init_std out of range".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 27] = [
        "d_model",
        "n_layers",
        "n_heads",
        "d_head",
        "d_ff",
        "vocab",
        "d_prior",
        "seq_len",
        "chunk",
        "window",
        "n_global",
        "beta",
        "theta",
        "clamp_lo",
        "clamp_hi",
        "kappa",
        "sigmoid_alpha",
        "surrogate",
        "reset_grad",
        "gate_init",
        "gamma_init",
        "prior_scale",
        "init_std",
        "ln_eps",
        "variant",
        "topk_keep",
        "topk_multiplicative",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_head" => self.d_head.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "vocab" => self.vocab.to_string(),
            "d_prior" => self.d_prior.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "chunk" => self.chunk.to_string(),
            "window" => self.window.to_string(),
            "n_global" => self.n_global.to_string(),
            "beta" => self.beta.to_string(),
            "theta" => self.theta.to_string(),
            "clamp_lo" => self.clamp_lo.to_string(),
            "clamp_hi" => self.clamp_hi.to_string(),
            "kappa" => self.kappa.to_string(),
            "sigmoid_alpha" => self.sigmoid_alpha.to_string(),
            "surrogate" => match self.surrogate {
                SurrogateChoice::ATan => "atan".into(),
                SurrogateChoice::Sigmoid => "sigmoid".into(),
            },
            "reset_grad" => match self.reset_grad {
                ResetGrad::Detached => "detached".into(),
                ResetGrad::Surrogate => "surrogate".into(),
            },
            "gate_init" => self.gate_init.to_string(),
            "gamma_init" => self.gamma_init.to_string(),
            "prior_scale" => self.prior_scale.to_string(),
            "init_std" => self.init_std.to_string(),
            "ln_eps" => self.ln_eps.to_string(),
            "variant" => self.variant.name().into(),
            "topk_keep" => self.topk_keep.to_string(),
            "topk_multiplicative" => self.topk_multiplicative.to_string(),
            _ => return None,
        })
    }

    /// Sets one field from text. Returns `Ok(false)` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_head" => self.d_head = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "d_prior" => self.d_prior = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "chunk" => self.chunk = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "n_global" => self.n_global = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "theta" => self.theta = num(key, value)?,
            "clamp_lo" => self.clamp_lo = num(key, value)?,
            "clamp_hi" => self.clamp_hi = num(key, value)?,
            "kappa" => self.kappa = num(key, value)?,
            "sigmoid_alpha" => self.sigmoid_alpha = num(key, value)?,
            "surrogate" => {
                self.surrogate = match value.trim() {
                    "atan" => SurrogateChoice::ATan,
                    "sigmoid" => SurrogateChoice::Sigmoid,
                    other => return Err(Error::Config(format!("unknown surrogate '{other}'"))),
                }
            }
            "reset_grad" => {
                self.reset_grad = match value.trim() {
                    "detached" => ResetGrad::Detached,
                    "surrogate" => ResetGrad::Surrogate,
                    other => return Err(Error::Config(format!("unknown reset_grad '{other}'"))),
                }
            }
            "gate_init" => self.gate_init = num(key, value)?,
            "gamma_init" => self.gamma_init = num(key, value)?,
            "prior_scale" => self.prior_scale = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "variant" => self.variant = value.trim().parse()?,
            "topk_keep" => self.topk_keep = num(key, value)?,
            "topk_multiplicative" => self.topk_multiplicative = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// One `key=value` line per field in [`ModelConfig::KEYS`] order.
    pub fn to_canonical_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses the canonical text; every key must be present exactly once.
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line '{line}'")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
            if !seen.insert(k.trim().to_string()) {
                return Err(Error::Config(format!("duplicate key '{k}'")));
            }
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains(**k)) {
            return Err(Error::Config(format!("missing key '{missing}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of kept dimensions per token for the top-k mask over `width`.
    pub fn topk_k(&self, width: usize) -> usize {
        topk_count(self.topk_keep, width)
    }
}

pub fn topk_count(keep_ratio: f64, width: usize) -> usize {
    ((keep_ratio * width as f64).round() as usize).clamp(1, width.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ModelConfig::reference().with_variant(AblationVariant::TopKMask);
        cfg.surrogate = SurrogateChoice::Sigmoid;
        cfg.beta = 0.9;
        let parsed = ModelConfig::from_canonical_text(&cfg.to_canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = ModelConfig::toy();
        cfg.d_head = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.theta = 5.0;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::reference().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn unknown_variant_lists_names() {
        let err = "nope".parse::<AblationVariant>().unwrap_err().to_string();
        assert!(err.contains("topk_mask") && err.contains("decay_only"));
    }

    #[test]
    fn topk_count_floors_to_one() {
        assert_eq!(topk_count(0.11, 8), 1);
        assert_eq!(topk_count(1.0, 8), 8);
        assert_eq!(topk_count(0.11, 32), 4);
    }
}
