//! Losses, AdamW, learning-rate schedule, gradient clipping and the
//! training loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{decays, AuxWeights, Model, ModelParams};
use crate::tensor::{BinaryTensor, Scalar, Tensor};

/// Mean negative log-likelihood over non-pad rows of `logits [N × V]`,
/// returned together with the number of rows that counted.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    pad_id: Option<usize>,
) -> Result<(f64, usize)> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == pad_id {
            continue;
        }
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        sum += lse - row[t].as_f64();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no non-pad targets".into()));
    }
    Ok((sum / n as f64, n))
}

/// `main + λ·Σ_i ρ^{L−1−i}·exit_i`.
pub fn auxce_total(main: f64, exits: &[f64], lambda: f64, rho: f64) -> f64 {
    let l = exits.len();
    main + lambda
        * exits
            .iter()
            .enumerate()
            .map(|(i, e)| rho.powi((l - 1 - i) as i32) * e)
            .sum::<f64>()
}

/// Linear warmup to `peak_lr`, then cosine annealing to `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 2000,
            total_steps: 100_000,
            floor_lr: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.peak_lr >= 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config("need 0 <= floor_lr <= peak_lr".into()));
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.peak_lr;
    }
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm/‖g‖` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64, step: usize) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    if norm > max_norm {
        let f = T::lit(max_norm / norm);
        for (_, t) in grads.named_mut() {
            t.scale(f);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments for every parameter, in `named()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-decay AdamW update:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`, decay only where [`decays`] says so.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimState,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    let gs = grads.named();
    let ps = params.named_mut();
    if ps.len() != gs.len() || ps.len() != state.m.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (k, ((name, p), (_, g))) in ps.into_iter().zip(gs).enumerate() {
        if p.shape() != g.shape() || state.m[k].len() != p.len() {
            return Err(Error::Dimension(format!("{name}: gradient shape mismatch")));
        }
        let wd = if decays(&name) { opt.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi.as_f64();
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let xf = x.as_f64();
            *x = T::lit(xf - lr * (mhat / (vhat.sqrt() + opt.eps) + wd * xf));
        }
    }
    Ok(())
}

/// `(fraction of zero entries, fraction of all-zero rows)` over the last axis.
pub fn measure_sparsity(s: &BinaryTensor) -> (f64, f64) {
    if s.is_empty() {
        return (0.0, 0.0);
    }
    let zeros = s.len() - s.count_ones();
    let rows = s.rows();
    let allzero = (0..rows).filter(|&r| s.row(r).iter().all(|&b| b == 0)).count();
    (zeros as f64 / s.len() as f64, allzero as f64 / rows as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTelemetry {
    pub step: usize,
    pub lr: f64,
    pub main_loss: f64,
    pub total_loss: f64,
    pub grad_norm_preclip: f64,
    pub sparsity_encoder: f64,
    pub sparsity_blocks: f64,
    pub token_allzero_rate: f64,
    pub gates: Vec<f64>,
    pub alphas: Vec<Vec<f64>>,
}

impl TrainTelemetry {
    pub const LOG_FIELDS: [&'static str; 7] = [
        "step",
        "lr",
        "main_loss",
        "total_loss",
        "grad_norm_preclip",
        "sparsity_encoder",
        "token_allzero_rate",
    ];

    /// One line of the training log: tab-separated `key=value` pairs.
    pub fn log_line(&self) -> String {
        let mut s = String::new();
        let vals = [
            self.step.to_string(),
            self.lr.to_string(),
            self.main_loss.to_string(),
            self.total_loss.to_string(),
            self.grad_norm_preclip.to_string(),
            self.sparsity_encoder.to_string(),
            self.token_allzero_rate.to_string(),
        ];
        for (i, (k, v)) in Self::LOG_FIELDS.iter().zip(vals).enumerate() {
            if i > 0 {
                s.push('\t');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }

    /// Parses a line written by [`TrainTelemetry::log_line`] back into its
    /// seven numeric fields.
    pub fn parse_log_line(line: &str) -> Result<[f64; 7]> {
        let mut out = [0.0; 7];
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 7 {
            return Err(Error::Format(format!("expected 7 fields, got {}", parts.len())));
        }
        for (i, (part, key)) in parts.iter().zip(Self::LOG_FIELDS).enumerate() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("field {i} is not key=value")))?;
            if k != key {
                return Err(Error::Format(format!("expected field {key}, got {k}")));
            }
            out[i] = v
                .parse()
                .map_err(|_| Error::Format(format!("{key}: not a number")))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub aux: Option<AuxWeights>,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            optimizer: AdamW::default(),
            steps: 200,
            batch_size: 8,
            seed: 0,
            aux: Some(AuxWeights::default()),
            max_grad_norm: 1.0,
        }
    }
}

/// Pad-free cyclic packing: consecutive windows of `S + 1` tokens taken from
/// the corpus treated as a ring, starting at a seed-dependent offset.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    corpus: &'a [usize],
    cursor: usize,
    seq_len: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a [usize], seq_len: usize, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cursor: rng.random_range(0..corpus.len()),
            corpus,
            seq_len,
        })
    }

    /// `(inputs, targets)`, each `batch` rows of `S` tokens.
    pub fn next_batch(&mut self, batch: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n = self.corpus.len();
        let mut xs = Vec::with_capacity(batch);
        let mut ys = Vec::with_capacity(batch);
        for _ in 0..batch {
            let window: Vec<usize> = (0..=self.seq_len)
                .map(|i| self.corpus[(self.cursor + i) % n])
                .collect();
            xs.push(window[..self.seq_len].to_vec());
            ys.push(window[1..].to_vec());
            self.cursor = (self.cursor + self.seq_len) % n;
        }
        (xs, ys)
    }
}

/// Trains in place. `on_step` sees each step's telemetry and the model
/// after the update (for logging and checkpointing); returning an error
/// stops training.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    corpus: &[usize],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainTelemetry, &Model<T>) -> Result<()>,
) -> Result<Vec<TrainTelemetry>> {
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(&id) = corpus.iter().find(|&&t| t >= model.config.vocab) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: model.config.vocab,
        });
    }
    let mut batcher = Batcher::new(corpus, model.config.seq_len, cfg.seed)?;
    let mut state = OptimState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (xs, ys) = batcher.next_batch(cfg.batch_size);
        let (report, mut grads) = model.loss_and_grad(&xs, &ys, None, cfg.aux)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let norm = clip_gradients(&mut grads, cfg.max_grad_norm, step)?;
        let lr = lr_at(step, &cfg.schedule);
        adamw_step(&mut model.params, &grads, &mut state, &cfg.optimizer, lr)?;
        let tel = &report.telemetry;
        let t = TrainTelemetry {
            step,
            lr,
            main_loss: report.main,
            total_loss: report.total,
            grad_norm_preclip: norm,
            sparsity_encoder: tel.sparsity_encoder,
            sparsity_blocks: tel.mean_block_sparsity(),
            token_allzero_rate: tel.token_allzero_encoder,
            gates: tel.blocks.iter().filter_map(|b| b.gate).collect(),
            alphas: tel.blocks.iter().map(|b| b.alphas.clone()).collect(),
        };
        on_step(&t, model)?;
        history.push(t);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        let (l, n) = cross_entropy(&uniform, &[2], None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15 && n == 1);
        let sharp = Tensor::<f64>::from_f64(&[1, 3], &[50.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&sharp, &[0], None).unwrap().0 < 1e-20);
        let two = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 5.0, -5.0]).unwrap();
        let (l, n) = cross_entropy(&two, &[1, 9], Some(9)).unwrap();
        assert_eq!(n, 1);
        assert!((l - (1.0 + (1.0 + (-1f64).exp()).ln() - 1.0)).abs() < 1e-15);
        assert!(cross_entropy(&two, &[9, 9], Some(9)).is_err());
    }

    #[test]
    fn auxce_examples() {
        assert_eq!(auxce_total(1.0, &[1.0, 1.0], 0.3, 0.5), 1.45);
        assert_eq!(auxce_total(2.5, &[7.0, 3.0, 1.0], 0.0, 0.5), 2.5);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule {
            peak_lr: 3e-4,
            warmup_steps: 10,
            total_steps: 110,
            floor_lr: 0.0,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(10, &s), 3e-4);
        assert!(lr_at(110, &s).abs() < 1e-20);
        assert!((lr_at(60, &s) - 1.5e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_only_step() {
        let cfg = crate::config::ModelConfig::small(4, 1, 1, 2, 4);
        let m = Model::<f64>::init(cfg, 1).unwrap();
        let mut p = m.params.clone();
        let zero = p.zeros_like();
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &zero, &mut st, &AdamW::default(), 0.01).unwrap();
        for ((name, a), (_, b)) in p.named().into_iter().zip(m.params.named()) {
            let f = if decays(&name) { 1.0 - 0.001 } else { 1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y * f).abs() <= 1e-15 * y.abs().max(1.0), "{name}");
            }
        }
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(measure_sparsity(&BinaryTensor::zeros(&[2, 3, 4])), (1.0, 1.0));
        assert_eq!(measure_sparsity(&BinaryTensor::ones(&[2, 3, 4])), (0.0, 0.0));
        let mut d = vec![0u8; 30];
        for t in 0..3 {
            d[t * 10 + t] = 1;
        }
        let s = BinaryTensor::new(vec![1, 3, 10], d).unwrap();
        let (pe, tz) = measure_sparsity(&s);
        assert!((pe - 0.9).abs() < 1e-15 && tz == 0.0);
    }

    #[test]
    fn log_line_round_trip() {
        let t = TrainTelemetry {
            step: 3,
            lr: 1.5e-4,
            main_loss: 2.25,
            total_loss: 2.5,
            grad_norm_preclip: 0.75,
            sparsity_encoder: 0.875,
            sparsity_blocks: 0.5,
            token_allzero_rate: 0.0,
            gates: vec![],
            alphas: vec![],
        };
        let line = t.log_line();
        assert!(line.starts_with("step=3\tlr=0.00015\t"));
        let v = TrainTelemetry::parse_log_line(&line).unwrap();
        assert_eq!(v, [3.0, 1.5e-4, 2.25, 2.5, 0.75, 0.875, 0.0]);
    }

    #[test]
    fn batcher_wraps_cyclically() {
        let corpus = [0, 1, 2, 3, 4];
        let mut b = Batcher::new(&corpus, 3, 0).unwrap();
        let (xs, ys) = b.next_batch(4);
        for (x, y) in xs.iter().zip(&ys) {
            for i in 0..3 {
                assert_eq!((x[i] + 1) % 5, y[i]);
            }
        }
        assert_eq!((xs[0][0] + 3) % 5, xs[1][0]);
    }
}
