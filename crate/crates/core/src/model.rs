//! Full model: embedding → LayerNorm → gating site, `L` blocks, final
//! LayerNorm and the prior head. Exit logits for deep supervision reuse the
//! final LayerNorm and the shared head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::block::{
    allzero_rows, block_backward, block_forward, zero_fraction, AttentionParams, BlockCache,
    BlockParams, BlockSpec, BlockTelemetry, FfnParams,
};
use crate::config::{AblationVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::gating::{gate_backward, gate_forward, GateCache, Gating};
use crate::head::{head_backward, head_forward, HeadCache, PriorMlp, PriorParams};
use crate::lif::Emission;
use crate::numerics::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::tensor::{BinaryTensor, Scalar, Tensor};

pub use crate::gating::topk_mask;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `[V × D]`
    pub embedding: Tensor<T>,
    pub enc_ln_gain: Tensor<T>,
    pub enc_ln_bias: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln_gain: Tensor<T>,
    pub final_ln_bias: Tensor<T>,
    pub head: PriorParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![
            ("embedding".to_string(), &self.embedding),
            ("enc_ln_gain".to_string(), &self.enc_ln_gain),
            ("enc_ln_bias".to_string(), &self.enc_ln_bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        v.push(("final_ln_gain".to_string(), &self.final_ln_gain));
        v.push(("final_ln_bias".to_string(), &self.final_ln_bias));
        v.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("enc_ln_gain".to_string(), &mut self.enc_ln_gain),
            ("enc_ln_bias".to_string(), &mut self.enc_ln_bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.named_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        v.push(("final_ln_gain".to_string(), &mut self.final_ln_gain));
        v.push(("final_ln_bias".to_string(), &mut self.final_ln_bias));
        v.extend(self.head.named_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        v
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            embedding: z(&self.embedding),
            enc_ln_gain: z(&self.enc_ln_gain),
            enc_ln_bias: z(&self.enc_ln_bias),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_ln_gain: z(&self.final_ln_gain),
            final_ln_bias: z(&self.final_ln_bias),
            head: self.head.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        let theirs = other.named();
        let mine = self.named_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Dimension("parameter sets differ".into()));
        }
        for ((_, a), (_, b)) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embedding: self.embedding.cast(),
            enc_ln_gain: self.enc_ln_gain.cast(),
            enc_ln_bias: self.enc_ln_bias.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w_tcam: b.w_tcam.cast(),
                    gamma: b.gamma.cast(),
                    attn: b.attn.as_ref().map(|a| AttentionParams {
                        w_q: a.w_q.cast(),
                        w_k: a.w_k.cast(),
                        w_v: a.w_v.cast(),
                        w_out: a.w_out.cast(),
                    }),
                    gate: b.gate.as_ref().map(Tensor::cast),
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    ffn: FfnParams {
                        w_up: b.ffn.w_up.cast(),
                        w_down: b.ffn.w_down.cast(),
                    },
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                })
                .collect(),
            final_ln_gain: self.final_ln_gain.cast(),
            final_ln_bias: self.final_ln_bias.cast(),
            head: PriorParams {
                w_vocab: self.head.w_vocab.cast(),
                prior: self.head.prior.as_ref().map(|p| PriorMlp {
                    w1: p.w1.cast(),
                    w2: p.w2.cast(),
                }),
                static_log_pi: self.head.static_log_pi.as_ref().map(Tensor::cast),
                prior_scale: self.head.prior_scale,
            },
        }
    }
}

/// Whether AdamW weight decay applies to the named parameter. Gains, biases,
/// gates and decay logits are excluded.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("_gain")
        || name.ends_with("_bias")
        || name.ends_with(".gamma")
        || name.ends_with(".gate")
        || name.ends_with("static_log_pi"))
}

/// Parameter counts grouped by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub ffn: usize,
    pub attention: usize,
    pub output_projection: usize,
    pub decay_path: usize,
    pub prior: usize,
    pub gates_and_decay: usize,
    pub layer_norms: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding
            + self.ffn
            + self.attention
            + self.output_projection
            + self.decay_path
            + self.prior
            + self.gates_and_decay
            + self.layer_norms
    }

    pub fn rows(&self) -> [(&'static str, usize); 8] {
        [
            ("embedding", self.embedding),
            ("ffn", self.ffn),
            ("attention_path", self.attention),
            ("output_projection", self.output_projection),
            ("decay_path", self.decay_path),
            ("prior", self.prior),
            ("gates_and_decay_factors", self.gates_and_decay),
            ("layer_norms", self.layer_norms),
        ]
    }

    fn group_of(name: &str) -> fn(&mut ParamCount) -> &mut usize {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "embedding" => |p| &mut p.embedding,
            "w_up" | "w_down" => |p| &mut p.ffn,
            "w_q" | "w_k" | "w_v" | "w_out" => |p| &mut p.attention,
            "w_vocab" => |p| &mut p.output_projection,
            "w_tcam" => |p| &mut p.decay_path,
            "prior_w1" | "prior_w2" | "static_log_pi" => |p| &mut p.prior,
            "gamma" | "gate" => |p| &mut p.gates_and_decay,
            _ => |p| &mut p.layer_norms,
        }
    }
}

/// Counts parameters from the configuration alone (no allocation).
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let (d, l, v) = (cfg.d_model, cfg.n_layers, cfg.vocab);
    let variant = cfg.variant;
    ParamCount {
        embedding: v * d,
        ffn: l * 2 * d * cfg.d_ff,
        attention: if variant.has_attention() { l * 4 * d * d } else { 0 },
        output_projection: v * d,
        decay_path: l * d * d,
        prior: if variant.has_dynamic_prior() {
            cfg.d_prior * d + v * cfg.d_prior
        } else if variant.has_static_prior() {
            v
        } else {
            0
        },
        gates_and_decay: l * (cfg.n_heads + usize::from(variant.has_attention())),
        layer_norms: 2 * d * (2 * l + 2),
    }
}

/// Counts the parameters actually held by a model, grouped the same way.
pub fn param_count_of<T: Scalar>(params: &ModelParams<T>) -> ParamCount {
    let mut pc = ParamCount::default();
    for (name, t) in params.named() {
        *ParamCount::group_of(&name)(&mut pc) += t.len();
    }
    pc
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    /// Emission mode for LIF sites; [`Emission::SmoothProbe`] only for
    /// gradient verification.
    pub emission: Emission,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelTelemetry {
    pub sparsity_encoder: f64,
    pub token_allzero_encoder: f64,
    pub blocks: Vec<BlockTelemetry>,
}

impl ModelTelemetry {
    pub fn mean_block_sparsity(&self) -> f64 {
        if self.blocks.is_empty() {
            return 0.0;
        }
        self.blocks.iter().map(|b| b.sparsity_out).sum::<f64>() / self.blocks.len() as f64
    }
}

pub struct ForwardOutput<T> {
    /// `[B × S × V]`
    pub logits: Tensor<T>,
    /// One `[B × S × V]` tensor per block when exits were requested.
    pub exit_logits: Vec<Tensor<T>>,
    pub telemetry: ModelTelemetry,
    /// Every gating site's binary output stacked to `[B × S × width]`, in
    /// order: encoder, then per block `mid`, `ffn`, `out`.
    pub gating_sites: Vec<(String, BinaryTensor)>,
}

struct SeqForward<T> {
    logits: Tensor<T>,
    exits: Vec<Tensor<T>>,
    sites: Vec<BinaryTensor>,
    enc_spikes: BinaryTensor,
    blocks: Vec<BlockTelemetry>,
}

struct SeqCache<T> {
    tokens: Vec<usize>,
    enc_ln: LayerNormCache<T>,
    enc_gate: GateCache<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormCache<T>,
    head: HeadCache<T>,
    exits: Vec<(LayerNormCache<T>, HeadCache<T>)>,
}

/// Loss summary for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub main: f64,
    pub exits: Vec<f64>,
    pub total: f64,
    pub tokens: usize,
    pub telemetry: ModelTelemetry,
}

/// Deep-supervision weights `(λ, ρ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxWeights {
    pub lambda: f64,
    pub rho: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            rho: 0.5,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Zero-mean normal (std `init_std`) weight matrices; unit gains, zero
    /// biases, `γ = gamma_init`, `w_g = gate_init`, zero static prior.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, v, h) = (config.d_model, config.vocab, config.n_heads);
        let variant = config.variant;
        let ones = |n: usize| Tensor::<T>::full(&[n], T::one());
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
        let mat = |r: usize, c: usize| Tensor::<T>::zeros(&[r, c]);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                w_tcam: mat(d, d),
                gamma: Tensor::full(&[h], T::lit(config.gamma_init)),
                attn: variant.has_attention().then(|| AttentionParams {
                    w_q: mat(d, d),
                    w_k: mat(d, d),
                    w_v: mat(d, d),
                    w_out: mat(d, d),
                }),
                gate: variant
                    .has_attention()
                    .then(|| Tensor::scalar(T::lit(config.gate_init))),
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                ffn: FfnParams {
                    w_up: mat(config.d_ff, d),
                    w_down: mat(d, config.d_ff),
                },
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
            })
            .collect();
        let mut params = ModelParams {
            embedding: mat(v, d),
            enc_ln_gain: ones(d),
            enc_ln_bias: zeros(d),
            blocks,
            final_ln_gain: ones(d),
            final_ln_bias: zeros(d),
            head: PriorParams {
                w_vocab: mat(v, d),
                prior: variant.has_dynamic_prior().then(|| PriorMlp {
                    w1: mat(config.d_prior, d),
                    w2: mat(v, config.d_prior),
                }),
                static_log_pi: variant.has_static_prior().then(|| zeros(v)),
                prior_scale: config.prior_scale,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        for (_, t) in params.named_mut() {
            if t.shape().len() == 2 {
                for x in t.data_mut() {
                    *x = T::lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            config,
            params,
            emission: Emission::Hard,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_count(&config);
        let got = param_count_of(&params);
        if expected != got {
            return Err(Error::Config(format!(
                "parameters do not match config: expected {expected:?}, got {got:?}"
            )));
        }
        Ok(Self {
            config,
            params,
            emission: Emission::Hard,
        })
    }

    pub fn gating(&self) -> Gating {
        let mut g = Gating::from_model(&self.config);
        if let Gating::Lif { lif, .. } = &mut g {
            lif.emission = self.emission;
        }
        g
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            gating: self.gating(),
            ..BlockSpec::from_model(&self.config)
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Dimension("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Tensor<T> {
        let d = self.config.d_model;
        let mut e = Tensor::zeros(&[tokens.len(), d]);
        for (t, &id) in tokens.iter().enumerate() {
            e.row_mut(t).copy_from_slice(self.params.embedding.row(id));
        }
        e
    }

    /// Spike encoder over a batch: returns `(s, c)`, both `[B × S × D]`.
    pub fn encode(&self, batch: &[Vec<usize>]) -> Result<(BinaryTensor, Tensor<T>)> {
        let s_len = batch.first().map_or(0, Vec::len);
        let d = self.config.d_model;
        let mut spikes = Vec::new();
        let mut cont = Vec::new();
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.len() != s_len {
                return Err(Error::Dimension("ragged batch".into()));
            }
            let (c0, _) = layer_norm(
                &self.embed(seq),
                &self.params.enc_ln_gain,
                &self.params.enc_ln_bias,
                T::lit(self.config.ln_eps),
            )?;
            let g = gate_forward(&self.gating(), &c0)?;
            spikes.extend_from_slice(g.spikes.data());
            cont.extend_from_slice(c0.data());
        }
        let shape = vec![batch.len(), s_len, d];
        Ok((BinaryTensor::from_raw(shape.clone(), spikes), Tensor::from_raw(shape, cont)))
    }

    fn forward_seq(&self, tokens: &[usize], with_exits: bool) -> Result<(SeqForward<T>, SeqCache<T>)> {
        self.check_tokens(tokens)?;
        let eps = T::lit(self.config.ln_eps);
        let gating = self.gating();
        let spec = self.block_spec();
        let (c0, enc_ln) = layer_norm(
            &self.embed(tokens),
            &self.params.enc_ln_gain,
            &self.params.enc_ln_bias,
            eps,
        )?;
        let enc = gate_forward(&gating, &c0)?;
        let mut sites = vec![enc.spikes.clone()];
        let enc_spikes = enc.spikes.clone();
        let (mut s_bin, mut s_emit, mut c) = (enc.spikes, enc.emitted, c0);
        let mut block_caches = Vec::with_capacity(self.params.blocks.len());
        let mut block_tel = Vec::with_capacity(self.params.blocks.len());
        let mut block_c = Vec::with_capacity(self.params.blocks.len());
        for bp in &self.params.blocks {
            let (out, cache) = block_forward(&spec, bp, &s_bin, &s_emit, &c)?;
            sites.push(out.s_mid);
            sites.push(out.s_ffn);
            sites.push(out.s_out.clone());
            block_tel.push(out.telemetry);
            block_caches.push(cache);
            s_bin = out.s_out;
            s_emit = out.s_out_emitted;
            c = out.c_out;
            if with_exits {
                block_c.push(c.clone());
            }
        }
        let (cf, final_ln) = layer_norm(&c, &self.params.final_ln_gain, &self.params.final_ln_bias, eps)?;
        let (logits, head) = head_forward(&cf, &self.params.head)?;
        let mut exits = Vec::new();
        let mut exit_caches = Vec::new();
        for ci in &block_c {
            let (cfi, lnc) = layer_norm(ci, &self.params.final_ln_gain, &self.params.final_ln_bias, eps)?;
            let (li, hc) = head_forward(&cfi, &self.params.head)?;
            exits.push(li);
            exit_caches.push((lnc, hc));
        }
        Ok((
            SeqForward {
                logits,
                exits,
                sites,
                enc_spikes,
                blocks: block_tel,
            },
            SeqCache {
                tokens: tokens.to_vec(),
                enc_ln,
                enc_gate: enc.cache,
                blocks: block_caches,
                final_ln,
                head,
                exits: exit_caches,
            },
        ))
    }

    fn backward_seq(
        &self,
        cache: &SeqCache<T>,
        grad_logits: &Tensor<T>,
        grad_exits: &[Tensor<T>],
    ) -> Result<ModelParams<T>> {
        let p = &self.params;
        let spec = self.block_spec();
        let mut grads = p.zeros_like();

        let (dcf, dhead) = head_backward(&cache.head, &p.head, grad_logits)?;
        add_head(&mut grads.head, &dhead)?;
        let (mut dc, dg, db) = layer_norm_backward(&cache.final_ln, &p.final_ln_gain, &dcf)?;
        grads.final_ln_gain.add_assign(&dg)?;
        grads.final_ln_bias.add_assign(&db)?;

        let mut ds: Option<Tensor<T>> = None;
        for i in (0..p.blocks.len()).rev() {
            if let (Some(ge), Some((lnc, hc))) = (grad_exits.get(i), cache.exits.get(i)) {
                let (dcfi, dh) = head_backward(hc, &p.head, ge)?;
                add_head(&mut grads.head, &dh)?;
                let (dci, dg, db) = layer_norm_backward(lnc, &p.final_ln_gain, &dcfi)?;
                grads.final_ln_gain.add_assign(&dg)?;
                grads.final_ln_bias.add_assign(&db)?;
                dc.add_assign(&dci)?;
            }
            let (bg, dc_in, ds_in) = block_backward(&spec, &p.blocks[i], &cache.blocks[i], &dc, ds.as_ref())?;
            grads.blocks[i] = bg;
            dc = dc_in;
            ds = Some(ds_in);
        }
        if let Some(ds0) = ds {
            dc.add_assign(&gate_backward(&spec.gating, &cache.enc_gate, &ds0)?)?;
        }
        let (de, dg, db) = layer_norm_backward(&cache.enc_ln, &p.enc_ln_gain, &dc)?;
        grads.enc_ln_gain = dg;
        grads.enc_ln_bias = db;
        for (t, &id) in cache.tokens.iter().enumerate() {
            for (g, &v) in grads.embedding.row_mut(id).iter_mut().zip(de.row(t)) {
                *g += v;
            }
        }
        Ok(grads)
    }

    /// Batch forward. All sequences must share one length.
    pub fn forward(&self, batch: &[Vec<usize>], with_exits: bool) -> Result<ForwardOutput<T>> {
        let (outs, _) = self.forward_batch(batch, with_exits)?;
        let b = batch.len();
        let s = batch[0].len();
        let v = self.config.vocab;
        let stack = |f: &dyn Fn(&SeqForward<T>) -> &Tensor<T>| -> Tensor<T> {
            let mut data = Vec::with_capacity(b * s * v);
            for o in &outs {
                data.extend_from_slice(f(o).data());
            }
            Tensor::from_raw(vec![b, s, v], data)
        };
        let logits = stack(&|o| &o.logits);
        let exit_logits = if with_exits {
            (0..self.config.n_layers).map(|i| stack(&|o| &o.exits[i])).collect()
        } else {
            Vec::new()
        };
        let n_sites = outs[0].sites.len();
        let mut gating_sites = Vec::with_capacity(n_sites);
        for k in 0..n_sites {
            let name = if k == 0 {
                "encoder".to_string()
            } else {
                let kind = ["mid", "ffn", "out"][(k - 1) % 3];
                format!("blocks.{}.{kind}", (k - 1) / 3)
            };
            let width = outs[0].sites[k].cols();
            let mut data = Vec::with_capacity(b * s * width);
            for o in &outs {
                data.extend_from_slice(o.sites[k].data());
            }
            gating_sites.push((name, BinaryTensor::from_raw(vec![b, s, width], data)));
        }
        Ok(ForwardOutput {
            logits,
            exit_logits,
            telemetry: aggregate_telemetry(&outs),
            gating_sites,
        })
    }

    fn forward_batch(
        &self,
        batch: &[Vec<usize>],
        with_exits: bool,
    ) -> Result<(Vec<SeqForward<T>>, Vec<SeqCache<T>>)> {
        let s = batch
            .first()
            .ok_or_else(|| Error::Dimension("empty batch".into()))?
            .len();
        let mut outs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.len() != s {
                return Err(Error::Dimension("ragged batch".into()));
            }
            let (o, c) = self.forward_seq(seq, with_exits)?;
            outs.push(o);
            caches.push(c);
        }
        Ok((outs, caches))
    }

    /// Token-mean cross-entropy over all non-pad targets of the batch, plus
    /// weighted exit losses when `aux` is given, with gradients.
    pub fn loss_and_grad(
        &self,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        pad_id: Option<usize>,
        aux: Option<AuxWeights>,
    ) -> Result<(LossReport, ModelParams<T>)> {
        if inputs.len() != targets.len() || inputs.iter().zip(targets).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension("inputs and targets must align".into()));
        }
        let (outs, caches) = self.forward_batch(inputs, aux.is_some())?;
        let v = self.config.vocab;
        let n_tokens = targets
            .iter()
            .flatten()
            .filter(|&&t| Some(t) != pad_id)
            .count();
        if n_tokens == 0 {
            return Err(Error::UndefinedMetric("no non-pad targets".into()));
        }
        for &t in targets.iter().flatten() {
            if t >= v && Some(t) != pad_id {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let l = self.config.n_layers;
        let weights: Vec<f64> = match aux {
            Some(a) => (0..l).map(|i| a.lambda * a.rho.powi((l - 1 - i) as i32)).collect(),
            None => Vec::new(),
        };
        let inv_n = 1.0 / n_tokens as f64;
        let mut main = 0.0;
        let mut exit_losses = vec![0.0; weights.len()];
        let mut grads = self.params.zeros_like();
        for ((out, cache), tgt) in outs.iter().zip(&caches).zip(targets) {
            let (lm, gm) = ce_rows(&out.logits, tgt, pad_id, inv_n);
            main += lm;
            let mut gexits = Vec::with_capacity(weights.len());
            for (i, w) in weights.iter().enumerate() {
                let (le, mut ge) = ce_rows(&out.exits[i], tgt, pad_id, inv_n);
                exit_losses[i] += le;
                ge.scale(T::lit(*w));
                gexits.push(ge);
            }
            let g = self.backward_seq(cache, &gm, &gexits)?;
            grads.add_assign(&g)?;
        }
        let total = main + weights.iter().zip(&exit_losses).map(|(w, e)| w * e).sum::<f64>();
        Ok((
            LossReport {
                main,
                exits: exit_losses,
                total,
                tokens: n_tokens,
                telemetry: aggregate_telemetry(&outs),
            },
            grads,
        ))
    }
}

fn add_head<T: Scalar>(acc: &mut PriorParams<T>, g: &PriorParams<T>) -> Result<()> {
    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
        a.add_assign(b)?;
    }
    Ok(())
}

/// Sum over rows of `−log softmax(logits)[target]·scale` and its gradient
/// `(softmax − onehot)·scale`; pad rows contribute nothing.
fn ce_rows<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    pad_id: Option<usize>,
    scale: f64,
) -> (f64, Tensor<T>) {
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == pad_id {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&x| (x - max).exp()).sum();
        let logz = max + z.ln();
        loss += (logz - row[t]).as_f64() * scale;
        let g = grad.row_mut(r);
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - logz).exp() * T::lit(scale);
        }
        g[t] -= T::lit(scale);
    }
    (loss, grad)
}

fn aggregate_telemetry<T>(outs: &[SeqForward<T>]) -> ModelTelemetry {
    let n = outs.len().max(1) as f64;
    let l = outs.first().map_or(0, |o| o.blocks.len());
    let mut blocks = Vec::with_capacity(l);
    for i in 0..l {
        let mean = |f: &dyn Fn(&BlockTelemetry) -> f64| outs.iter().map(|o| f(&o.blocks[i])).sum::<f64>() / n;
        blocks.push(BlockTelemetry {
            sparsity_mid: mean(&|b| b.sparsity_mid),
            sparsity_ffn: mean(&|b| b.sparsity_ffn),
            sparsity_out: mean(&|b| b.sparsity_out),
            token_allzero_out: mean(&|b| b.token_allzero_out),
            gate: outs[0].blocks[i].gate,
            alphas: outs[0].blocks[i].alphas.clone(),
        });
    }
    ModelTelemetry {
        sparsity_encoder: outs.iter().map(|o| zero_fraction(&o.enc_spikes)).sum::<f64>() / n,
        token_allzero_encoder: outs.iter().map(|o| allzero_rows(&o.enc_spikes)).sum::<f64>() / n,
        blocks,
    }
}

impl AblationVariant {
    pub fn describe(self) -> &'static str {
        match self {
            Self::Full => "all components",
            Self::StaticPrior => "dynamic prior replaced by a learned static bias",
            Self::NoAttention => "attention path removed, decay-only fusion",
            Self::DecayOnly => "attention path and dynamic prior removed",
            Self::TopKMask => "LIF sites replaced by a deterministic top-k mask",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: AblationVariant) -> Model<f64> {
        let cfg = ModelConfig::small(8, 2, 2, 6, 16).with_variant(variant);
        Model::init(cfg, 7).unwrap()
    }

    #[test]
    fn shapes_and_exit_contract() {
        let cfg = ModelConfig::small(16, 2, 2, 8, 64);
        let m = Model::<f64>::init(cfg, 1).unwrap();
        let batch = vec![vec![1, 2, 3, 4, 5, 6, 7, 8], vec![9, 9, 9, 9, 0, 0, 0, 0]];
        let out = m.forward(&batch, true).unwrap();
        assert_eq!(out.logits.shape(), &[2, 8, 64]);
        assert_eq!(out.exit_logits.len(), 2);
        assert!(m.forward(&batch, false).unwrap().exit_logits.is_empty());
        assert_eq!(out.gating_sites.len(), 1 + 3 * 2);
    }

    #[test]
    fn encode_shapes_and_range_check() {
        let m = toy(AblationVariant::Full);
        let (s, c) = m.encode(&[vec![3]]).unwrap();
        assert_eq!(s.shape(), &[1, 1, 8]);
        assert_eq!(c.shape(), &[1, 1, 8]);
        assert!(matches!(
            m.encode(&[vec![16]]),
            Err(Error::TokenOutOfRange { id: 16, vocab: 16 })
        ));
    }

    #[test]
    fn zero_embedding_row_does_not_spike() {
        let mut m = toy(AblationVariant::Full);
        m.params.embedding.row_mut(5).fill(0.0);
        let (s, c) = m.encode(&[vec![5]]).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.count_ones(), 0);
    }

    #[test]
    fn counted_params_match_config_for_every_variant() {
        for v in AblationVariant::ALL {
            let m = toy(v);
            assert_eq!(param_count_of(&m.params), param_count(&m.config), "{v}");
            assert_eq!(m.params.numel(), param_count(&m.config).total());
        }
    }

    #[test]
    fn weight_decay_selection() {
        assert!(decays("blocks.0.w_q"));
        assert!(decays("embedding"));
        assert!(!decays("blocks.1.gamma"));
        assert!(!decays("blocks.1.gate"));
        assert!(!decays("final_ln_gain"));
        assert!(!decays("head.static_log_pi"));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = toy(AblationVariant::Full);
        let b = toy(AblationVariant::Full);
        let batch = vec![vec![1, 4, 2, 8, 5, 7]];
        let la = a.forward(&batch, false).unwrap().logits;
        let lb = b.forward(&batch, false).unwrap().logits;
        assert_eq!(la.data(), lb.data());
    }
}
