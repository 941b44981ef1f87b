//! Each check returns the worst relative error between an analytic
//! gradient and central differences, with the tolerance it must meet.

use super::{dot, max_fd_error, model_fd_error, rand_binary, randn, rng};
use spikegate::block::{
    attention_backward, attention_forward, block_backward, block_forward, decay_aggregate,
    decay_backward, ffn_backward, spiking_ffn, AttentionParams, AttentionShape, BlockParams,
    BlockSpec, FfnParams,
};
use spikegate::gating::Gating;
use spikegate::head::{head_backward, head_forward, PriorMlp, PriorParams};
use spikegate::lif::{lif_backward, lif_sequence, Emission, LifConfig, LifState};
use spikegate::model::{AuxWeights, Model};
use spikegate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul,
    matmul_backward, rope_rotate_heads,
};
use spikegate::{AblationVariant, ModelConfig, Tensor};

pub const KERNEL_TOL: f64 = 1e-6;
pub const SPIKING_TOL: f64 = 1e-4;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> f64,
    pub tol: f64,
}

pub const ALL: [Check; 12] = [
    Check { name: "matmul", run: matmul_kernel, tol: KERNEL_TOL },
    Check { name: "linear", run: linear_kernel, tol: KERNEL_TOL },
    Check { name: "layer_norm", run: layer_norm_kernel, tol: KERNEL_TOL },
    Check { name: "gelu", run: gelu_kernel, tol: KERNEL_TOL },
    Check { name: "rope", run: rope_kernel, tol: KERNEL_TOL },
    Check { name: "decay", run: decay_kernel, tol: KERNEL_TOL },
    Check { name: "attention", run: attention_kernel, tol: KERNEL_TOL },
    Check { name: "prior_head", run: prior_head_kernel, tol: KERNEL_TOL },
    Check { name: "lif_sequence", run: lif_sequence_bptt, tol: SPIKING_TOL },
    Check { name: "spiking_ffn", run: spiking_ffn_kernel, tol: SPIKING_TOL },
    Check { name: "block", run: one_full_block, tol: SPIKING_TOL },
    Check { name: "model", run: end_to_end, tol: SPIKING_TOL },
];

pub fn matmul_kernel() -> f64 {
    let mut r = rng(1);
    let a = randn(&mut r, &[3, 4], 1.0);
    let b = randn(&mut r, &[4, 5], 1.0);
    let g = randn(&mut r, &[3, 5], 1.0);
    let (da, db) = matmul_backward(&a, &b, &g).unwrap();
    max_fd_error(&a, &da, |x| dot(&g, &matmul(x, &b).unwrap()))
        .max(max_fd_error(&b, &db, |x| dot(&g, &matmul(&a, x).unwrap())))
}

pub fn linear_kernel() -> f64 {
    let mut r = rng(2);
    let x = randn(&mut r, &[2, 3, 4], 1.0);
    let w = randn(&mut r, &[6, 4], 1.0);
    let g = randn(&mut r, &[2, 3, 6], 1.0);
    let (dx, dw) = linear_backward(&x, &w, &g).unwrap();
    max_fd_error(&x, &dx, |v| dot(&g, &linear(v, &w).unwrap()))
        .max(max_fd_error(&w, &dw, |v| dot(&g, &linear(&x, v).unwrap())))
}

pub fn layer_norm_kernel() -> f64 {
    let mut r = rng(3);
    let x = randn(&mut r, &[4, 6], 2.0);
    let gain = randn(&mut r, &[6], 1.0);
    let bias = randn(&mut r, &[6], 1.0);
    let g = randn(&mut r, &[4, 6], 1.0);
    let (_, cache) = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    let (dx, dgain, dbias) = layer_norm_backward(&cache, &gain, &g).unwrap();
    let f = |x: &Tensor<f64>, gn: &Tensor<f64>, b: &Tensor<f64>| dot(&g, &layer_norm(x, gn, b, 1e-5).unwrap().0);
    max_fd_error(&x, &dx, |v| f(v, &gain, &bias))
        .max(max_fd_error(&gain, &dgain, |v| f(&x, v, &bias)))
        .max(max_fd_error(&bias, &dbias, |v| f(&x, &gain, v)))
}

pub fn gelu_kernel() -> f64 {
    let mut r = rng(4);
    let x = randn(&mut r, &[5, 7], 3.0);
    let g = randn(&mut r, &[5, 7], 1.0);
    let dx = gelu_backward(&x, &g).unwrap();
    max_fd_error(&x, &dx, |v| dot(&g, &gelu(v)))
}

pub fn rope_kernel() -> f64 {
    // the inverse rotation is the adjoint, hence the backward pass
    let mut r = rng(5);
    let x = randn(&mut r, &[5, 8], 1.0);
    let g = randn(&mut r, &[5, 8], 1.0);
    let pos: Vec<usize> = (0..5).collect();
    let dx = rope_rotate_heads(&g, 2, &pos, true).unwrap();
    max_fd_error(&x, &dx, |v| dot(&g, &rope_rotate_heads(v, 2, &pos, false).unwrap()))
}

pub fn decay_kernel() -> f64 {
    let mut r = rng(6);
    let (s, h, dk) = (7, 2, 3);
    let z = randn(&mut r, &[s, h, dk], 1.0);
    let alpha = Tensor::from_f64(&[h], &[0.9, 0.55]).unwrap();
    let h0 = randn(&mut r, &[h, dk], 1.0);
    let g = randn(&mut r, &[s, h, dk], 1.0);
    let (states, _) = decay_aggregate(&z, &alpha, &h0).unwrap();
    let flat = |t: &Tensor<f64>| t.clone().reshape(&[s, h * dk]).unwrap();
    let (dz, dalpha, dh0) = decay_backward(&flat(&z), alpha.data(), h0.data(), &flat(&states), &flat(&g), h);
    let f = |z: &Tensor<f64>, a: &Tensor<f64>, h0: &Tensor<f64>| dot(&g, &decay_aggregate(z, a, h0).unwrap().0);
    let dz = dz.reshape(&[s, h, dk]).unwrap();
    let da = Tensor::new(vec![h], dalpha).unwrap();
    let dh0 = Tensor::new(vec![h, dk], dh0).unwrap();
    max_fd_error(&z, &dz, |v| f(v, &alpha, &h0))
        .max(max_fd_error(&alpha, &da, |v| f(&z, v, &h0)))
        .max(max_fd_error(&h0, &dh0, |v| f(&z, &alpha, v)))
}

pub fn attention_kernel() -> f64 {
    let mut r = rng(7);
    let (s, d) = (9, 8);
    let shape = AttentionShape {
        heads: 2,
        window: 4,
        n_global: 2,
    };
    let c = randn(&mut r, &[s, d], 1.0);
    let m = [1, 0, 1, 1, 0, 0, 1, 0, 1];
    let p = AttentionParams {
        w_q: randn(&mut r, &[d, d], 0.5),
        w_k: randn(&mut r, &[d, d], 0.5),
        w_v: randn(&mut r, &[d, d], 0.5),
        w_out: randn(&mut r, &[d, d], 0.5),
    };
    let g = randn(&mut r, &[s, d], 1.0);
    let (_, cache) = attention_forward(&c, &m, &p, shape).unwrap();
    let (dc, dp) = attention_backward(&cache, &p, shape, &g).unwrap();
    let f = |c: &Tensor<f64>, p: &AttentionParams<f64>| dot(&g, &attention_forward(c, &m, p, shape).unwrap().0);
    let mut worst = max_fd_error(&c, &dc, |v| f(v, &p));
    let fields: [(fn(&mut AttentionParams<f64>) -> &mut Tensor<f64>, &Tensor<f64>); 4] = [
        (|p| &mut p.w_q, &dp.w_q),
        (|p| &mut p.w_k, &dp.w_k),
        (|p| &mut p.w_v, &dp.w_v),
        (|p| &mut p.w_out, &dp.w_out),
    ];
    for (get, grad) in fields {
        let x = get(&mut p.clone()).clone();
        worst = worst.max(max_fd_error(&x, grad, |v| {
            let mut q = p.clone();
            *get(&mut q) = v.clone();
            f(&c, &q)
        }));
    }
    worst
}

pub fn prior_head_kernel() -> f64 {
    let mut r = rng(8);
    let (n, d, v, dp) = (4, 6, 10, 3);
    let c = randn(&mut r, &[n, d], 1.0);
    let p = PriorParams {
        w_vocab: randn(&mut r, &[v, d], 0.5),
        prior: Some(PriorMlp {
            w1: randn(&mut r, &[dp, d], 0.5),
            w2: randn(&mut r, &[v, dp], 0.5),
        }),
        static_log_pi: Some(randn(&mut r, &[v], 0.5)),
        prior_scale: 0.1,
    };
    let g = randn(&mut r, &[n, v], 1.0);
    let (_, cache) = head_forward(&c, &p).unwrap();
    let (dc, dparams) = head_backward(&cache, &p, &g).unwrap();
    let mut worst = max_fd_error(&c, &dc, |x| dot(&g, &head_forward(x, &p).unwrap().0));
    for (i, (_, grad)) in dparams.named().into_iter().enumerate() {
        let x = p.named()[i].1.clone();
        worst = worst.max(max_fd_error(&x, grad, |val| {
            let mut q = p.clone();
            *q.named_mut()[i].1 = val.clone();
            dot(&g, &head_forward(&c, &q).unwrap().0)
        }));
    }
    worst
}

fn probe_lif() -> LifConfig {
    LifConfig {
        emission: Emission::SmoothProbe,
        ..LifConfig::default()
    }
}

pub fn lif_sequence_bptt() -> f64 {
    let cfg = probe_lif();
    let mut r = rng(9);
    let x = randn(&mut r, &[2, 12, 5], 1.2);
    let g = randn(&mut r, &[2, 12, 5], 1.0);
    let v0 = LifState::zeros(2, 5);
    let out = lif_sequence(&cfg, &x, &v0, 4).unwrap();
    assert!(out.spikes.count_ones() > 0, "inputs must make some neurons fire");
    let dx = lif_backward(&cfg, &out.trajectory, &g).unwrap();
    max_fd_error(&x, &dx, |v| dot(&g, &lif_sequence(&cfg, v, &v0, 4).unwrap().emitted))
}

pub fn spiking_ffn_kernel() -> f64 {
    let gating = Gating::Lif {
        lif: probe_lif(),
        chunk: 3,
    };
    let mut r = rng(10);
    let c = randn(&mut r, &[6, 4], 1.0);
    let p = FfnParams {
        w_up: randn(&mut r, &[8, 4], 1.0),
        w_down: randn(&mut r, &[4, 8], 0.5),
    };
    let g = randn(&mut r, &[6, 4], 1.0);
    let out = spiking_ffn(&c, &p, &gating).unwrap();
    let (dc, dp) = ffn_backward(&out.cache, &p, &gating, &g).unwrap();
    let f = |c: &Tensor<f64>, p: &FfnParams<f64>| dot(&g, &spiking_ffn(c, p, &gating).unwrap().out);
    max_fd_error(&c, &dc, |v| f(v, &p))
        .max(max_fd_error(&p.w_up, &dp.w_up, |v| {
            f(&c, &FfnParams { w_up: v.clone(), w_down: p.w_down.clone() })
        }))
        .max(max_fd_error(&p.w_down, &dp.w_down, |v| {
            f(&c, &FfnParams { w_up: p.w_up.clone(), w_down: v.clone() })
        }))
}

pub fn one_full_block() -> f64 {
    let mut cfg = ModelConfig::small(8, 2, 1, 6, 16);
    cfg.init_std = 0.4;
    let mut model = Model::<f64>::init(cfg, 21).unwrap();
    model.emission = Emission::SmoothProbe;
    let spec = model.block_spec();
    let params: BlockParams<f64> = model.params.blocks[0].clone();
    let mut r = rng(11);
    let s_in = rand_binary(&mut r, &[6, 8], 0.3);
    let emitted = randn(&mut r, &[6, 8], 1.0);
    let c_in = randn(&mut r, &[6, 8], 1.0);
    let gc = randn(&mut r, &[6, 8], 1.0);
    let gs = randn(&mut r, &[6, 8], 1.0);
    let loss = |spec: &BlockSpec, p: &BlockParams<f64>, e: &Tensor<f64>, c: &Tensor<f64>| {
        let (o, _) = block_forward(spec, p, &s_in, e, c).unwrap();
        dot(&gc, &o.c_out) + dot(&gs, &o.s_out_emitted)
    };
    let (_, cache) = block_forward(&spec, &params, &s_in, &emitted, &c_in).unwrap();
    let (grads, dc, de) = block_backward(&spec, &params, &cache, &gc, Some(&gs)).unwrap();
    let mut worst = max_fd_error(&c_in, &dc, |v| loss(&spec, &params, &emitted, v))
        .max(max_fd_error(&emitted, &de, |v| loss(&spec, &params, v, &c_in)));
    for (i, (_, grad)) in grads.named().into_iter().enumerate() {
        let x = params.named()[i].1.clone();
        worst = worst.max(max_fd_error(&x, grad, |val| {
            let mut q = params.clone();
            *q.named_mut()[i].1 = val.clone();
            loss(&spec, &q, &emitted, &c_in)
        }));
    }
    worst
}

/// The D=8, H=2, L=2, S=6, V=16 model with smooth emission.
pub fn probe_model(variant: AblationVariant, seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::small(8, 2, 2, 6, 16).with_variant(variant);
    cfg.init_std = 0.3;
    cfg.topk_multiplicative = true;
    let mut m = Model::init(cfg, seed).unwrap();
    m.emission = Emission::SmoothProbe;
    m
}

pub fn toy_batch() -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    (
        vec![vec![1, 5, 2, 7, 3, 11], vec![4, 4, 9, 0, 6, 8]],
        vec![vec![5, 2, 7, 3, 11, 1], vec![4, 9, 0, 6, 8, 15]],
    )
}

/// Every variant, plus the full model with deep supervision.
pub fn end_to_end() -> f64 {
    let (x, y) = toy_batch();
    let mut worst: f64 = 0.0;
    for variant in AblationVariant::ALL {
        worst = worst.max(model_fd_error(&probe_model(variant, 3), &x, &y, None, 8).0);
    }
    let aux = Some(AuxWeights::default());
    worst.max(model_fd_error(&probe_model(AblationVariant::Full, 11), &x, &y, aux, 8).0)
}
