#![allow(dead_code)]

pub mod gradients;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikegate::block::{build_attention_mask, AttentionParams, AttentionShape};
use spikegate::model::{AuxWeights, Model};
use spikegate::numerics::{linear, rope_rotate_heads, softmax_rows};
use spikegate::{BinaryTensor, Tensor};

pub const EPS: f64 = 1e-4;

/// Fourth-order central difference of a scalar function of one offset.
pub fn stencil(f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(EPS) - f(-EPS)) - (f(2.0 * EPS) - f(-2.0 * EPS))) / (12.0 * EPS)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (rng.random::<f64>() * 2.0 - 1.0) * 1.7)
}

pub fn rand_binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> BinaryTensor {
    let n: usize = shape.iter().product();
    BinaryTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_bool(p) as u8).collect()).unwrap()
}

/// `Σ g ⊙ y`: turns a tensor output into a scalar loss with known upstream
/// gradient `g`.
pub fn dot(g: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Relative error with an absolute floor so that two tiny numbers do not
/// count as a mismatch.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between `analytic` and central differences of
/// `f` with respect to every coordinate of `x`.
pub fn max_fd_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let num = stencil(|d| {
            let mut probe = x.clone();
            probe.data_mut()[k] += d;
            f(&probe)
        });
        worst = worst.max(rel_err(analytic.data()[k], num));
    }
    worst
}

/// Largest relative error between analytic model gradients of the total
/// loss and central differences, over up to `per_tensor` coordinates of
/// every parameter tensor.
pub fn model_fd_error(
    model: &Model<f64>,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    aux: Option<AuxWeights>,
    per_tensor: usize,
) -> (f64, String) {
    let (_, grads) = model.loss_and_grad(inputs, targets, None, aux).unwrap();
    let named = model.params.named();
    let mut worst = (0.0, String::new());
    for (ti, (name, t)) in named.iter().enumerate() {
        let step = (t.len() / per_tensor).max(1);
        for k in (0..t.len()).step_by(step).take(per_tensor) {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.named_mut()[ti].1.data_mut()[k] += delta;
                m.loss_and_grad(inputs, targets, None, aux).unwrap().0.total
            };
            let num = stencil(eval);
            let e = rel_err(grads.named()[ti].1.data()[k], num);
            if e > worst.0 {
                worst = (e, format!("{name}[{k}]"));
            }
        }
    }
    worst
}

/// Attention computed the slow way: every `[S × S]` score, an additive
/// `−∞` mask, a full-row softmax. Rows without a spike or without a visible
/// key stay zero before the output projection.
pub fn dense_attention(c: &Tensor<f64>, m: &[u8], p: &AttentionParams<f64>, shape: AttentionShape) -> Tensor<f64> {
    let (s, d) = (c.rows(), c.cols());
    let h = shape.heads;
    let dk = d / h;
    let pos: Vec<usize> = (0..s).collect();
    let q = rope_rotate_heads(&linear(c, &p.w_q).unwrap(), h, &pos, false).unwrap();
    let k = rope_rotate_heads(&linear(c, &p.w_k).unwrap(), h, &pos, false).unwrap();
    let v = linear(c, &p.w_v).unwrap();
    let mask_bits = BinaryTensor::new(vec![s], m.to_vec()).unwrap();
    let mask = build_attention_mask::<f64>(s, shape.window, shape.n_global, &mask_bits).unwrap();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut mixed = Tensor::<f64>::zeros(&[s, d]);
    for head in 0..h {
        let span = head * dk..(head + 1) * dk;
        for i in 0..s {
            if m[i] == 0 || mask.row(i).iter().all(|x| x.is_infinite()) {
                continue;
            }
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    let qk: f64 = q.row(i)[span.clone()].iter().zip(&k.row(j)[span.clone()]).map(|(a, b)| a * b).sum();
                    qk * scale + mask.row(i)[j]
                })
                .collect();
            let probs = softmax_rows(&Tensor::new_masked(vec![1, s], scores).unwrap()).unwrap();
            for j in 0..s {
                for e in span.clone() {
                    mixed.row_mut(i)[e] += probs.data()[j] * v.row(j)[e];
                }
            }
        }
    }
    linear(&mixed, &p.w_out).unwrap()
}
