//! Decoding head: vocabulary projection plus a context-conditioned prior
//! `prior_scale · W2·GELU(W1·c)`, or a learned static bias in the ablation.

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_backward, linear, linear_backward};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorMlp<T> {
    /// `[D_p × D]`
    pub w1: Tensor<T>,
    /// `[V × D_p]`
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams<T> {
    /// `[V × D]`, independent of the input embedding.
    pub w_vocab: Tensor<T>,
    pub prior: Option<PriorMlp<T>>,
    /// `[V]`, only in the static-prior ablation.
    pub static_log_pi: Option<Tensor<T>>,
    pub prior_scale: f64,
}

impl<T: Scalar> PriorParams<T> {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            w_vocab: z(&self.w_vocab),
            prior: self.prior.as_ref().map(|p| PriorMlp {
                w1: z(&p.w1),
                w2: z(&p.w2),
            }),
            static_log_pi: self.static_log_pi.as_ref().map(z),
            prior_scale: self.prior_scale,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("w_vocab", &self.w_vocab)];
        if let Some(p) = &self.prior {
            v.push(("prior_w1", &p.w1));
            v.push(("prior_w2", &p.w2));
        }
        if let Some(s) = &self.static_log_pi {
            v.push(("static_log_pi", s));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("w_vocab", &mut self.w_vocab)];
        if let Some(p) = &mut self.prior {
            v.push(("prior_w1", &mut p.w1));
            v.push(("prior_w2", &mut p.w2));
        }
        if let Some(s) = &mut self.static_log_pi {
            v.push(("static_log_pi", s));
        }
        v
    }
}

pub struct HeadCache<T> {
    c: Tensor<T>,
    hidden_pre: Option<Tensor<T>>,
    hidden: Option<Tensor<T>>,
}

/// `W_vocab·c + prior_scale·W2·GELU(W1·c)`.
pub fn dynamic_prior_logits<T: Scalar>(c: &Tensor<T>, params: &PriorParams<T>) -> Result<Tensor<T>> {
    if params.prior.is_none() {
        return Err(Error::Config("head has no dynamic prior".into()));
    }
    Ok(head_forward(c, params)?.0)
}

/// `W_vocab·c + static_log_pi`.
pub fn static_prior_logits<T: Scalar>(c: &Tensor<T>, params: &PriorParams<T>) -> Result<Tensor<T>> {
    if params.static_log_pi.is_none() {
        return Err(Error::Config("head has no static prior".into()));
    }
    Ok(head_forward(c, params)?.0)
}

/// Logits for whatever prior the parameters carry (none, dynamic, static).
pub fn head_forward<T: Scalar>(
    c: &Tensor<T>,
    params: &PriorParams<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let mut logits = linear(c, &params.w_vocab)?;
    let mut cache = HeadCache {
        c: c.clone(),
        hidden_pre: None,
        hidden: None,
    };
    if let Some(p) = &params.prior {
        let pre = linear(c, &p.w1)?;
        let hidden = gelu(&pre);
        let mut prior = linear(&hidden, &p.w2)?;
        prior.scale(T::lit(params.prior_scale));
        logits.add_assign(&prior)?;
        cache.hidden_pre = Some(pre);
        cache.hidden = Some(hidden);
    }
    if let Some(bias) = &params.static_log_pi {
        let v = logits.cols();
        if bias.len() != v {
            return Err(Error::Dimension("static prior length".into()));
        }
        for r in 0..logits.rows() {
            for (l, &b) in logits.row_mut(r).iter_mut().zip(bias.data()) {
                *l += b;
            }
        }
    }
    Ok((logits, cache))
}

/// Returns `(∂L/∂c, parameter grads)`.
pub fn head_backward<T: Scalar>(
    cache: &HeadCache<T>,
    params: &PriorParams<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, PriorParams<T>)> {
    let mut grads = params.zeros_like();
    let (mut dc, dw) = linear_backward(&cache.c, &params.w_vocab, grad_logits)?;
    grads.w_vocab = dw;
    if let (Some(p), Some(pre), Some(hidden)) = (&params.prior, &cache.hidden_pre, &cache.hidden) {
        let mut g = grad_logits.clone();
        g.scale(T::lit(params.prior_scale));
        let (dhidden, dw2) = linear_backward(hidden, &p.w2, &g)?;
        let dpre = gelu_backward(pre, &dhidden)?;
        let (dc_prior, dw1) = linear_backward(&cache.c, &p.w1, &dpre)?;
        dc.add_assign(&dc_prior)?;
        grads.prior = Some(PriorMlp { w1: dw1, w2: dw2 });
    }
    if let Some(bias) = &mut grads.static_log_pi {
        for r in 0..grad_logits.rows() {
            for (b, &g) in bias.data_mut().iter_mut().zip(grad_logits.row(r)) {
                *b += g;
            }
        }
    }
    Ok((dc, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_params() -> PriorParams<f64> {
        PriorParams {
            w_vocab: Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            prior: Some(PriorMlp {
                w1: Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap(),
                w2: Tensor::from_f64(&[3, 1], &[1.0, 0.0, 0.0]).unwrap(),
            }),
            static_log_pi: None,
            prior_scale: 0.1,
        }
    }

    #[test]
    fn hand_instance() {
        let c = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let y = dynamic_prior_logits(&c, &hand_params()).unwrap();
        assert!((y.data()[0] - (1.0 + 0.1 * 0.841_344_746_068_543)).abs() < 1e-12);
        assert_eq!(&y.data()[1..], &[0.0, 0.0]);
        assert!((y.data()[0] - 1.0841).abs() < 1e-4);
    }

    #[test]
    fn disabled_prior_is_plain_projection() {
        let c = Tensor::from_f64(&[2, 2], &[0.3, -1.2, 2.0, 0.5]).unwrap();
        let mut p = hand_params();
        let plain = linear(&c, &p.w_vocab).unwrap();
        p.prior_scale = 0.0;
        assert_eq!(dynamic_prior_logits(&c, &p).unwrap(), plain);
        let mut p = hand_params();
        p.prior = Some(PriorMlp {
            w1: Tensor::zeros(&[1, 2]),
            w2: Tensor::zeros(&[3, 1]),
        });
        assert_eq!(dynamic_prior_logits(&c, &p).unwrap(), plain);
    }

    #[test]
    fn static_prior_cases() {
        let mut p = hand_params();
        p.prior = None;
        p.static_log_pi = Some(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = static_prior_logits(&Tensor::zeros(&[1, 2]), &p).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
        p.static_log_pi = Some(Tensor::zeros(&[3]));
        let c = Tensor::from_f64(&[1, 2], &[0.3, -1.2]).unwrap();
        assert_eq!(static_prior_logits(&c, &p).unwrap(), linear(&c, &p.w_vocab).unwrap());
    }
}
