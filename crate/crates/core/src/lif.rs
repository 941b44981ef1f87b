//! Leaky integrate-and-fire dynamics with surrogate-gradient backward.
//!
//! One step, in this exact order:
//!
//! ```text
//! pre = β·V + x
//! u   = clamp(pre, lo, hi)
//! s   = 1 if u ≥ θ else 0
//! V'  = u·(1 − s)
//! ```
//!
//! In the backward pass the Heaviside derivative is replaced by a surrogate,
//! the clamp passes gradient only strictly inside `(lo, hi)` (and at the
//! bounds themselves), and the reset factor `(1 − s)` is treated as a
//! constant unless [`ResetGrad::Surrogate`] is selected.

use crate::config::{ModelConfig, ResetGrad, SurrogateChoice};
use crate::error::{Error, Result};
use crate::tensor::{BinaryTensor, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SurrogateKind {
    /// `1 / (1 + (κ(u−θ))²)`, peak 1 at `u = θ`.
    ATan { kappa: f64 },
    /// `α·σ(α(u−θ))·(1−σ(α(u−θ)))`, peak `α/4`.
    ScaledSigmoid { alpha: f64 },
}

pub fn surrogate_grad(u: f64, theta: f64, kind: SurrogateKind) -> f64 {
    let x = u - theta;
    match kind {
        SurrogateKind::ATan { kappa } => 1.0 / (1.0 + (kappa * x) * (kappa * x)),
        SurrogateKind::ScaledSigmoid { alpha } => {
            let s = 1.0 / (1.0 + (-alpha * x).exp());
            alpha * s * (1.0 - s)
        }
    }
}

/// Smooth function whose derivative is exactly [`surrogate_grad`]; used as
/// the emitted value under [`Emission::SmoothProbe`].
pub fn surrogate_primitive(u: f64, theta: f64, kind: SurrogateKind) -> f64 {
    let x = u - theta;
    match kind {
        SurrogateKind::ATan { kappa } => 0.5 + (kappa * x).atan() / kappa,
        SurrogateKind::ScaledSigmoid { alpha } => 1.0 / (1.0 + (-alpha * x).exp()),
    }
}

/// What value a neuron hands downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Emission {
    /// Binary spike `s ∈ {0,1}`.
    #[default]
    Hard,
    /// The surrogate primitive of `u`, so that the forward pass is a smooth
    /// function whose exact derivative is the surrogate backward. The reset
    /// and all discrete masks still use the hard spike. Only meaningful for
    /// gradient verification.
    SmoothProbe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub beta: f64,
    pub theta: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub surrogate: SurrogateKind,
    pub reset_grad: ResetGrad,
    pub emission: Emission,
}

impl LifConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            beta: cfg.beta,
            theta: cfg.theta,
            clamp_lo: cfg.clamp_lo,
            clamp_hi: cfg.clamp_hi,
            surrogate: match cfg.surrogate {
                SurrogateChoice::ATan => SurrogateKind::ATan { kappa: cfg.kappa },
                SurrogateChoice::Sigmoid => SurrogateKind::ScaledSigmoid {
                    alpha: cfg.sigmoid_alpha,
                },
            },
            reset_grad: cfg.reset_grad,
            emission: Emission::Hard,
        }
    }
}

impl Default for LifConfig {
    fn default() -> Self {
        Self::from_model(&ModelConfig::toy())
    }
}

/// Membrane potentials `[B × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<T> {
    pub v: Tensor<T>,
}

impl<T: Scalar> LifState<T> {
    pub fn zeros(batch: usize, width: usize) -> Self {
        Self {
            v: Tensor::zeros(&[batch, width]),
        }
    }
}

#[inline]
fn step_scalar<T: Scalar>(cfg: &LifConfig, v: T, x: T) -> (T, T, bool, T) {
    let pre = T::lit(cfg.beta) * v + x;
    let u = pre.max(T::lit(cfg.clamp_lo)).min(T::lit(cfg.clamp_hi));
    let spike = u >= T::lit(cfg.theta);
    let v_next = if spike { T::zero() } else { u };
    (pre, u, spike, v_next)
}

pub fn lif_step<T: Scalar>(
    cfg: &LifConfig,
    state: &LifState<T>,
    x: &Tensor<T>,
) -> Result<(BinaryTensor, LifState<T>)> {
    state.v.expect_same_shape(x)?;
    if !x.is_finite() || !state.v.is_finite() {
        return Err(Error::NonFinite("lif_step input".into()));
    }
    let mut spikes = Vec::with_capacity(x.len());
    let mut v = Vec::with_capacity(x.len());
    for (&vi, &xi) in state.v.data().iter().zip(x.data()) {
        let (_, _, s, vn) = step_scalar(cfg, vi, xi);
        spikes.push(s as u8);
        v.push(vn);
    }
    Ok((
        BinaryTensor::from_raw(x.shape().to_vec(), spikes),
        LifState {
            v: Tensor::from_raw(x.shape().to_vec(), v),
        },
    ))
}

/// Saved forward quantities needed by [`lif_backward`]; all `[B × S × D]`.
#[derive(Clone, Debug)]
pub struct LifTrajectory<T> {
    pub shape: [usize; 3],
    pub pre: Vec<T>,
    pub u: Vec<T>,
    pub spikes: BinaryTensor,
}

#[derive(Clone, Debug)]
pub struct LifOutput<T> {
    pub spikes: BinaryTensor,
    /// Spikes as reals (or the smooth probe values), same shape as the input.
    pub emitted: Tensor<T>,
    pub v_final: LifState<T>,
    pub trajectory: LifTrajectory<T>,
}

fn bsd(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [s, d] => Ok([1, s, d]),
        [b, s, d] => Ok([b, s, d]),
        _ => Err(Error::Dimension(format!(
            "LIF expects [S×D] or [B×S×D], got {shape:?}"
        ))),
    }
}

/// Runs the recurrence over the time axis in chunks of `chunk` steps, handing
/// each chunk's terminal potential to the next. Accepts `[S × D]` (one
/// sequence) or `[B × S × D]`.
pub fn lif_sequence<T: Scalar>(
    cfg: &LifConfig,
    x: &Tensor<T>,
    v0: &LifState<T>,
    chunk: usize,
) -> Result<LifOutput<T>> {
    let [b, s, d] = bsd(x.shape())?;
    if s == 0 {
        return Err(Error::Dimension("sequence length must be at least 1".into()));
    }
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    if v0.v.shape() != [b, d] {
        return Err(Error::Dimension(format!(
            "initial state {:?} for input {:?}",
            v0.v.shape(),
            x.shape()
        )));
    }
    if !x.is_finite() || !v0.v.is_finite() {
        return Err(Error::NonFinite("lif_sequence input".into()));
    }
    let n = x.len();
    let mut pre = vec![T::zero(); n];
    let mut u = vec![T::zero(); n];
    let mut spikes = vec![0u8; n];
    let mut emitted = vec![T::zero(); n];
    let mut v_final = v0.v.clone();
    let xs = x.data();
    for bi in 0..b {
        let mut v: Vec<T> = v0.v.row(bi).to_vec();
        let mut start = 0;
        while start < s {
            let end = (start + chunk).min(s);
            // chunk-local pass; `v` carries the terminal potential across
            for t in start..end {
                let base = (bi * s + t) * d;
                for j in 0..d {
                    let (p, uu, sp, vn) = step_scalar(cfg, v[j], xs[base + j]);
                    pre[base + j] = p;
                    u[base + j] = uu;
                    spikes[base + j] = sp as u8;
                    emitted[base + j] = match cfg.emission {
                        Emission::Hard => {
                            if sp {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Emission::SmoothProbe => {
                            T::lit(surrogate_primitive(uu.as_f64(), cfg.theta, cfg.surrogate))
                        }
                    };
                    v[j] = vn;
                }
            }
            start = end;
        }
        v_final.row_mut(bi).copy_from_slice(&v);
    }
    let spikes = BinaryTensor::from_raw(x.shape().to_vec(), spikes);
    Ok(LifOutput {
        spikes: spikes.clone(),
        emitted: Tensor::from_raw(x.shape().to_vec(), emitted),
        v_final: LifState { v: v_final },
        trajectory: LifTrajectory {
            shape: [b, s, d],
            pre,
            u,
            spikes,
        },
    })
}

/// Backward-through-time. `grad_s` is `∂L/∂(emitted)`; returns `∂L/∂x`.
pub fn lif_backward<T: Scalar>(
    cfg: &LifConfig,
    traj: &LifTrajectory<T>,
    grad_s: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, s, d] = traj.shape;
    if bsd(grad_s.shape())? != traj.shape {
        return Err(Error::Dimension(format!(
            "gradient {:?} vs trajectory {:?}",
            grad_s.shape(),
            traj.shape
        )));
    }
    let beta = T::lit(cfg.beta);
    let lo = T::lit(cfg.clamp_lo);
    let hi = T::lit(cfg.clamp_hi);
    let gs = grad_s.data();
    let mut gx = vec![T::zero(); gs.len()];
    let sp = traj.spikes.data();
    for bi in 0..b {
        // ∂L/∂V_t carried backward from step t+1
        let mut gv = vec![T::zero(); d];
        for t in (0..s).rev() {
            let base = (bi * s + t) * d;
            for j in 0..d {
                let k = base + j;
                let u = traj.u[k];
                let sg = T::lit(surrogate_grad(u.as_f64(), cfg.theta, cfg.surrogate));
                let keep = if sp[k] == 1 { T::zero() } else { T::one() };
                let reset_factor = match cfg.reset_grad {
                    ResetGrad::Detached => keep,
                    ResetGrad::Surrogate => keep - u * sg,
                };
                let gu = gs[k] * sg + gv[j] * reset_factor;
                let p = traj.pre[k];
                let gpre = if p >= lo && p <= hi { gu } else { T::zero() };
                gx[k] = gpre;
                gv[j] = beta * gpre;
            }
        }
    }
    Ok(Tensor::from_raw(grad_s.shape().to_vec(), gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LifConfig {
        LifConfig::default()
    }

    fn one(v: f64, x: f64) -> (u8, f64) {
        let st = LifState {
            v: Tensor::from_f64(&[1, 1], &[v]).unwrap(),
        };
        let (s, next) = lif_step(&cfg(), &st, &Tensor::from_f64(&[1, 1], &[x]).unwrap()).unwrap();
        (s.data()[0], next.v.data()[0])
    }

    #[test]
    fn step_examples() {
        assert_eq!(one(0.0, 0.0), (0, 0.0));
        assert_eq!(one(0.1, 1.0), (1, 0.0));
        assert_eq!(one(3.0, 1.0), (1, 0.0));
        let (s, v) = one(0.0, 0.5);
        assert_eq!(s, 0);
        assert!((v - 0.5).abs() < 1e-15);
        // negative clamp without spike keeps the clamped value
        assert_eq!(one(-3.0, -1.0), (0, -3.0));
        // exact threshold spikes
        assert_eq!(one(0.0, 1.0), (1, 0.0));
    }

    #[test]
    fn step_rejects_nan() {
        let st = LifState::<f64>::zeros(1, 1);
        let x = Tensor::from_raw(vec![1, 1], vec![f64::NAN]);
        assert!(lif_step(&cfg(), &st, &x).is_err());
    }

    #[test]
    fn surrogate_values() {
        let at = SurrogateKind::ATan { kappa: 2.0 };
        assert_eq!(surrogate_grad(1.0, 1.0, at), 1.0);
        assert_eq!(surrogate_grad(1.5, 1.0, at), 0.5);
        let sig = SurrogateKind::ScaledSigmoid { alpha: 10.0 };
        assert_eq!(surrogate_grad(1.0, 1.0, sig), 2.5);
    }

    #[test]
    fn saturating_input_spikes_everywhere() {
        let x = Tensor::<f64>::full(&[1, 9, 3], 10.0);
        let out = lif_sequence(&cfg(), &x, &LifState::zeros(1, 3), 4).unwrap();
        assert_eq!(out.spikes.count_ones(), 27);
    }

    #[test]
    fn far_below_threshold_gradient() {
        // u − θ = −10 after clamp is impossible (lo = −3), so widen the clamp
        let mut c = cfg();
        c.clamp_lo = -20.0;
        let x = Tensor::<f64>::from_f64(&[1, 1], &[-9.0]).unwrap();
        let out = lif_sequence(&c, &x, &LifState::zeros(1, 1), 1).unwrap();
        let g = lif_backward(&c, &out.trajectory, &Tensor::from_f64(&[1, 1], &[2.0]).unwrap()).unwrap();
        let expect = 2.0 / (1.0 + 400.0);
        assert!((g.data()[0] - expect).abs() < 1e-15);
        assert!((g.data()[0] / 2.0 - 0.0025).abs() < 1e-5);
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 3], |i| (i as f64 * 0.37).sin() * 2.0);
        let out = lif_sequence(&cfg(), &x, &LifState::zeros(2, 3), 2).unwrap();
        let g = lif_backward(&cfg(), &out.trajectory, &Tensor::zeros(&[2, 5, 3])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2]);
        let out = lif_sequence(&cfg(), &x, &LifState::zeros(1, 2), 2).unwrap();
        assert!(lif_backward(&cfg(), &out.trajectory, &Tensor::zeros(&[1, 3, 2])).is_err());
    }
}
