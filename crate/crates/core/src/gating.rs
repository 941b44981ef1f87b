//! Spike-generating sites: LIF neurons, or the deterministic top-k mask that
//! replaces them in the `topk_mask` ablation.

use crate::config::{topk_count, ModelConfig};
use crate::error::Result;
use crate::lif::{lif_backward, lif_sequence, surrogate_grad, LifConfig, LifState, LifTrajectory};
use crate::tensor::{BinaryTensor, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gating {
    Lif { lif: LifConfig, chunk: usize },
    TopK { keep_ratio: f64, multiplicative: bool, lif: LifConfig },
}

impl Gating {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        let lif = LifConfig::from_model(cfg);
        if cfg.variant == crate::config::AblationVariant::TopKMask {
            Gating::TopK {
                keep_ratio: cfg.topk_keep,
                multiplicative: cfg.topk_multiplicative,
                lif,
            }
        } else {
            Gating::Lif {
                lif,
                chunk: cfg.chunk,
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum GateCache<T> {
    Lif(LifTrajectory<T>),
    TopK {
        x: Tensor<T>,
        mask: BinaryTensor,
        /// Per-row magnitude of the k-th kept entry.
        tau: Vec<T>,
    },
}

#[derive(Clone, Debug)]
pub struct GateOutput<T> {
    pub spikes: BinaryTensor,
    /// What flows downstream: spikes as reals, the smooth probe, or `mask·x`.
    pub emitted: Tensor<T>,
    pub cache: GateCache<T>,
}

/// Per token (row), keeps the `k = max(1, round(keep_ratio·D))` entries of
/// largest magnitude; ties go to the lower index.
pub fn topk_mask<T: Scalar>(x: &Tensor<T>, keep_ratio: f64) -> BinaryTensor {
    topk_with_tau(x, keep_ratio).0
}

fn topk_with_tau<T: Scalar>(x: &Tensor<T>, keep_ratio: f64) -> (BinaryTensor, Vec<T>) {
    let d = x.cols();
    let k = topk_count(keep_ratio, d);
    let mut mask = vec![0u8; x.len()];
    let mut tau = Vec::with_capacity(x.rows());
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for r in 0..x.rows() {
        let row = x.row(r);
        order.clear();
        order.extend(0..d);
        // stable sort keeps lower index first among equal magnitudes
        order.sort_by(|&a, &b| {
            row[b]
                .abs()
                .partial_cmp(&row[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for &j in &order[..k] {
            mask[r * d + j] = 1;
        }
        tau.push(row[order[k - 1]].abs());
    }
    (BinaryTensor::from_raw(x.shape().to_vec(), mask), tau)
}

/// Runs one gating site over a single sequence `x [S × W]` (time-major).
pub fn gate_forward<T: Scalar>(gating: &Gating, x: &Tensor<T>) -> Result<GateOutput<T>> {
    match *gating {
        Gating::Lif { lif, chunk } => {
            let width = x.cols();
            let out = lif_sequence(&lif, x, &LifState::zeros(1, width), chunk)?;
            Ok(GateOutput {
                spikes: out.spikes,
                emitted: out.emitted,
                cache: GateCache::Lif(out.trajectory),
            })
        }
        Gating::TopK {
            keep_ratio,
            multiplicative,
            ..
        } => {
            let (mask, tau) = topk_with_tau(x, keep_ratio);
            let emitted = if multiplicative {
                Tensor::from_raw(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&v, &m)| if m == 1 { v } else { T::zero() })
                        .collect(),
                )
            } else {
                mask.to_real()
            };
            Ok(GateOutput {
                spikes: mask.clone(),
                emitted,
                cache: GateCache::TopK {
                    x: x.clone(),
                    mask,
                    tau,
                },
            })
        }
    }
}

/// Gradient of the gating site. For the binary top-k mask the step
/// `1[|x| ≥ τ]` gets the same surrogate as the LIF threshold, centred on the
/// row's cut-off `τ` (held constant).
pub fn gate_backward<T: Scalar>(
    gating: &Gating,
    cache: &GateCache<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    match (gating, cache) {
        (Gating::Lif { lif, .. }, GateCache::Lif(traj)) => lif_backward(lif, traj, grad),
        (
            Gating::TopK {
                multiplicative,
                lif,
                ..
            },
            GateCache::TopK { x, mask, tau },
        ) => {
            x.expect_same_shape(grad)?;
            let d = x.cols();
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                for j in 0..d {
                    let k = r * d + j;
                    let v = x.data()[k];
                    let g = grad.data()[k];
                    out.data_mut()[k] = if *multiplicative {
                        if mask.data()[k] == 1 {
                            g
                        } else {
                            T::zero()
                        }
                    } else {
                        let sg = surrogate_grad(v.abs().as_f64(), tau[r].as_f64(), lif.surrogate);
                        let sign = if v >= T::zero() { T::one() } else { -T::one() };
                        g * T::lit(sg) * sign
                    };
                }
            }
            Ok(out)
        }
        _ => Err(crate::error::Error::Dimension(
            "gating cache does not match gating kind".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 4], &[3.0, -5.0, 1.0, 0.0]).unwrap();
        assert_eq!(topk_mask(&x, 0.5).data(), &[1, 1, 0, 0]);
        assert_eq!(topk_mask(&x, 1.0).data(), &[1, 1, 1, 1]);
        let x = Tensor::<f64>::from_f64(&[1, 8], &[0.1, 0.2, -0.9, 0.3, 0.0, 0.5, 0.4, 0.2]).unwrap();
        assert_eq!(topk_mask(&x, 0.11).data(), &[0, 0, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[1.0, -1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(topk_mask(&x, 0.5).data(), &[1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn multiplicative_emits_masked_values() {
        let g = Gating::TopK {
            keep_ratio: 0.5,
            multiplicative: true,
            lif: LifConfig::default(),
        };
        let x = Tensor::<f64>::from_f64(&[1, 4], &[3.0, -5.0, 1.0, 0.0]).unwrap();
        let out = gate_forward(&g, &x).unwrap();
        assert_eq!(out.emitted.data(), &[3.0, -5.0, 0.0, 0.0]);
        let back = gate_backward(&g, &out.cache, &Tensor::full(&[1, 4], 1.0)).unwrap();
        assert_eq!(back.data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
