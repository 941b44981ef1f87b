//! Analytical per-token inference energy: operation counts from a model
//! configuration, per-operation costs, and a comparison against a dense
//! transformer baseline.
//!
//! Ledgers are kept in picojoules (after process scaling) and reported in
//! microjoules. The reference breakdown labels its column "mJ", but its
//! rows are only reproducible from the per-op constants as microjoules;
//! the report says so in its discrepancy section.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Per-operation energies in picojoules at 45 nm, plus a uniform process
/// scaling factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub mac_fp32: f64,
    pub add_fp32: f64,
    pub mac_int8: f64,
    pub add_int8: f64,
    pub spike_and_add: f64,
    pub lif_update: f64,
    /// Cost of reading one SRAM block of `sram_block_bytes`.
    pub sram_read: f64,
    pub sram_block_bytes: f64,
    pub dram_access: f64,
    pub process_scale: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            mac_fp32: 4.6,
            add_fp32: 0.9,
            mac_int8: 0.2,
            add_int8: 0.03,
            spike_and_add: 0.03,
            lif_update: 0.10,
            sram_read: 9.0,
            sram_block_bytes: 32.0 * 1024.0,
            dram_access: 640.0,
            process_scale: 0.25,
        }
    }
}

impl EnergyConstants {
    /// No FP16 figure is tabulated; half the FP32 MAC is assumed.
    pub fn mac_fp16(&self) -> f64 {
        self.mac_fp32 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mac_fp32,
            self.add_fp32,
            self.mac_int8,
            self.add_int8,
            self.spike_and_add,
            self.lif_update,
            self.sram_read,
            self.sram_block_bytes,
            self.dram_access,
            self.process_scale,
        ];
        if all.iter().all(|&x| x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("energy constants must be positive".into()))
        }
    }
}

/// Per-token operation counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCounts {
    pub layers: u64,
    /// Spike-driven MACs per layer: TCAM projection and both FFN matrices.
    pub sparse_per_layer: u64,
    /// Continuous-input MACs per layer: Q/K/V/out projections and the
    /// windowed attention scores.
    pub dense_per_layer: u64,
    pub lif_per_layer: u64,
    /// Vocabulary projection plus the prior MLP.
    pub head_ops: u64,
}

impl OpCounts {
    pub fn n_sparse(&self) -> u64 {
        self.layers * self.sparse_per_layer
    }

    pub fn n_dense(&self) -> u64 {
        self.layers * self.dense_per_layer + self.head_ops
    }

    pub fn n_lif(&self) -> u64 {
        self.layers * self.lif_per_layer
    }
}

pub fn op_counts(cfg: &ModelConfig) -> OpCounts {
    let d = cfg.d_model as u64;
    let dff = cfg.d_ff as u64;
    let v = cfg.vocab as u64;
    let dp = cfg.d_prior as u64;
    OpCounts {
        layers: cfg.n_layers as u64,
        sparse_per_layer: d * d + d * dff + dff * d,
        dense_per_layer: 4 * d * d + (cfg.n_heads * cfg.d_head * cfg.window * 2) as u64,
        lif_per_layer: 2 * d,
        head_ops: d * v + d * dp + dp * v,
    }
}

/// `round(n_sparse·(1 − s))`.
pub fn effective_sparse(n_sparse: u64, sparsity: f64) -> Result<u64> {
    check_sparsity(sparsity)?;
    Ok((n_sparse as f64 * (1.0 - sparsity)).round() as u64)
}

fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity {s} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Event-driven: zero spikes skip work; INT8 arithmetic, accumulate-only
    /// for spike inputs.
    Neuromorphic,
    /// Every operation runs as an FP16 MAC; no sparsity benefit.
    DenseAccelerator,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::Neuromorphic => "neuromorphic",
            Self::DenseAccelerator => "dense",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neuromorphic" => Ok(Self::Neuromorphic),
            "dense" | "dense_accelerator" => Ok(Self::DenseAccelerator),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (expected neuromorphic or dense)"
            ))),
        }
    }
}

/// Per-token energy by component, in picojoules after process scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyLedger {
    pub spike_gated: f64,
    pub dense: f64,
    pub lif: f64,
    pub sram: f64,
}

impl EnergyLedger {
    pub fn total(&self) -> f64 {
        self.spike_gated + self.dense + self.lif + self.sram
    }

    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("Spike-gated AC compute", self.spike_gated),
            ("Dense MAC compute", self.dense),
            ("LIF neuron updates", self.lif),
            ("On-chip SRAM weight access", self.sram),
        ]
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            spike_gated: self.spike_gated * f,
            dense: self.dense * f,
            lif: self.lif * f,
            sram: self.sram * f,
        }
    }
}

pub const PJ_PER_UJ: f64 = 1e6;

pub fn to_microjoules(pj: f64) -> f64 {
    pj / PJ_PER_UJ
}

fn sram_energy(ops: f64, bytes_per_weight: f64, k: &EnergyConstants) -> f64 {
    ops * bytes_per_weight / k.sram_block_bytes * k.sram_read
}

/// Spike-gated model energy per token.
pub fn energy_per_token(
    counts: &OpCounts,
    k: &EnergyConstants,
    regime: Regime,
    sparsity: f64,
) -> Result<EnergyLedger> {
    k.validate()?;
    let n_d = counts.n_dense() as f64;
    let ledger = match regime {
        Regime::Neuromorphic => {
            let active = effective_sparse(counts.n_sparse(), sparsity)? as f64;
            EnergyLedger {
                spike_gated: active * k.spike_and_add,
                dense: n_d * k.mac_int8,
                lif: counts.n_lif() as f64 * k.lif_update,
                sram: sram_energy(active + n_d, 1.0, k),
            }
        }
        Regime::DenseAccelerator => {
            check_sparsity(sparsity)?;
            let n_s = counts.n_sparse() as f64;
            EnergyLedger {
                spike_gated: n_s * k.mac_fp16(),
                dense: n_d * k.mac_fp16(),
                lif: counts.n_lif() as f64 * k.mac_fp16(),
                sram: sram_energy(n_s + n_d, 2.0, k),
            }
        }
    };
    Ok(ledger.scaled(k.process_scale))
}

/// Shape of a conventional dense transformer used as the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBaseline {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Context length attended to at decode time.
    pub context: usize,
}

impl DenseBaseline {
    /// The 201M-parameter GPT-2 comparison model.
    pub fn gpt2_201m() -> Self {
        Self {
            d_model: 1024,
            n_layers: 12,
            d_ff: 4096,
            vocab: 48_000,
            context: 512,
        }
    }

    /// `L·(4D² + 2·context·D + 2·D·D_ff) + D·V` MACs per generated token.
    pub fn macs(&self) -> u64 {
        let (d, l, f, v, s) = (
            self.d_model as u64,
            self.n_layers as u64,
            self.d_ff as u64,
            self.vocab as u64,
            self.context as u64,
        );
        l * (4 * d * d + 2 * s * d + 2 * d * f) + d * v
    }

    /// Baseline energy: FP32 MACs with 4-byte weights for the neuromorphic
    /// comparison, FP16 MACs with 2-byte weights on a dense accelerator.
    pub fn energy(&self, k: &EnergyConstants, regime: Regime) -> EnergyLedger {
        let n = self.macs() as f64;
        let (mac, bytes) = match regime {
            Regime::Neuromorphic => (k.mac_fp32, 4.0),
            Regime::DenseAccelerator => (k.mac_fp16(), 2.0),
        };
        EnergyLedger {
            spike_gated: 0.0,
            dense: n * mac,
            lif: 0.0,
            sram: sram_energy(n, bytes, k),
        }
        .scaled(k.process_scale)
    }
}

/// `baseline / model` on totals.
pub fn ratio(model: &EnergyLedger, baseline: &EnergyLedger) -> Result<f64> {
    if model.total() <= 0.0 {
        return Err(Error::UndefinedMetric("model energy is zero".into()));
    }
    Ok(baseline.total() / model.total())
}

/// Reference figures for the 194M configuration, for comparison only.
pub mod reference_figures {
    pub const SPARSE_PER_LAYER: u64 = 2_949_120;
    pub const N_SPARSE: f64 = 3.5e7;
    pub const N_DENSE: f64 = 7.0e7;
    pub const N_LIF: f64 = 1.8e4;
    pub const N_SPARSE_EFFECTIVE: f64 = 3.9e6;
    pub const SPARSITY: f64 = 0.89;
    /// Neuromorphic column rows (labelled mJ; numerically μJ).
    pub const ROW_SPIKE: f64 = 0.029;
    pub const ROW_DENSE: f64 = 0.350;
    pub const ROW_LIF: f64 = 0.0005;
    pub const ROW_SRAM: f64 = 0.082;
    pub const SNN_TOTAL: f64 = 0.46;
    pub const BASELINE_TOTAL: f64 = 30.7;
    pub const RATIO: f64 = 67.0;
    pub const DENSE_SNN_TOTAL: f64 = 0.67;
    pub const DENSE_BASELINE_TOTAL: f64 = 1.41;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub quantity: String,
    pub computed: f64,
    pub expected: f64,
}

impl Discrepancy {
    pub fn rel_diff(&self) -> f64 {
        (self.computed - self.expected).abs() / self.expected.abs()
    }
}

/// Everything the energy command prints.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub sparsity: f64,
    pub counts: OpCounts,
    pub model: [EnergyLedger; 2],
    pub baseline: [EnergyLedger; 2],
    pub ratios: [f64; 2],
    pub discrepancies: Vec<Discrepancy>,
}

/// Relative tolerance above which a computed count is reported as
/// disagreeing with the reference one; covers the reference rounding.
pub const COUNT_TOLERANCE: f64 = 0.05;
/// Same, for energy rows.
pub const ROW_TOLERANCE: f64 = 0.10;

impl EnergyReport {
    pub fn build(cfg: &ModelConfig, k: &EnergyConstants, baseline: &DenseBaseline, sparsity: f64) -> Result<Self> {
        let counts = op_counts(cfg);
        let model = [
            energy_per_token(&counts, k, Regime::Neuromorphic, sparsity)?,
            energy_per_token(&counts, k, Regime::DenseAccelerator, sparsity)?,
        ];
        let base = [
            baseline.energy(k, Regime::Neuromorphic),
            baseline.energy(k, Regime::DenseAccelerator),
        ];
        let ratios = [ratio(&model[0], &base[0])?, ratio(&model[1], &base[1])?];
        let mut report = Self {
            sparsity,
            counts,
            model,
            baseline: base,
            ratios,
            discrepancies: Vec::new(),
        };
        report.discrepancies = report.compare_reference();
        Ok(report)
    }

    /// Computed-vs-reference pairs that disagree beyond tolerance.
    fn compare_reference(&self) -> Vec<Discrepancy> {
        use reference_figures as p;
        let c = &self.counts;
        let uj = |x: f64| to_microjoules(x);
        let counts = [
            ("sparse MACs per layer", c.sparse_per_layer as f64, p::SPARSE_PER_LAYER as f64),
            ("total sparse MACs", c.n_sparse() as f64, p::N_SPARSE),
            ("total dense MACs", c.n_dense() as f64, p::N_DENSE),
            ("total LIF updates", c.n_lif() as f64, p::N_LIF),
        ];
        let rows = [
            ("spike-gated row (uJ)", uj(self.model[0].spike_gated), p::ROW_SPIKE),
            ("dense MAC row (uJ)", uj(self.model[0].dense), p::ROW_DENSE),
            ("LIF row (uJ)", uj(self.model[0].lif), p::ROW_LIF),
            ("SRAM row (uJ)", uj(self.model[0].sram), p::ROW_SRAM),
            ("model total (uJ)", uj(self.model[0].total()), p::SNN_TOTAL),
            ("baseline total (uJ)", uj(self.baseline[0].total()), p::BASELINE_TOTAL),
        ];
        let mut out = Vec::new();
        for (tol, list) in [(COUNT_TOLERANCE, &counts[..]), (ROW_TOLERANCE, &rows[..])] {
            for &(q, computed, expected) in list {
                let d = Discrepancy {
                    quantity: q.to_string(),
                    computed,
                    expected,
                };
                if d.rel_diff() > tol {
                    out.push(d);
                }
            }
        }
        out
    }

    pub fn to_text(&self, headline: Regime) -> String {
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(s, "operation counts per token");
        let _ = writeln!(s, "  sparse MACs/layer   {:>14}", c.sparse_per_layer);
        let _ = writeln!(s, "  dense MACs/layer    {:>14}", c.dense_per_layer);
        let _ = writeln!(s, "  LIF updates/layer   {:>14}", c.lif_per_layer);
        let _ = writeln!(s, "  output head         {:>14}", c.head_ops);
        let _ = writeln!(s, "  total sparse        {:>14}", c.n_sparse());
        let _ = writeln!(s, "  total dense         {:>14}", c.n_dense());
        let _ = writeln!(s, "  total LIF           {:>14}", c.n_lif());
        let _ = writeln!(
            s,
            "  effective sparse    {:>14}  (sparsity {})",
            (c.n_sparse() as f64 * (1.0 - self.sparsity)).round() as u64,
            self.sparsity
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "per-token energy (uJ)           neuromorphic    dense FP16");
        for ((name, a), (_, b)) in self.model[0].rows().into_iter().zip(self.model[1].rows()) {
            let _ = writeln!(s, "  {name:<30}{:>12.6}  {:>12.6}", to_microjoules(a), to_microjoules(b));
        }
        let _ = writeln!(
            s,
            "  {:<30}{:>12.6}  {:>12.6}",
            "model total",
            to_microjoules(self.model[0].total()),
            to_microjoules(self.model[1].total())
        );
        let _ = writeln!(
            s,
            "  {:<30}{:>12.6}  {:>12.6}",
            "dense baseline total",
            to_microjoules(self.baseline[0].total()),
            to_microjoules(self.baseline[1].total())
        );
        let _ = writeln!(
            s,
            "  {:<30}{:>11.2}x  {:>11.2}x",
            "baseline / model", self.ratios[0], self.ratios[1]
        );
        let idx = match headline {
            Regime::Neuromorphic => 0,
            Regime::DenseAccelerator => 1,
        };
        let _ = writeln!(s, "\nratio ({headline}): {:.2}x", self.ratios[idx]);
        let _ = writeln!(s, "\ndiscrepancies against reference figures");
        let _ = writeln!(
            s,
            "  note: reference energy rows are labelled mJ but only match the per-op constants as uJ"
        );
        if self.discrepancies.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for d in &self.discrepancies {
            let prec = if d.expected >= 1000.0 { 0 } else { 6 };
            let _ = writeln!(
                s,
                "  {:<24} computed {:>14.prec$}  reference {:>14.prec$}  ({:+.1}%)",
                d.quantity,
                d.computed,
                d.expected,
                100.0 * (d.computed - d.expected) / d.expected
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        let c = op_counts(&ModelConfig::reference());
        assert_eq!(c.n_lif(), 18_432);
        assert_eq!(c.head_ops, 46_227_456);
        assert_eq!(c.sparse_per_layer, 6_881_280);
        assert_eq!(c.n_dense(), 79_257_600);
    }

    #[test]
    fn effective_sparse_examples() {
        assert_eq!(effective_sparse(1000, 0.0).unwrap(), 1000);
        assert_eq!(effective_sparse(1000, 1.0).unwrap(), 0);
        assert!(effective_sparse(1000, 1.5).is_err());
    }

    #[test]
    fn zero_counts_zero_energy() {
        let zero = OpCounts {
            layers: 0,
            sparse_per_layer: 0,
            dense_per_layer: 0,
            lif_per_layer: 0,
            head_ops: 0,
        };
        for r in [Regime::Neuromorphic, Regime::DenseAccelerator] {
            let e = energy_per_token(&zero, &EnergyConstants::default(), r, 0.5).unwrap();
            assert_eq!(e.total(), 0.0);
        }
    }

    #[test]
    fn ratio_examples() {
        let e = EnergyLedger {
            dense: 3.0,
            ..Default::default()
        };
        assert_eq!(ratio(&e, &e).unwrap(), 1.0);
        let snn = EnergyLedger {
            dense: 0.46,
            ..Default::default()
        };
        let gpt = EnergyLedger {
            dense: 30.7,
            ..Default::default()
        };
        assert!((ratio(&snn, &gpt).unwrap() - 66.74).abs() < 0.01);
        assert!(ratio(&EnergyLedger::default(), &gpt).is_err());
    }
}
