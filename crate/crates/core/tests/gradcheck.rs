//! Analytic backward passes against central finite differences, in f64.

mod common;

use common::gradients::{self, probe_model, toy_batch, Check, SPIKING_TOL};
use common::model_fd_error;
use spikegate::model::AuxWeights;
use spikegate::AblationVariant;

fn check(name: &str) {
    let c: &Check = gradients::ALL.iter().find(|c| c.name == name).unwrap();
    let err = (c.run)();
    assert!(err < c.tol, "{name}: rel err {err:e} >= {:e}", c.tol);
}

#[test]
fn matmul() {
    check("matmul");
}

#[test]
fn linear() {
    check("linear");
}

#[test]
fn layer_norm() {
    check("layer_norm");
}

#[test]
fn gelu() {
    check("gelu");
}

#[test]
fn rope() {
    check("rope");
}

#[test]
fn decay() {
    check("decay");
}

#[test]
fn attention() {
    check("attention");
}

#[test]
fn prior_head() {
    check("prior_head");
}

#[test]
fn lif_sequence() {
    check("lif_sequence");
}

#[test]
fn spiking_ffn() {
    check("spiking_ffn");
}

#[test]
fn one_block() {
    check("block");
}

// split out per variant so a failure names it
#[test]
fn model_per_variant() {
    let (x, y) = toy_batch();
    for variant in AblationVariant::ALL {
        let (err, at) = model_fd_error(&probe_model(variant, 3), &x, &y, None, 8);
        assert!(err < SPIKING_TOL, "{variant}: {err:e} at {at}");
    }
    let aux = Some(AuxWeights::default());
    let (err, at) = model_fd_error(&probe_model(AblationVariant::Full, 11), &x, &y, aux, 8);
    assert!(err < SPIKING_TOL, "deep supervision: {err:e} at {at}");
}
