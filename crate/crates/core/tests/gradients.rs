mod common;

use common::grad::*;
use rdl_core::backbone::TableEncoderKind;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

#[test]
fn row_loss() {
    assert!(row_loss_gradients(INSTANCES) < TOL);
}

#[test]
fn link_loss() {
    assert!(link_loss_gradients(INSTANCES) < TOL);
}

#[test]
fn context_loss() {
    assert!(context_loss_gradients(INSTANCES) < TOL);
}

#[test]
fn combined_loss() {
    assert!(combined_loss_gradients(INSTANCES) < TOL);
}

#[test]
fn linear_table_encoder() {
    assert!(table_encoder_gradients(TableEncoderKind::LinearConcat, INSTANCES) < TOL);
}

#[test]
fn resnet_table_encoder() {
    assert!(table_encoder_gradients(TableEncoderKind::TabularResNet, INSTANCES) < TOL);
}

#[test]
fn sage_layer() {
    assert!(sage_layer_gradients(INSTANCES) < TOL);
}
