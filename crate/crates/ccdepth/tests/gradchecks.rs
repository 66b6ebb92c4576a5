//! Central finite-difference gradient checks: every differentiable operator in
//! the CRATE core and the self-supervised loss, plus a full-network check of
//! the complete training objective on a 64x32 toy input.
//!
//! The check bodies live in `common` so the acceptance suite can rerun them.

mod common;

#[test]
fn ssa_gradients() {
    common::gc_ssa(8);
}

#[test]
fn mssa_gradients() {
    common::gc_mssa(8);
}

#[test]
fn mssa_residual_step_gradients() {
    common::gc_mssa_residual_step(8);
}

#[test]
fn ista_step_gradients() {
    common::gc_ista_step(8);
}

#[test]
fn crate_module_gradients() {
    common::gc_crate_module(6);
}

#[test]
fn patchify_unpatchify_gradients() {
    common::gc_patchify_unpatchify(6);
}

#[test]
fn ssim_and_photometric_gradients() {
    common::gc_ssim_and_photometric(8);
}

#[test]
fn smoothness_gradients() {
    common::gc_smoothness(10);
}

#[test]
fn disp_to_depth_gradients() {
    common::gc_disp_to_depth(10);
}

#[test]
fn warp_gradients_through_depth_and_pose() {
    common::gc_warp(8);
}

#[test]
fn full_network_gradients_on_toy_input() {
    common::full_network_fd_check(10);
}
