//! Whole-network gradient verification.
//!
//! Builds a shrunken 64-bit network, runs a full 3-iteration routed forward
//! pass into the spread loss, and checks every trainable parameter's
//! gradient against central finite differences. Large tensors are sampled
//! on a deterministic coordinate stride to keep runtime bounded.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::net::{Network, NetworkConfig, RoutingSpec};
use crate::tensor::gradcheck::{grad_check_multi, GradCheckReport, Stencil};
use crate::tensor::params::{ParamId, Session};
use crate::tensor::Tensor;
use crate::train::spread_loss;

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Multi-scale plan: small central steps resolve strongly coupled weights
/// without crossing rectifier kinks; the wide fourth-order stencil lifts
/// weakly coupled routing parameters above the roundoff floor.
pub const FD_PLAN: [(f64, Stencil); 3] = [
    (1e-5, Stencil::Central2),
    (1e-4, Stencil::Central2),
    (1e-3, Stencil::Central4),
];
/// Gradients below this level are numerically zero for an O(1) loss.
pub const FD_FLOOR: f64 = 3e-9;

/// Gradient report for every trainable parameter of a tiny network with the
/// given routing procedure, through the full routed forward pass and loss.
pub fn network_gradient_report(
    spec: RoutingSpec,
    seed: u64,
    max_coords_per_tensor: usize,
) -> Result<GradCheckReport> {
    let net = Network::<f64>::build(NetworkConfig::tiny(spec), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67726164); // "grad"
    let batch = 2;
    let hw = net.config.input_hw;
    let images = Tensor::from_vec(
        vec![batch, hw, hw, 1],
        (0..batch * hw * hw)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let targets: Vec<usize> = (0..batch).map(|i| i % net.config.classes).collect();

    // check at a generic point: the symmetric neutral initialization puts
    // some routing parameters at stationary ties where their gradient is
    // legitimately near zero and finite differences cannot resolve it
    let points: Vec<(String, Tensor<f64>)> = net
        .store
        .iter()
        .filter(|(_, e)| e.kind == crate::tensor::params::ParamKind::Param)
        .map(|(_, e)| {
            let data = e
                .value
                .data()
                .iter()
                .map(|&x| x + rng.gen_range(-0.25..0.25))
                .collect();
            let perturbed =
                Tensor::from_vec(e.value.shape().to_vec(), data).expect("same shape");
            (e.name.clone(), perturbed)
        })
        .collect();
    let param_ids: Vec<ParamId> = net
        .store
        .iter()
        .filter(|(_, e)| e.kind == crate::tensor::params::ParamKind::Param)
        .map(|(id, _)| id)
        .collect();

    grad_check_multi(
        |tape, vars| {
            let sess = Session::new(tape, &net.store, true);
            for (id, var) in param_ids.iter().zip(vars) {
                sess.bind(*id, *var);
            }
            let out = net.forward(&sess, tape.constant(images.clone()))?;
            // classification loss plus a direct pose term, so compatibility
            // parameters see a strong path through the weighted mean and the
            // check stays well-conditioned
            let class_loss = spread_loss(out.class_activations, &targets, 0.4)?;
            let pose_loss = out.class_poses.sq_sum()?.mul_const(0.05);
            class_loss.add(pose_loss)
        },
        &points,
        GRAD_TOLERANCE,
        max_coords_per_tensor,
        FD_FLOOR,
        &FD_PLAN,
    )
}
