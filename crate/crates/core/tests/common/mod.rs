//! Trajectory generators shared by the integration targets.

#![allow(dead_code)]

use mfqp::cost::FluxTrajectory;
use mfqp::measures::{theta_moment, StateDistribution};
use mfqp::models::{interacting_wlan_model, wlan_decay_model, RateModel};
use mfqp::quasipotential::{connector_auto, construct_delta0_to_target, construct_equilibrium_to_delta0, follow_flow};
use mfqp::mckean_vlasov::{find_equilibrium, sample_km_initial};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Full-support distribution with a roughly geometric profile.
pub fn random_full_support<R: Rng>(rng: &mut R, z_max: usize) -> StateDistribution {
    let w: Vec<f64> = (0..=z_max).map(|z| 0.7f64.powi(z as i32) * rng.gen_range(0.5..1.5)).collect();
    StateDistribution::from_weights(&w).unwrap()
}

pub fn random_trajectory<R: Rng>(model: &RateModel, rng: &mut R, z_max: usize) -> FluxTrajectory {
    mfqp::cost::random_trajectory(model, rng, z_max)
}

/// Trajectories under A1/A2-compliant models from every generator in the
/// crate: random perturbed flows, the delta_0 constructions, connectors and
/// flow segments.
pub fn moment_corpus() -> Vec<(RateModel, FluxTrajectory)> {
    let models = [wlan_decay_model(1.0, 1.0).unwrap(), interacting_wlan_model(0.5).unwrap()];
    let mut out = Vec::new();
    let mut r = rng(2024);
    for m in &models {
        let star = find_equilibrium(m, 20, 1e-13).unwrap();
        out.push((m.clone(), construct_equilibrium_to_delta0(m, &star).unwrap()));
        out.push((m.clone(), follow_flow(m, &random_full_support(&mut r, 20), 1.0, 1e-2).unwrap()));
        for _ in 0..15 {
            out.push((m.clone(), random_trajectory(m, &mut r, 10)));
        }
        for _ in 0..20 {
            let target = sample_km_initial(&mut r, 5.0, 20);
            out.push((m.clone(), construct_delta0_to_target(m, &target).unwrap()));
        }
        for _ in 0..15 {
            let target = random_full_support(&mut r, 20);
            if theta_moment(&target).to_f64() <= 5.0 {
                out.push((m.clone(), connector_auto(m, &star, &target).unwrap()));
            }
        }
    }
    out
}
