//! Transition-rate models on the two edge-set kinds, frozen-field rate
//! tables, single-particle stationary laws and assumption diagnostics.
//!
//! Every built-in model depends on the mean field only through `xi(0)`, which
//! is passed around as the scalar `field`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{tv_distance, StateDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Edges `(z, z+1)` and resets `(z, 0)` for `z >= 1`.
    ChainWithResets,
    /// Edges `(z, z+1)` and `(z, z-1)` for `z >= 1`.
    BirthDeath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }

    pub fn is_forward(&self) -> bool {
        self.to == self.from + 1
    }
}

impl EdgeKind {
    /// Target of the non-forward edge leaving `z >= 1`.
    pub fn backward_target(self, z: usize) -> usize {
        match self {
            EdgeKind::ChainWithResets => 0,
            EdgeKind::BirthDeath => z - 1,
        }
    }

    pub fn contains(self, from: i64, to: i64) -> bool {
        if from < 0 || to < 0 {
            return false;
        }
        to == from + 1
            || (from >= 1
                && match self {
                    EdgeKind::ChainWithResets => to == 0,
                    EdgeKind::BirthDeath => to == from - 1,
                })
    }

    /// Edges inside `{0..z_max}`, sorted. The forward edge out of `z_max` is
    /// absent.
    pub fn edges(self, z_max: usize) -> Vec<Edge> {
        let mut out: Vec<Edge> = (0..z_max)
            .map(|z| Edge::new(z, z + 1))
            .chain((1..=z_max).map(|z| Edge::new(z, self.backward_target(z))))
            .collect();
        out.sort();
        out
    }
}

/// Uniform rate constants of assumption A2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    Mm1 { lambda_f: f64, lambda_b: f64 },
    WlanConst { lambda_f: f64, lambda_b: f64 },
    WlanDecay { lambda_f: f64, lambda_b: f64 },
    /// Forward `(1 + kappa xi(0)) / (z + 1)`, reset `1 + kappa (1 - xi(0))`.
    InteractingWlan { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    kind: ModelKind,
    name: String,
}

fn positive_pair(lambda_f: f64, lambda_b: f64) -> Result<()> {
    if !(lambda_f > 0.0 && lambda_f.is_finite() && lambda_b > 0.0 && lambda_b.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "rates must be positive, got lambda_f={lambda_f}, lambda_b={lambda_b}"
        )));
    }
    Ok(())
}

pub fn mm1_model(lambda_f: f64, lambda_b: f64) -> Result<RateModel> {
    positive_pair(lambda_f, lambda_b)?;
    Ok(RateModel { kind: ModelKind::Mm1 { lambda_f, lambda_b }, name: format!("mm1({lambda_f},{lambda_b})") })
}

pub fn wlan_const_model(lambda_f: f64, lambda_b: f64) -> Result<RateModel> {
    positive_pair(lambda_f, lambda_b)?;
    Ok(RateModel {
        kind: ModelKind::WlanConst { lambda_f, lambda_b },
        name: format!("wlan_const({lambda_f},{lambda_b})"),
    })
}

pub fn wlan_decay_model(lambda_f: f64, lambda_b: f64) -> Result<RateModel> {
    positive_pair(lambda_f, lambda_b)?;
    Ok(RateModel {
        kind: ModelKind::WlanDecay { lambda_f, lambda_b },
        name: format!("wlan_decay({lambda_f},{lambda_b})"),
    })
}

pub fn interacting_wlan_model(kappa: f64) -> Result<RateModel> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidParameter(format!("kappa must lie in [0,1), got {kappa}")));
    }
    Ok(RateModel { kind: ModelKind::InteractingWlan { kappa }, name: format!("interacting_wlan({kappa})") })
}

/// Non-interacting chain with the maximal forward and minimal reset rates.
pub fn dominating_chain(model: &RateModel) -> Result<RateModel> {
    if model.edge_kind() != EdgeKind::ChainWithResets {
        return Err(Error::NotCompliant(format!("{} does not have reset edges", model.name)));
    }
    let b = model
        .bounds()
        .ok_or_else(|| Error::NotCompliant(format!("{} declares no rate bounds", model.name)))?;
    Ok(RateModel {
        kind: ModelKind::WlanDecay { lambda_f: b.upper, lambda_b: b.lower },
        name: format!("dominating({})", model.name),
    })
}

impl RateModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn edge_kind(&self) -> EdgeKind {
        match self.kind {
            ModelKind::Mm1 { .. } => EdgeKind::BirthDeath,
            _ => EdgeKind::ChainWithResets,
        }
    }

    pub fn interacting(&self) -> bool {
        matches!(self.kind, ModelKind::InteractingWlan { kappa } if kappa > 0.0)
    }

    /// A2 constants, declared only for models that satisfy A1 and A2.
    pub fn bounds(&self) -> Option<RateBounds> {
        match self.kind {
            ModelKind::WlanDecay { lambda_f, lambda_b } => Some(RateBounds {
                lower: lambda_f.min(lambda_b),
                upper: lambda_f.max(lambda_b),
            }),
            ModelKind::InteractingWlan { kappa } => Some(RateBounds { lower: 1.0, upper: 1.0 + kappa }),
            _ => None,
        }
    }

    /// Supremum of any single edge rate over states and fields.
    pub fn max_edge_rate(&self) -> f64 {
        match self.kind {
            ModelKind::Mm1 { lambda_f, lambda_b }
            | ModelKind::WlanConst { lambda_f, lambda_b }
            | ModelKind::WlanDecay { lambda_f, lambda_b } => lambda_f.max(lambda_b),
            ModelKind::InteractingWlan { kappa } => 1.0 + kappa,
        }
    }

    /// The scalar summary of `xi` that the rates depend on.
    pub fn field_of(&self, probs: &[f64]) -> f64 {
        probs.first().copied().unwrap_or(0.0)
    }

    pub fn forward_rate(&self, z: usize, field: f64) -> f64 {
        let zp1 = (z + 1) as f64;
        match self.kind {
            ModelKind::Mm1 { lambda_f, .. } | ModelKind::WlanConst { lambda_f, .. } => lambda_f,
            ModelKind::WlanDecay { lambda_f, .. } => lambda_f / zp1,
            ModelKind::InteractingWlan { kappa } => (1.0 + kappa * field) / zp1,
        }
    }

    /// Rate of the non-forward edge out of `z >= 1`.
    pub fn backward_rate(&self, field: f64) -> f64 {
        match self.kind {
            ModelKind::Mm1 { lambda_b, .. }
            | ModelKind::WlanConst { lambda_b, .. }
            | ModelKind::WlanDecay { lambda_b, .. } => lambda_b,
            ModelKind::InteractingWlan { kappa } => 1.0 + kappa * (1.0 - field),
        }
    }

    /// `lambda_{z,z'}(xi)`; errors for pairs outside the edge set.
    pub fn rate(&self, from: i64, to: i64, xi: &StateDistribution) -> Result<f64> {
        if !self.edge_kind().contains(from, to) {
            return Err(Error::EdgeNotPresent { from, to });
        }
        let field = self.field_of(xi.probs());
        Ok(if to == from + 1 {
            self.forward_rate(from as usize, field)
        } else {
            self.backward_rate(field)
        })
    }

    /// Rate table at a frozen field on `{0..z_max}`.
    pub fn frozen(&self, field: f64, z_max: usize) -> FrozenRates {
        let forward = (0..=z_max)
            .map(|z| if z < z_max { self.forward_rate(z, field) } else { 0.0 })
            .collect();
        let backward = (0..=z_max)
            .map(|z| if z >= 1 { self.backward_rate(field) } else { 0.0 })
            .collect();
        FrozenRates { kind: self.edge_kind(), forward, backward }
    }

    pub fn frozen_at(&self, xi: &[f64]) -> FrozenRates {
        self.frozen(self.field_of(xi), xi.len() - 1)
    }

    /// Closed-form stationary law where one exists (the two geometric cases).
    pub fn closed_form_stationary(&self, z_max: usize) -> Option<Result<StateDistribution>> {
        match self.kind {
            ModelKind::Mm1 { lambda_f, lambda_b } => Some(if lambda_f >= lambda_b {
                Err(Error::Instability(format!("lambda_f={lambda_f} >= lambda_b={lambda_b}")))
            } else {
                StateDistribution::geometric(lambda_f / lambda_b, z_max)
            }),
            ModelKind::WlanConst { lambda_f, lambda_b } => {
                Some(StateDistribution::geometric(lambda_f / (lambda_f + lambda_b), z_max))
            }
            _ => None,
        }
    }
}

/// Edge rates at a fixed field on `{0..z_max}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRates {
    pub kind: EdgeKind,
    /// `forward[z]` is the rate of `(z, z+1)`; zero at `z_max`.
    pub forward: Vec<f64>,
    /// `backward[z]` is the rate of the non-forward edge out of `z`; zero at 0.
    pub backward: Vec<f64>,
}

impl FrozenRates {
    pub fn z_max(&self) -> usize {
        self.forward.len() - 1
    }

    pub fn rate(&self, e: Edge) -> f64 {
        if e.is_forward() {
            self.forward[e.from]
        } else {
            self.backward[e.from]
        }
    }

    /// `Lambda^* phi`: net probability inflow per state.
    pub fn drift_into(&self, phi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let k = self.z_max();
        for z in 0..=k {
            let p = phi[z];
            if p == 0.0 {
                continue;
            }
            let f = self.forward[z] * p;
            let b = self.backward[z] * p;
            out[z] -= f + b;
            if z < k {
                out[z + 1] += f;
            }
            if z >= 1 {
                out[self.kind.backward_target(z)] += b;
            }
        }
    }

    pub fn drift(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; phi.len()];
        self.drift_into(phi, &mut out);
        out
    }

    /// Stationary law of the frozen single-particle chain with reflecting
    /// closure at `z_max`.
    ///
    /// Pinning `pi(0) = 1` in place of the normalization row leaves a system
    /// that is lower bidiagonal (resets) or, after summing rows `0..z`, a
    /// one-step cut balance (birth-death); both are solved by substitution.
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.z_max();
        let mut pi = vec![0.0; k + 1];
        pi[0] = 1.0;
        for z in 1..=k {
            pi[z] = match self.kind {
                EdgeKind::ChainWithResets => pi[z - 1] * self.forward[z - 1] / (self.forward[z] + self.backward[z]),
                EdgeKind::BirthDeath => pi[z - 1] * self.forward[z - 1] / self.backward[z],
            };
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        pi
    }
}

/// Stationary law of a non-interacting model on `{0..z_max}`.
pub fn single_particle_stationary(model: &RateModel, z_max: usize) -> Result<StateDistribution> {
    if model.interacting() {
        return Err(Error::InteractingModel(format!(
            "{} has no field-free stationary law; freeze the field first",
            model.name()
        )));
    }
    if z_max == 0 {
        return Err(Error::InvalidParameter("z_max must be positive".into()));
    }
    if let ModelKind::Mm1 { lambda_f, lambda_b } = model.kind() {
        if lambda_f >= lambda_b {
            return Err(Error::Instability(format!("lambda_f={lambda_f} >= lambda_b={lambda_b}")));
        }
    }
    StateDistribution::new(model.frozen(0.0, z_max).stationary())
}

/// Stationary law of the single-particle chain at a frozen field.
pub fn frozen_stationary(model: &RateModel, field: f64, z_max: usize) -> Result<StateDistribution> {
    StateDistribution::new(model.frozen(field, z_max).stationary())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A2Violation {
    pub sample: usize,
    pub edge: Edge,
    pub rate: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A2Report {
    pub passed: bool,
    pub bounds: Option<RateBounds>,
    pub reason: Option<String>,
    pub first_violation: Option<A2Violation>,
}

/// Checks the A2 sandwich on every state of every sample. Models without
/// declared constants are tested against the constants their rates at state 0
/// would suggest.
pub fn verify_a2(model: &RateModel, samples: &[StateDistribution]) -> A2Report {
    if model.edge_kind() != EdgeKind::ChainWithResets {
        return A2Report {
            passed: false,
            bounds: None,
            reason: Some("edge set is not the chain with resets".into()),
            first_violation: None,
        };
    }
    let bounds = model.bounds().unwrap_or_else(|| {
        let f0 = model.forward_rate(0, 0.0);
        let r = model.backward_rate(0.0);
        RateBounds { lower: f0.min(r), upper: f0.max(r) }
    });
    let tol = 1e-12;
    for (i, xi) in samples.iter().enumerate() {
        let field = model.field_of(xi.probs());
        for z in 0..=xi.z_max() {
            let zp1 = (z + 1) as f64;
            let f = model.forward_rate(z, field);
            let (lo, hi) = (bounds.lower / zp1, bounds.upper / zp1);
            if f < lo * (1.0 - tol) || f > hi * (1.0 + tol) {
                return A2Report {
                    passed: false,
                    bounds: Some(bounds),
                    reason: Some("forward rate outside [lower/(z+1), upper/(z+1)]".into()),
                    first_violation: Some(A2Violation {
                        sample: i,
                        edge: Edge::new(z, z + 1),
                        rate: f,
                        bound: if f > hi { hi } else { lo },
                    }),
                };
            }
            if z >= 1 {
                let r = model.backward_rate(field);
                if r < bounds.lower * (1.0 - tol) || r > bounds.upper * (1.0 + tol) {
                    return A2Report {
                        passed: false,
                        bounds: Some(bounds),
                        reason: Some("reset rate outside [lower, upper]".into()),
                        first_violation: Some(A2Violation {
                            sample: i,
                            edge: Edge::new(z, 0),
                            rate: r,
                            bound: if r > bounds.upper { bounds.upper } else { bounds.lower },
                        }),
                    };
                }
            }
        }
    }
    A2Report { passed: true, bounds: Some(bounds), reason: None, first_violation: None }
}

/// Random distribution on `{0..z_max}` with exponential weights.
pub(crate) fn random_distribution<R: Rng>(rng: &mut R, z_max: usize) -> StateDistribution {
    let w: Vec<f64> = (0..=z_max).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    StateDistribution::from_weights(&w).expect("positive weights")
}

/// Empirical lower estimate of the A3 constant: the largest observed ratio of
/// scaled rate differences to TV distance over random pairs.
pub fn lipschitz_estimate(model: &RateModel, trials: usize, rng_seed: u64) -> f64 {
    const Z_MAX: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best = 0.0f64;
    for t in 0..trials {
        let xi = random_distribution(&mut rng, Z_MAX);
        let zeta = if t % 2 == 0 {
            random_distribution(&mut rng, Z_MAX)
        } else {
            // Shift mass between state 0 and another state.
            let k = rng.gen_range(1..=Z_MAX);
            let mut p = xi.probs().to_vec();
            let amount = rng.gen::<f64>() * p[k];
            p[k] -= amount;
            p[0] += amount;
            StateDistribution::from_weights(&p).expect("valid shift")
        };
        let d = tv_distance(&xi, &zeta).expect("same truncation");
        if d <= 1e-12 {
            continue;
        }
        let (fx, fz) = (model.field_of(xi.probs()), model.field_of(zeta.probs()));
        for z in 0..=Z_MAX {
            let df = ((z + 1) as f64 * (model.forward_rate(z, fx) - model.forward_rate(z, fz))).abs();
            best = best.max(df / d);
        }
        let dr = (model.backward_rate(fx) - model.backward_rate(fz)).abs();
        best = best.max(dr / d);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn delta(z: usize) -> StateDistribution {
        StateDistribution::point_mass(z, 10).unwrap()
    }

    #[test]
    fn mm1_rates() {
        let m = mm1_model(1.0, 2.0).unwrap();
        assert_eq!(m.rate(0, 1, &delta(0)).unwrap(), 1.0);
        assert_eq!(m.rate(3, 2, &delta(0)).unwrap(), 2.0);
        assert!(matches!(m.rate(0, -1, &delta(0)), Err(Error::EdgeNotPresent { .. })));
        assert!(mm1_model(0.0, 1.0).is_err());
    }

    #[test]
    fn wlan_rates() {
        let w = wlan_const_model(1.0, 1.0).unwrap();
        assert_eq!(w.rate(5, 6, &delta(0)).unwrap(), 1.0);
        assert_eq!(w.rate(5, 0, &delta(0)).unwrap(), 1.0);
        assert!(w.rate(0, 0, &delta(0)).is_err());
        let d = wlan_decay_model(2.0, 1.0).unwrap();
        assert_eq!(d.rate(3, 4, &delta(0)).unwrap(), 0.5);
        assert_eq!(wlan_decay_model(1.0, 1.0).unwrap().rate(0, 1, &delta(0)).unwrap(), 1.0);
    }

    #[test]
    fn interacting_rates() {
        let m = interacting_wlan_model(0.5).unwrap();
        assert_eq!(m.rate(0, 1, &delta(0)).unwrap(), 1.5);
        assert_eq!(m.rate(2, 0, &delta(5)).unwrap(), 1.5);
        assert!(interacting_wlan_model(1.0).is_err());
        assert!(interacting_wlan_model(-0.1).is_err());
        let zero = interacting_wlan_model(0.0).unwrap();
        let plain = wlan_decay_model(1.0, 1.0).unwrap();
        for z in 0..10 {
            for f in [0.0, 0.3, 1.0] {
                assert_eq!(zero.forward_rate(z, f), plain.forward_rate(z, f));
                assert_eq!(zero.backward_rate(f), plain.backward_rate(f));
            }
        }
        assert!(!zero.interacting());
    }

    #[test]
    fn dominating_chain_reads_bounds() {
        let d = dominating_chain(&interacting_wlan_model(0.5).unwrap()).unwrap();
        assert_eq!(d.forward_rate(2, 0.7), 0.5);
        assert_eq!(d.backward_rate(0.7), 1.0);
        let w = wlan_decay_model(1.0, 1.0).unwrap();
        assert_eq!(dominating_chain(&w).unwrap().kind(), w.kind());
        assert!(dominating_chain(&mm1_model(1.0, 2.0).unwrap()).is_err());
        assert!(dominating_chain(&wlan_const_model(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn edge_enumeration() {
        let e = EdgeKind::BirthDeath.edges(3);
        assert_eq!(e.len(), 6);
        assert!(e.contains(&Edge::new(3, 2)));
        assert!(!e.contains(&Edge::new(3, 4)));
        let r = EdgeKind::ChainWithResets.edges(3);
        assert_eq!(r.len(), 6);
        assert!(r.contains(&Edge::new(1, 0)));
        let mut dedup = r.clone();
        dedup.dedup();
        assert_eq!(dedup, r);
    }

    #[test]
    fn closed_forms_match_solver() {
        for (m, rho) in [
            (mm1_model(1.0, 2.0).unwrap(), 0.5f64),
            (mm1_model(1.0, 3.0).unwrap(), 1.0 / 3.0),
            (wlan_const_model(1.0, 1.0).unwrap(), 0.5),
            (wlan_const_model(2.0, 1.0).unwrap(), 2.0 / 3.0),
        ] {
            let z_max = 60;
            let pi = single_particle_stationary(&m, z_max).unwrap();
            // Birth-death: geometric renormalized on the truncation. Resets:
            // geometric with the tail folded into the top state.
            let folded = m.edge_kind() == EdgeKind::ChainWithResets;
            let norm = if folded { 1.0 } else { 1.0 - rho.powi(z_max as i32 + 1) };
            for z in 0..=z_max {
                let exact = if folded && z == z_max {
                    rho.powi(z as i32)
                } else {
                    (1.0 - rho) * rho.powi(z as i32) / norm
                };
                assert_abs_diff_eq!(pi.prob(z), exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mm1_unstable_rejected() {
        let m = mm1_model(2.0, 1.0).unwrap();
        assert!(matches!(single_particle_stationary(&m, 20), Err(Error::Instability(_))));
    }

    #[test]
    fn stationarity_residual() {
        for m in [
            mm1_model(1.0, 2.0).unwrap(),
            wlan_const_model(1.0, 1.0).unwrap(),
            wlan_decay_model(1.0, 1.0).unwrap(),
            wlan_decay_model(2.0, 0.5).unwrap(),
        ] {
            let pi = single_particle_stationary(&m, 40).unwrap();
            let d = m.frozen(0.0, 40).drift(pi.probs());
            assert!(d.iter().map(|x| x.abs()).sum::<f64>() < 1e-10, "{}", m.name());
        }
    }

    #[test]
    fn factorial_decay_bound() {
        let m = wlan_decay_model(1.0, 1.0).unwrap();
        let b = m.bounds().unwrap();
        let pi = single_particle_stationary(&m, 40).unwrap();
        let mut fact = 1.0;
        for z in 0..=40 {
            if z > 0 {
                fact *= z as f64;
            }
            let bound = pi.prob(0) * (b.upper / b.lower).powi(z as i32) / fact;
            assert!(pi.prob(z) <= bound * (1.0 + 1e-12), "z={z}");
        }
    }

    #[test]
    fn a2_verification() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..100).map(|_| random_distribution(&mut rng, 15)).collect();
        assert!(verify_a2(&interacting_wlan_model(0.5).unwrap(), &samples).passed);
        assert!(verify_a2(&wlan_decay_model(1.0, 1.0).unwrap(), &samples).passed);
        let bad = verify_a2(&wlan_const_model(1.0, 1.0).unwrap(), &samples);
        assert!(!bad.passed);
        assert_eq!(bad.first_violation.unwrap().edge, Edge::new(1, 2));
        assert!(!verify_a2(&mm1_model(1.0, 2.0).unwrap(), &samples).passed);
    }

    #[test]
    fn lipschitz_estimates() {
        assert_eq!(lipschitz_estimate(&wlan_const_model(1.0, 1.0).unwrap(), 200, 1), 0.0);
        assert_eq!(lipschitz_estimate(&interacting_wlan_model(0.0).unwrap(), 200, 1), 0.0);
        let l = lipschitz_estimate(&interacting_wlan_model(0.5).unwrap(), 2000, 1);
        assert!(l > 0.3 && l <= 1.0 + 1e-12, "{l}");
    }
}
