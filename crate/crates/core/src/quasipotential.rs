//! Constructive upper bounds on the quasipotential, test-function lower
//! bounds, and the finiteness predicate.
//!
//! Every trajectory here is assembled from unit-speed moves along single
//! edges, so its cost is available in closed form from [`crate::cost`].

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::cost::{
    concatenate, cost_nonvariational, knot_values, segment_cost_from, testfunction_lower_bound, FluxTrajectory,
    Segment, TestFunction,
};
use crate::error::{Error, Result};
use crate::extended::ExtReal;
use crate::io::fmt_real;
use crate::mckean_vlasov::{find_equilibrium, flow_into_kdelta, KDeltaSearch};
use crate::measures::{relative_entropy, theta, theta_moment, tv_distance, StateDistribution};
use crate::models::{Edge, EdgeKind, RateBounds, RateModel};

/// Tolerance used when finding the equilibrium for a bound.
pub const EQUILIBRIUM_TOL: f64 = 1e-13;

fn require_a1(model: &RateModel) -> Result<()> {
    if model.edge_kind() != EdgeKind::ChainWithResets {
        return Err(Error::NotCompliant(format!("{} does not have reset edges", model.name())));
    }
    Ok(())
}

fn require_bounds(model: &RateModel) -> Result<RateBounds> {
    model
        .bounds()
        .ok_or_else(|| Error::NotCompliant(format!("{} declares no A2 constants", model.name())))
}

/// Accumulates unit-speed moves on a running copy of the path state.
struct Builder {
    traj: FluxTrajectory,
    phi: Vec<f64>,
}

impl Builder {
    fn new(start: &StateDistribution) -> Self {
        let traj = FluxTrajectory::new(start.clone());
        let phi = traj.initial().probs().to_vec();
        Self { traj, phi }
    }

    /// Moves `mass` along `edge` at unit speed.
    fn step(&mut self, edge: Edge, mass: f64) -> Result<()> {
        if mass <= 0.0 {
            return Ok(());
        }
        self.phi[edge.from] -= mass;
        self.phi[edge.to] += mass;
        if self.phi[edge.from] < -1e-12 {
            return Err(Error::PhaseOrdering(format!(
                "state {} would hold {:e} after moving {mass:e}",
                edge.from, self.phi[edge.from]
            )));
        }
        self.phi[edge.from] = self.phi[edge.from].max(0.0);
        self.traj.push(Segment::unit_move(edge, mass)?)
    }

    /// Carries `mass` from `lo` up to `hi` one forward edge at a time.
    fn climb(&mut self, lo: usize, hi: usize, mass: f64) -> Result<()> {
        for k in lo + 1..=hi {
            self.step(Edge::new(k - 1, k), mass)?;
        }
        Ok(())
    }

    fn reset(&mut self, z: usize, mass: f64) -> Result<()> {
        self.step(Edge::new(z, 0), mass)
    }
}

/// From `delta_0`, for `z` descending, carries `xi(z)` from 0 to `z` in `z`
/// unit-speed steps. Duration `sum z xi(z)`.
pub fn construct_delta0_to_target(model: &RateModel, xi: &StateDistribution) -> Result<FluxTrajectory> {
    require_a1(model)?;
    let xi = xi.without_tail();
    let mut b = Builder::new(&StateDistribution::point_mass(0, xi.z_max())?);
    for z in (1..=xi.z_max()).rev() {
        b.climb(0, z, xi.prob(z))?;
    }
    Ok(b.traj)
}

/// From `xi_star`, sends each `xi_star(z)`, `z >= 1`, to 0 along its reset
/// edge at unit speed.
pub fn construct_equilibrium_to_delta0(model: &RateModel, xi_star: &StateDistribution) -> Result<FluxTrajectory> {
    require_a1(model)?;
    let xi_star = xi_star.without_tail();
    let mut b = Builder::new(&xi_star);
    for z in 1..=xi_star.z_max() {
        b.reset(z, xi_star.prob(z))?;
    }
    Ok(b.traj)
}

fn tail_theta(d: &StateDistribution, z0: usize) -> f64 {
    d.probs().iter().enumerate().skip(z0 + 1).map(|(z, p)| theta(z) * p).sum()
}

/// Smallest `z0` at which both tails carry theta-mass below `0.1 tol`.
pub fn auto_z0(from: &StateDistribution, to: &StateDistribution, tol: f64) -> usize {
    (0..=to.z_max())
        .find(|&z0| tail_theta(from, z0) < 0.1 * tol && tail_theta(to, z0) < 0.1 * tol)
        .unwrap_or(to.z_max())
}

/// Scale used by [`connector_auto`]: the theta-gap plus the TV distance.
pub fn connection_scale(from: &StateDistribution, to: &StateDistribution) -> Result<f64> {
    let gap = (theta_moment(from).expect_finite("finite truncation")
        - theta_moment(to).expect_finite("finite truncation"))
    .abs();
    Ok(gap + tv_distance(from, to)?)
}

/// Five-phase connection from `from` to `to` with cutoff `z0`:
/// sweep the tail of `from` above `z0` to 0; if state 0 then holds less than
/// the target tail mass, pull the difference down from `z0, z0-1, ...`;
/// carry the target tail mass up to `z0 + 1`; spread it over the tail;
/// finally send surpluses in `1..=z0` to 0 and lift deficits from 0.
pub fn connector(model: &RateModel, from: &StateDistribution, to: &StateDistribution, z0: usize) -> Result<FluxTrajectory> {
    require_a1(model)?;
    let (from, to) = (from.without_tail(), to.without_tail());
    if from.z_max() != to.z_max() {
        return Err(Error::TruncationMismatch { left: from.z_max(), right: to.z_max() });
    }
    let k = to.z_max();
    let mut b = Builder::new(&from);
    if tv_distance(&from, &to)? == 0.0 {
        return Ok(b.traj);
    }
    let z0 = z0.min(k);

    for z in z0 + 1..=k {
        b.reset(z, from.prob(z))?;
    }

    let eps: f64 = (z0 + 1..=k).map(|z| to.prob(z)).sum();
    let mut extra = eps - b.phi[0];
    let mut z = z0;
    while extra > 0.0 && z >= 1 {
        let m = b.phi[z].min(extra);
        b.reset(z, m)?;
        extra -= m;
        z -= 1;
    }

    if eps > 0.0 {
        b.climb(0, z0 + 1, eps)?;
        for z in (z0 + 2..=k).rev() {
            b.climb(z0 + 1, z, to.prob(z))?;
        }
    }

    let snapshot = b.phi.clone();
    for z in 1..=z0 {
        let surplus = snapshot[z] - to.prob(z);
        if surplus > 0.0 {
            b.reset(z, surplus)?;
        }
    }
    for z in (1..=z0).rev() {
        let deficit = to.prob(z) - snapshot[z];
        if deficit > 0.0 {
            b.climb(0, z, deficit)?;
        }
    }
    Ok(b.traj)
}

/// [`connector`] with `z0` from [`auto_z0`] at the [`connection_scale`].
pub fn connector_auto(model: &RateModel, from: &StateDistribution, to: &StateDistribution) -> Result<FluxTrajectory> {
    let scale = connection_scale(from, to)?;
    connector(model, from, to, auto_z0(from, to, scale))
}

/// Piecewise-constant fluxes tracking the limiting flow from `nu` for time
/// `t`: each step of length at most `dt` carries the drift fluxes at its
/// predicted midpoint.
pub fn follow_flow(model: &RateModel, nu: &StateDistribution, t: f64, dt: f64) -> Result<FluxTrajectory> {
    let nu = nu.without_tail();
    let mut traj = FluxTrajectory::new(nu.clone());
    if t <= 0.0 {
        return Ok(traj);
    }
    let k = nu.z_max();
    let edges = model.edge_kind().edges(k);
    let steps = (t / dt).ceil() as usize;
    let h = t / steps as f64;
    let mut phi = nu.probs().to_vec();
    for _ in 0..steps {
        let drift = model.frozen_at(&phi).drift(&phi);
        let mid: Vec<f64> = phi.iter().zip(&drift).map(|(p, d)| (p + 0.5 * h * d).max(0.0)).collect();
        let rates = model.frozen_at(&mid);
        let seg = Segment::new(h, edges.iter().map(|e| (*e, rates.rate(*e) * mid[e.from])))?;
        let v = seg.velocity(k);
        phi.iter_mut().zip(&v).for_each(|(p, v)| *p = (*p + h * v).max(0.0));
        traj.push(seg)?;
    }
    Ok(traj)
}

/// Step length used by [`descend_to_equilibrium`] for the flow phase.
pub const FLOW_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Descent {
    pub trajectory: FluxTrajectory,
    /// Time at which the flow entered `K(delta)`.
    pub entry_time: f64,
    pub flow_cost: ExtReal,
    pub connector_cost: ExtReal,
}

/// Follows the flow from `nu` into `K(delta)`, then connects to `xi_star`.
pub fn descend_to_equilibrium(model: &RateModel, nu: &StateDistribution, delta: f64) -> Result<Descent> {
    require_a1(model)?;
    let xi_star = find_equilibrium(model, nu.z_max(), EQUILIBRIUM_TOL)?;
    let search = KDeltaSearch::for_model(model);
    let (entry_time, _) =
        flow_into_kdelta(model, nu, &xi_star, delta, &search)?.ok_or(Error::HorizonExceeded(search.horizon))?;
    let flow = follow_flow(model, nu, entry_time, FLOW_STEP)?;
    let link = connector_auto(model, &flow.terminal()?, &xi_star)?;
    let flow_cost = cost_nonvariational(model, &flow)?;
    let connector_cost = cost_nonvariational(model, &link)?;
    Ok(Descent { trajectory: concatenate(&flow, &link)?, entry_time, flow_cost, connector_cost })
}

/// Explicit bound for the path `xi_star -> delta_0 -> xi`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CmBound {
    pub delta0_leg: f64,
    pub equilibrium_leg: f64,
}

impl CmBound {
    pub fn total(&self) -> f64 {
        self.delta0_leg + self.equilibrium_leg
    }
}

/// Bound on the cost of [`construct_delta0_to_target`] for `xi` plus the
/// bound on [`construct_equilibrium_to_delta0`] for `xi_star`.
pub fn cm_bound_parts(model: &RateModel, xi: &StateDistribution, xi_star: &StateDistribution) -> Result<CmBound> {
    require_a1(model)?;
    let RateBounds { lower, upper } = require_bounds(model)?;
    let per_unit = (1.0 / lower).ln() + 2.0 * upper;
    let mut series = 0.0;
    let mut linear = 0.0;
    let mut mean = 0.0;
    for (z, &p) in xi.probs().iter().enumerate().skip(1) {
        if p <= 0.0 {
            continue;
        }
        let zf = z as f64;
        series += zf.ln() / (zf * zf) + theta(z) * p;
        linear += (theta(z) + zf) * p + zf * p * per_unit;
        mean += zf * p;
    }
    let delta0_leg = (-1.0f64).exp() + 3.0 * series + linear + 2.0 * upper * mean;
    let equilibrium_leg = xi_star
        .probs()
        .iter()
        .skip(1)
        .filter(|p| **p > 0.0)
        .map(|&p| p * (1.0 / p).ln() + p * per_unit)
        .sum();
    Ok(CmBound { delta0_leg, equilibrium_leg })
}

pub fn cm_bound(model: &RateModel, xi: &StateDistribution) -> Result<f64> {
    let xi_star = find_equilibrium(model, xi.z_max(), EQUILIBRIUM_TOL)?;
    Ok(cm_bound_parts(model, xi, &xi_star)?.total())
}

/// Parameters of the best test-function bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerParams {
    pub horizon: f64,
    pub n: usize,
    pub kind: TestFunction,
}

/// Upper and lower bounds on the quasipotential at `target`. `lower` bounds
/// the cost of trajectories with horizon at most `lower_params.horizon`,
/// which is the horizon of the witness.
#[derive(Debug, Clone)]
pub struct VBound {
    pub target: StateDistribution,
    pub upper: ExtReal,
    pub lower: f64,
    pub witness: FluxTrajectory,
    pub lower_params: LowerParams,
}

impl VBound {
    pub const LABEL: &'static str = "upper bound (unverified gap)";

    /// Writes `<stem>_target.csv`, `<stem>_witness.txt` and `<stem>.json`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        let target_file = format!("{stem}_target.csv");
        let witness_file = format!("{stem}_witness.txt");
        fs::write(dir.join(&target_file), self.target.to_csv())?;
        fs::write(dir.join(&witness_file), self.witness.to_text())?;
        let json = serde_json::json!({
            "target_file": target_file,
            "upper": match self.upper { ExtReal::Finite(x) => fmt_real(x), ExtReal::Infinite => "inf".into() },
            "upper_label": Self::LABEL,
            "lower": fmt_real(self.lower),
            "witness_file": witness_file,
            "lower_params": {
                "T": fmt_real(self.lower_params.horizon),
                "n": self.lower_params.n,
                "kind": self.lower_params.kind.as_str(),
            },
        });
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&json).expect("plain json"))?;
        Ok(())
    }
}

/// Best test-function bound from `start` to `target` over all tent orders
/// up to the truncation and both kinds.
pub fn best_lower_bound(
    model: &RateModel,
    start: &StateDistribution,
    target: &StateDistribution,
    horizon: f64,
) -> (f64, LowerParams) {
    let mut best = (f64::NEG_INFINITY, LowerParams { horizon, n: 1, kind: TestFunction::LinearFn });
    for kind in [TestFunction::LinearFn, TestFunction::ThetaN] {
        for n in 1..=target.z_max().max(1) {
            let b = testfunction_lower_bound(model, start, target, horizon, n, kind);
            if b > best.0 {
                best = (b, LowerParams { horizon, n, kind });
            }
        }
    }
    best
}

/// Rounds of multiplicative search per segment.
pub const REFINE_ROUNDS: usize = 200;

/// Rescales each segment's speed to lower its cost; the knots, and so the
/// endpoints, are unchanged. Never increases the cost.
pub fn refine(model: &RateModel, traj: &FluxTrajectory) -> Result<FluxTrajectory> {
    let knots = knot_values(traj)?;
    let mut segments = Vec::with_capacity(traj.segments().len());
    for (seg, start) in traj.segments().iter().zip(&knots) {
        let mut best = seg.clone();
        let Some(mut best_cost) = segment_cost_from(model, start, seg).finite() else {
            segments.push(best);
            continue;
        };
        let mut step = 2.0f64;
        for _ in 0..REFINE_ROUNDS {
            let mut improved = false;
            for c in [step, 1.0 / step] {
                let trial = best.scaled(c);
                if let Some(cost) = segment_cost_from(model, start, &trial).finite() {
                    if cost < best_cost {
                        best = trial;
                        best_cost = cost;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step = step.sqrt();
                if step < 1.0 + 1e-9 {
                    break;
                }
            }
        }
        segments.push(best);
    }
    FluxTrajectory::with_segments(traj.initial().clone(), segments)
}

/// Cheapest of the glued path through `delta_0` and the direct connector from
/// the equilibrium, optionally refined, with the test-function lower bound at
/// the witness horizon.
pub fn v_upper_bound(model: &RateModel, xi: &StateDistribution, refine_witness: bool) -> Result<VBound> {
    require_a1(model)?;
    let target = xi.without_tail();
    let xi_star = find_equilibrium(model, target.z_max(), EQUILIBRIUM_TOL)?;
    let glued = concatenate(
        &construct_equilibrium_to_delta0(model, &xi_star)?,
        &construct_delta0_to_target(model, &target)?,
    )?;
    let mut candidates = vec![glued, connector_auto(model, &xi_star, &target)?];
    if refine_witness {
        let refined = candidates.iter().map(|c| refine(model, c)).collect::<Result<Vec<_>>>()?;
        candidates.extend(refined);
    }
    let mut best: Option<(ExtReal, FluxTrajectory)> = None;
    for c in candidates {
        let cost = cost_nonvariational(model, &c)?;
        if best.as_ref().map_or(true, |(b, _)| !b.le(cost)) {
            best = Some((cost, c));
        }
    }
    let (upper, witness) = best.expect("two candidates");
    let (lower, lower_params) = best_lower_bound(model, &xi_star, &target, witness.duration());
    Ok(VBound { target, upper, lower, witness, lower_params })
}

/// Declared tail behaviour of an analytically given distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailProfile {
    Geometric { ratio: f64 },
    /// Tail proportional to `z^-a (log z)^-b`.
    PowerLog { a: f64, b: f64 },
    PointMass { z: usize },
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Finiteness {
    Finite,
    Infinite,
}

/// Whether the theta-moment of the profile converges.
pub fn theta_moment_converges(profile: TailProfile) -> Result<bool> {
    match profile {
        TailProfile::Geometric { ratio } if ratio > 0.0 && ratio < 1.0 => Ok(true),
        TailProfile::Geometric { ratio } => Err(Error::InvalidParameter(format!("geometric ratio {ratio}"))),
        TailProfile::PointMass { .. } => Ok(true),
        TailProfile::PowerLog { a, b } => {
            if a < 1.0 || (a == 1.0 && b <= 1.0) {
                return Err(Error::InvalidParameter(format!("z^-{a} log^-{b} z is not summable")));
            }
            // z log z * z^-a log^-b z = z^(1-a) log^(1-b) z.
            Ok(a > 2.0 || (a == 2.0 && b > 2.0))
        }
        TailProfile::Unknown => Err(Error::UndecidableProfile),
    }
}

/// Finite iff the theta-moment converges, for models with reset edges and A2
/// constants. For the two constant-rate systems an infinite theta-moment
/// forces an infinite quasipotential, but a finite one decides nothing.
pub fn v_finiteness_predicate(model: &RateModel, profile: TailProfile) -> Result<Finiteness> {
    let converges = theta_moment_converges(profile)?;
    let compliant = model.edge_kind() == EdgeKind::ChainWithResets && model.bounds().is_some();
    match (compliant, converges) {
        (_, false) => Ok(Finiteness::Infinite),
        (true, true) => Ok(Finiteness::Finite),
        (false, true) => Err(Error::NotCompliant(format!(
            "{}: finiteness inside the theta-moment class is not characterised",
            model.name()
        ))),
    }
}

/// `xi(z)` proportional to `1 / (z^2 log^2 z)` for `2 <= z <= k`.
pub fn heavy_tail_target(k: usize) -> Result<StateDistribution> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("truncation {k} < 2")));
    }
    let w: Vec<f64> = (0..=k)
        .map(|z| {
            if z < 2 {
                0.0
            } else {
                let (zf, l) = (z as f64, (z as f64).ln());
                1.0 / (zf * zf * l * l)
            }
        })
        .collect();
    StateDistribution::from_weights(&w)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridBound {
    pub horizon: f64,
    pub kind: TestFunction,
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleRow {
    pub k: usize,
    pub entropy: ExtReal,
    pub theta_moment: f64,
    /// Best bound per horizon and test-function kind.
    pub bounds: Vec<GridBound>,
}

impl CounterexampleRow {
    pub fn best(&self, horizon: f64, kind: TestFunction) -> Option<&GridBound> {
        self.bounds.iter().find(|b| b.horizon == horizon && b.kind == kind)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    pub model: String,
    pub rows: Vec<CounterexampleRow>,
    /// Change in the best theta_n bound at the first horizon between the
    /// smallest and the largest truncation.
    pub lower_bound_growth: f64,
    /// Ratio of those two bounds when the smaller one is positive.
    pub divergence_ratio: Option<f64>,
    /// Entropy change between the last two truncations.
    pub entropy_change: f64,
}

/// Entropy against the equilibrium and test-function lower bounds for the
/// heavy-tailed targets truncated at each `k`.
pub fn counterexample_report(model: &RateModel, k_list: &[usize], horizons: &[f64]) -> Result<CounterexampleReport> {
    if model.closed_form_stationary(2).is_none() {
        return Err(Error::InvalidParameter(format!("{} is not one of the constant-rate systems", model.name())));
    }
    if k_list.is_empty() || horizons.is_empty() {
        return Err(Error::InvalidParameter("empty truncation or horizon list".into()));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let xi_star = model.closed_form_stationary(k).expect("checked above")?;
        let target = heavy_tail_target(k)?;
        let mut bounds = Vec::new();
        for &t in horizons {
            for kind in [TestFunction::LinearFn, TestFunction::ThetaN] {
                let (n, value) = (1..=k)
                    .map(|n| (n, testfunction_lower_bound(model, &xi_star, &target, t, n, kind)))
                    .fold((1, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                bounds.push(GridBound { horizon: t, kind, n, value });
            }
        }
        rows.push(CounterexampleRow {
            k,
            entropy: relative_entropy(&target, &xi_star)?,
            theta_moment: theta_moment(&target).expect_finite("finite truncation"),
            bounds,
        });
    }
    let theta_at = |r: &CounterexampleRow| r.best(horizons[0], TestFunction::ThetaN).map_or(f64::NAN, |b| b.value);
    let (first, last) = (&rows[0], rows.last().unwrap());
    let (lo, hi) = (theta_at(first), theta_at(last));
    let entropy_change = if rows.len() >= 2 {
        (rows[rows.len() - 1].entropy.to_f64() - rows[rows.len() - 2].entropy.to_f64()).abs()
    } else {
        0.0
    };
    Ok(CounterexampleReport {
        model: model.name().to_string(),
        lower_bound_growth: hi - lo,
        divergence_ratio: (lo > 0.0).then(|| hi / lo),
        entropy_change,
        rows,
    })
}
