//! The action functional: Poisson cost pair, flux trajectories, the control
//! form evaluated in closed form segment by segment, the dual form evaluated
//! by concave maximization on a grid, flux recovery, and test-function lower
//! bounds.

use std::collections::BTreeMap;
use std::f64::consts::E;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended::ExtReal;
use crate::io::{content_lines, fmt_real, parse_index, parse_real};
use crate::measures::{first_moment, theta, theta_moment, tv_distance, StateDistribution};
use crate::models::{Edge, EdgeKind, FrozenRates, RateModel};
use crate::path::TimePath;

/// Negative mass tolerated at segment endpoints.
pub const NEG_TOL: f64 = 1e-12;
/// Target bias per segment from freezing field-dependent rates.
pub const FREEZE_TOL: f64 = 1e-7;
/// Stopping threshold on the dual gradient.
pub const GRAD_TOL: f64 = 1e-10;

/// `e^u - u - 1`.
pub fn tau(u: f64) -> f64 {
    u.exp_m1() - u
}

/// Legendre dual of [`tau`].
pub fn tau_star(u: f64) -> ExtReal {
    if u < -1.0 {
        ExtReal::Infinite
    } else if u == -1.0 {
        ExtReal::Finite(1.0)
    } else {
        ExtReal::Finite((u + 1.0) * u.ln_1p() - u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub fluxes: BTreeMap<Edge, f64>,
}

impl Segment {
    pub fn new(duration: f64, fluxes: impl IntoIterator<Item = (Edge, f64)>) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InfeasibleTrajectory(format!("segment duration {duration}")));
        }
        let mut map = BTreeMap::new();
        for (e, f) in fluxes {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::InfeasibleTrajectory(format!("flux {f} on {e:?}")));
            }
            if f > 0.0 {
                *map.entry(e).or_insert(0.0) += f;
            }
        }
        Ok(Self { duration, fluxes: map })
    }

    /// Single-edge segment moving `mass` at unit speed.
    pub fn unit_move(edge: Edge, mass: f64) -> Result<Self> {
        Self::new(mass, [(edge, 1.0)])
    }

    /// `phi'` induced on `{0..z_max}`.
    pub fn velocity(&self, z_max: usize) -> Vec<f64> {
        let mut v = vec![0.0; z_max + 1];
        for (e, f) in &self.fluxes {
            v[e.from] -= f;
            v[e.to] += f;
        }
        v
    }

    /// Same displacement at `c` times the speed.
    pub fn scaled(&self, c: f64) -> Segment {
        Segment {
            duration: self.duration / c,
            fluxes: self.fluxes.iter().map(|(e, f)| (*e, f * c)).collect(),
        }
    }
}

/// Piecewise-constant per-edge flux plan started from `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxTrajectory {
    initial: StateDistribution,
    segments: Vec<Segment>,
}

impl FluxTrajectory {
    pub fn new(initial: StateDistribution) -> Self {
        Self { initial: initial.without_tail(), segments: Vec::new() }
    }

    pub fn with_segments(initial: StateDistribution, segments: Vec<Segment>) -> Result<Self> {
        let mut t = Self::new(initial);
        for s in segments {
            t.push(s)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, seg: Segment) -> Result<()> {
        let k = self.z_max();
        if let Some(e) = seg.fluxes.keys().find(|e| e.from > k || e.to > k) {
            return Err(Error::InfeasibleTrajectory(format!("edge {e:?} leaves the truncation")));
        }
        self.segments.push(seg);
        Ok(())
    }

    pub fn initial(&self) -> &StateDistribution {
        &self.initial
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn z_max(&self) -> usize {
        self.initial.z_max()
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Raw knot values; the entries may carry rounding-level negatives.
    fn knots(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut phi = self.initial.probs().to_vec();
        out.push(phi.clone());
        for (i, s) in self.segments.iter().enumerate() {
            let v = s.velocity(self.z_max());
            phi.iter_mut().zip(&v).for_each(|(p, v)| *p += s.duration * v);
            if let Some((z, p)) = phi.iter().enumerate().find(|(_, p)| **p < -NEG_TOL) {
                return Err(Error::InfeasibleTrajectory(format!(
                    "state {z} reaches mass {p:e} at the end of segment {i}"
                )));
            }
            phi.iter_mut().for_each(|p| *p = p.max(0.0));
            out.push(phi.clone());
        }
        Ok(out)
    }

    pub fn terminal(&self) -> Result<StateDistribution> {
        let last = self.knots()?.pop().expect("at least the initial knot");
        to_distribution(last)
    }

    /// Text format: header `z_max,n_segments`, an `initial` row, then per
    /// segment a line with its duration followed by `z,z_prime,flux` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("{},{}\n", self.z_max(), self.segments.len());
        out.push_str("initial");
        for p in self.initial.probs() {
            out.push(',');
            out.push_str(&fmt_real(*p));
        }
        out.push('\n');
        for s in &self.segments {
            out.push_str(&fmt_real(s.duration));
            out.push('\n');
            for (e, f) in &s.fluxes {
                out.push_str(&format!("{},{},{}\n", e.from, e.to, fmt_real(*f)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let h: Vec<&str> = header.split(',').collect();
        if h.len() != 2 {
            return Err(Error::Parse { line, msg: "expected header z_max,n_segments".into() });
        }
        let (z_max, n_segments) = (parse_index(h[0], line)?, parse_index(h[1], line)?);
        let (line, init) = lines.next().ok_or(Error::Parse { line, msg: "missing initial row".into() })?;
        let mut fields = init.split(',');
        if fields.next().map(str::trim) != Some("initial") {
            return Err(Error::Parse { line, msg: "expected initial row".into() });
        }
        let probs = fields.map(|f| parse_real(f, line)).collect::<Result<Vec<_>>>()?;
        if probs.len() != z_max + 1 {
            return Err(Error::Parse { line, msg: format!("expected {} probabilities", z_max + 1) });
        }
        let mut traj = FluxTrajectory::new(StateDistribution::new(probs)?);
        let mut current: Option<(f64, Vec<(Edge, f64)>)> = None;
        for (line, l) in lines {
            let f: Vec<&str> = l.split(',').collect();
            match f.len() {
                1 => {
                    if let Some((d, fl)) = current.take() {
                        traj.push(Segment::new(d, fl)?)?;
                    }
                    current = Some((parse_real(f[0], line)?, Vec::new()));
                }
                3 => {
                    let e = Edge::new(parse_index(f[0], line)?, parse_index(f[1], line)?);
                    let flux = parse_real(f[2], line)?;
                    current
                        .as_mut()
                        .ok_or(Error::Parse { line, msg: "flux row before any duration".into() })?
                        .1
                        .push((e, flux));
                }
                _ => return Err(Error::Parse { line, msg: "expected 1 or 3 fields".into() }),
            }
        }
        if let Some((d, fl)) = current {
            traj.push(Segment::new(d, fl)?)?;
        }
        if traj.segments.len() != n_segments {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares {n_segments} segments, found {}", traj.segments.len()),
            });
        }
        Ok(traj)
    }
}

fn to_distribution(mut probs: Vec<f64>) -> Result<StateDistribution> {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        probs.iter_mut().for_each(|p| *p /= s);
    }
    StateDistribution::new(probs)
}

/// The piecewise-affine path of a flux plan, sampled at segment endpoints.
pub fn evolve(traj: &FluxTrajectory) -> Result<TimePath> {
    let knots = traj.knots()?;
    let mut times = vec![0.0];
    let mut states = vec![to_distribution(knots[0].clone())?];
    let mut t = 0.0;
    for (s, k) in traj.segments.iter().zip(knots.into_iter().skip(1)) {
        t += s.duration;
        let state = to_distribution(k)?;
        // Segments too short to advance the clock merge into the previous knot.
        if t > *times.last().unwrap() {
            times.push(t);
            states.push(state);
        } else {
            *states.last_mut().unwrap() = state;
        }
    }
    TimePath::new(times, states)
}

/// Appends `b` to `a`; the terminal state of `a` must match the start of `b`.
pub fn concatenate(a: &FluxTrajectory, b: &FluxTrajectory) -> Result<FluxTrajectory> {
    let end = a.terminal()?;
    if end.z_max() != b.z_max() {
        return Err(Error::TruncationMismatch { left: end.z_max(), right: b.z_max() });
    }
    let gap = tv_distance(&end, b.initial())?;
    if gap > 1e-9 {
        return Err(Error::EndpointMismatch(gap));
    }
    let mut out = a.clone();
    out.segments.extend(b.segments.iter().cloned());
    Ok(out)
}

/// Mean of `log` over the segment from `a` to `b`, both nonnegative and not
/// both zero.
fn mean_log(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let x = 0.5 * (b - a) / m;
    if x.abs() < 1e-3 {
        let x2 = x * x;
        m.ln() - x2 * (1.0 / 6.0 + x2 * (1.0 / 20.0 + x2 / 42.0))
    } else {
        let g = |p: f64| if p > 0.0 { p * p.ln() - p } else { 0.0 };
        (g(b) - g(a)) / (b - a)
    }
}

/// Exact cost of constant fluxes over a segment where every source mass is
/// affine in time and the rates are frozen.
fn frozen_segment_cost(
    rates: &FrozenRates,
    edges: &[Edge],
    start: &[f64],
    end: &[f64],
    duration: f64,
    fluxes: &BTreeMap<Edge, f64>,
) -> ExtReal {
    let mut total = 0.0;
    for e in edges {
        let lambda = rates.rate(*e);
        let (a, b) = (start[e.from].max(0.0), end[e.from].max(0.0));
        let idle = lambda * duration * 0.5 * (a + b);
        let f = fluxes.get(e).copied().unwrap_or(0.0);
        if f == 0.0 {
            total += idle;
            continue;
        }
        if lambda <= 0.0 || (a <= 0.0 && b <= 0.0) {
            return ExtReal::Infinite;
        }
        total += f * duration * ((f / lambda).ln() - mean_log(a, b) - 1.0) + idle;
    }
    ExtReal::Finite(total)
}

fn check_edges(model: &RateModel, traj: &FluxTrajectory) -> Result<()> {
    let kind = model.edge_kind();
    let k = traj.z_max();
    for s in &traj.segments {
        for e in s.fluxes.keys() {
            if !kind.contains(e.from as i64, e.to as i64) || (e.is_forward() && e.from >= k) {
                return Err(Error::EdgeNotPresent { from: e.from as i64, to: e.to as i64 });
            }
        }
    }
    Ok(())
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
}

/// Cost of one segment, subdividing it when the rates depend on the field.
fn segment_cost(
    model: &RateModel,
    edges: &[Edge],
    start: &[f64],
    end: &[f64],
    seg: &Segment,
) -> ExtReal {
    let k = start.len() - 1;
    if !model.interacting() {
        let rates = model.frozen(0.0, k);
        return frozen_segment_cost(&rates, edges, start, end, seg.duration, &seg.fluxes);
    }
    let freeze_error = |pieces: usize| -> f64 {
        let d = seg.duration / pieces as f64;
        let mut est = 0.0;
        for j in 0..pieces {
            let a = lerp(start, end, j as f64 / pieces as f64);
            let b = lerp(start, end, (j + 1) as f64 / pieces as f64);
            let ra = model.frozen_at(&a);
            let rb = model.frozen_at(&b);
            for e in edges {
                let (la, lb) = (ra.rate(*e), rb.rate(*e));
                let f = seg.fluxes.get(e).copied().unwrap_or(0.0);
                let lmin = la.min(lb);
                let over = if f > 0.0 { f / lmin } else { 0.0 };
                est += d * (a[e.from].max(b[e.from]) + over) * 0.5 * (la - lb).abs();
            }
        }
        est
    };
    let mut pieces = 1;
    while pieces < (1 << 16) && freeze_error(pieces) >= FREEZE_TOL {
        pieces *= 2;
    }
    let d = seg.duration / pieces as f64;
    (0..pieces)
        .map(|j| {
            let a = lerp(start, end, j as f64 / pieces as f64);
            let b = lerp(start, end, (j + 1) as f64 / pieces as f64);
            let mid = lerp(&a, &b, 0.5);
            frozen_segment_cost(&model.frozen_at(&mid), edges, &a, &b, d, &seg.fluxes)
        })
        .sum()
}

/// Cost of `seg` run from the knot `start`.
pub(crate) fn segment_cost_from(model: &RateModel, start: &[f64], seg: &Segment) -> ExtReal {
    let k = start.len() - 1;
    let v = seg.velocity(k);
    let end: Vec<f64> = start.iter().zip(&v).map(|(p, v)| (p + seg.duration * v).max(0.0)).collect();
    segment_cost(model, &model.edge_kind().edges(k), start, &end, seg)
}

/// Knot values at segment boundaries, clipped at zero.
pub fn knot_values(traj: &FluxTrajectory) -> Result<Vec<Vec<f64>>> {
    traj.knots()
}

/// Per-segment costs in the control form.
pub fn segment_costs(model: &RateModel, traj: &FluxTrajectory) -> Result<Vec<ExtReal>> {
    check_edges(model, traj)?;
    let knots = traj.knots()?;
    let edges = model.edge_kind().edges(traj.z_max());
    Ok(traj
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| segment_cost(model, &edges, &knots[i], &knots[i + 1], s))
        .collect())
}

/// `int sum_edges tau*(h) lambda phi dt` with `h = flux / (lambda phi) - 1`.
pub fn cost_nonvariational(model: &RateModel, traj: &FluxTrajectory) -> Result<ExtReal> {
    Ok(segment_costs(model, traj)?.into_iter().sum())
}

/// Result of maximizing the dual integrand at one time.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub value: ExtReal,
    /// Optimal fluxes `exp(alpha(z') - alpha(z)) lambda phi(z)`.
    pub fluxes: BTreeMap<Edge, f64>,
    pub converged: bool,
}

/// Solves `sup_alpha <alpha, v> - sum_e (exp(alpha(z') - alpha(z)) - 1) w_e`
/// with `w_e = lambda_e phi(z)` by damped Newton ascent. `alpha` is the warm
/// start and receives the maximizer.
pub fn dual_sup(rates: &FrozenRates, phi: &[f64], v: &[f64], alpha: &mut Vec<f64>) -> DualSolution {
    let n = phi.len();
    let edges = rates.kind.edges(n - 1);
    let mut constant = 0.0;
    // States with no mass and no velocity: inflow must vanish, so incoming
    // edges only contribute their idle cost.
    let dead: Vec<bool> = (0..n).map(|z| phi[z] <= 0.0 && v[z] == 0.0).collect();
    for z in 0..n {
        if phi[z] <= 0.0 && v[z] < 0.0 {
            return DualSolution { value: ExtReal::Infinite, fluxes: BTreeMap::new(), converged: true };
        }
    }
    let mut active: Vec<(Edge, f64)> = Vec::new();
    for e in &edges {
        let w = rates.rate(*e) * phi[e.from].max(0.0);
        if w <= 0.0 {
            continue;
        }
        if dead[e.to] {
            constant += w;
        } else {
            active.push((*e, w));
        }
    }
    // A live state that can receive nothing must not gain mass.
    let mut has_in = vec![false; n];
    for (e, _) in &active {
        has_in[e.to] = true;
    }
    for z in 0..n {
        if !dead[z] && phi[z] <= 0.0 && !has_in[z] && v[z] > 0.0 {
            return DualSolution { value: ExtReal::Infinite, fluxes: BTreeMap::new(), converged: true };
        }
    }

    let live: Vec<usize> = (0..n).filter(|&z| !dead[z]).collect();
    let reference = live[0];
    let free: Vec<usize> = live[1..].to_vec();
    let mut slot = vec![usize::MAX; n];
    for (i, &z) in free.iter().enumerate() {
        slot[z] = i;
    }

    let objective = |a: &[f64]| -> f64 {
        let lin: f64 = live.iter().map(|&z| a[z] * v[z]).sum();
        lin - active.iter().map(|(e, w)| (a[e.to] - a[e.from]).exp_m1() * w).sum::<f64>()
    };

    if alpha.len() != n {
        *alpha = vec![0.0; n];
    }
    let shift = alpha[reference];
    alpha.iter_mut().for_each(|a| *a -= shift);
    dead.iter().zip(alpha.iter_mut()).for_each(|(d, a)| if *d { *a = 0.0 });
    let mut value = objective(alpha);
    if !(value >= 0.0) {
        alpha.iter_mut().for_each(|a| *a = 0.0);
        value = 0.0;
    }

    let m = free.len();
    let mut converged = m == 0;
    for _ in 0..200 {
        if m == 0 {
            break;
        }
        let mut grad = DVector::<f64>::zeros(m);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for &z in &free {
            grad[slot[z]] += v[z];
        }
        for (e, w) in &active {
            let g = (alpha[e.to] - alpha[e.from]).exp() * w;
            let (i, j) = (slot[e.from], slot[e.to]);
            if j != usize::MAX {
                grad[j] -= g;
                hess[(j, j)] += g;
            }
            if i != usize::MAX {
                grad[i] += g;
                hess[(i, i)] += g;
            }
            if i != usize::MAX && j != usize::MAX {
                hess[(i, j)] -= g;
                hess[(j, i)] -= g;
            }
        }
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let scale = hess.diagonal().amax().max(1e-300);
        let mut solved = None;
        for reg in [0.0, 1e-14, 1e-10, 1e-6] {
            let mut h = hess.clone();
            for i in 0..m {
                h[(i, i)] += reg * scale;
            }
            if let Some(ch) = h.cholesky() {
                solved = Some(ch.solve(&grad));
                break;
            }
        }
        let step = solved.unwrap_or_else(|| grad.clone());
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let mut trial = alpha.clone();
            for &z in &free {
                trial[z] += t * step[slot[z]];
            }
            let val = objective(&trial);
            if val.is_finite() && val >= value + 1e-4 * t * slope {
                *alpha = trial;
                value = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = grad.amax() < 1e3 * GRAD_TOL;
            break;
        }
        if value > 1e15 {
            return DualSolution { value: ExtReal::Infinite, fluxes: BTreeMap::new(), converged: true };
        }
    }
    let fluxes = active
        .iter()
        .map(|(e, w)| (*e, (alpha[e.to] - alpha[e.from]).exp() * w))
        .collect();
    DualSolution { value: ExtReal::Finite(value.max(0.0) + constant), fluxes, converged }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalCost {
    pub value: ExtReal,
    /// Every dual maximization met the gradient threshold.
    pub converged: bool,
    /// Largest nodes-per-interval refinement used.
    pub max_nodes: usize,
    /// Change in the total between the last two refinements.
    pub richardson_change: f64,
}

const MAX_NODES: usize = 1024;
const RICHARDSON_TOL: f64 = 1e-7;

/// Dual-form cost of the piecewise-linear curve through the samples of
/// `path`. On each interval the velocity is the difference quotient; the
/// time integral uses the composite midpoint rule, doubled until it settles.
pub fn cost_variational(model: &RateModel, path: &TimePath) -> Result<VariationalCost> {
    let total_time = path.duration();
    let mut total = ExtReal::ZERO;
    let mut converged = true;
    let mut max_nodes = 1;
    let mut change = 0.0f64;
    let mut alpha = Vec::new();
    for i in 0..path.times.len() - 1 {
        let (t0, t1) = (path.times[i], path.times[i + 1]);
        let dt = t1 - t0;
        let (a, b) = (path.states[i].probs(), path.states[i + 1].probs());
        let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (y - x) / dt).collect();
        let rule = |nodes: usize, alpha: &mut Vec<f64>, ok: &mut bool| -> ExtReal {
            (0..nodes)
                .map(|j| {
                    let w = (j as f64 + 0.5) / nodes as f64;
                    let phi = lerp(a, b, w);
                    let sol = dual_sup(&model.frozen_at(&phi), &phi, &v, alpha);
                    *ok &= sol.converged;
                    match sol.value {
                        ExtReal::Finite(g) => ExtReal::Finite(g * dt / nodes as f64),
                        ExtReal::Infinite => ExtReal::Infinite,
                    }
                })
                .sum()
        };
        let tol = RICHARDSON_TOL * (dt / total_time).max(1e-6);
        let mut nodes = 1;
        let mut ok = true;
        let mut prev = rule(nodes, &mut alpha, &mut ok);
        let mut settled = prev;
        while nodes < MAX_NODES {
            nodes *= 2;
            let next = rule(nodes, &mut alpha, &mut ok);
            let diff = match (prev, next) {
                (ExtReal::Finite(x), ExtReal::Finite(y)) => (x - y).abs(),
                (ExtReal::Infinite, ExtReal::Infinite) => 0.0,
                _ => f64::INFINITY,
            };
            settled = next;
            if diff < tol {
                change = change.max(diff);
                break;
            }
            if nodes == MAX_NODES {
                change = change.max(diff);
            }
            prev = next;
        }
        max_nodes = max_nodes.max(nodes);
        converged &= ok;
        total = total + settled;
    }
    Ok(VariationalCost { value: total, converged, max_nodes, richardson_change: change })
}

/// Adjusts fluxes so their divergence reproduces `v` exactly, keeping the
/// non-forward fluxes and solving the balance for the forward ones.
fn repair_balance(kind: EdgeKind, v: &[f64], fluxes: &mut BTreeMap<Edge, f64>) {
    let k = v.len() - 1;
    let get = |m: &BTreeMap<Edge, f64>, e: Edge| m.get(&e).copied().unwrap_or(0.0);
    match kind {
        EdgeKind::ChainWithResets => {
            // State z >= 1: v = f(z-1,z) - f(z,z+1) - r(z).
            let mut above = 0.0;
            for z in (1..=k).rev() {
                let need = v[z] + get(fluxes, Edge::new(z, 0)) + above;
                let f = need.max(0.0);
                fluxes.insert(Edge::new(z - 1, z), f);
                above = f;
            }
        }
        EdgeKind::BirthDeath => {
            // Net flow across the cut between z and z+1.
            let mut cut = 0.0;
            for z in 0..k {
                cut -= v[z];
                let fwd = get(fluxes, Edge::new(z, z + 1));
                let bwd = fwd - cut;
                if bwd >= 0.0 {
                    fluxes.insert(Edge::new(z + 1, z), bwd);
                } else {
                    fluxes.insert(Edge::new(z, z + 1), cut);
                    fluxes.insert(Edge::new(z + 1, z), 0.0);
                }
            }
        }
    }
    fluxes.retain(|_, f| *f > 0.0);
}

/// Recovers a cost-minimal flux plan for the piecewise-linear curve through
/// the samples of `path`. Each interval is split into pieces carrying the
/// dual-optimal fluxes at their midpoints, refined until the piece costs
/// settle.
pub fn flux_from_path(model: &RateModel, path: &TimePath) -> Result<FluxTrajectory> {
    let kind = model.edge_kind();
    let edges = kind.edges(path.z_max());
    let total_time = path.duration();
    let mut traj = FluxTrajectory::new(path.start().clone());
    let mut alpha = Vec::new();
    for i in 0..path.times.len() - 1 {
        let dt = path.times[i + 1] - path.times[i];
        let (a, b) = (path.states[i].probs(), path.states[i + 1].probs());
        let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (y - x) / dt).collect();
        let plan = |pieces: usize, alpha: &mut Vec<f64>| -> (Vec<Segment>, ExtReal) {
            let d = dt / pieces as f64;
            let mut segs = Vec::with_capacity(pieces);
            let mut cost = ExtReal::ZERO;
            for j in 0..pieces {
                let s = lerp(a, b, j as f64 / pieces as f64);
                let e = lerp(a, b, (j + 1) as f64 / pieces as f64);
                let mid = lerp(&s, &e, 0.5);
                let rates = model.frozen_at(&mid);
                let mut sol = dual_sup(&rates, &mid, &v, alpha);
                repair_balance(kind, &v, &mut sol.fluxes);
                let seg = Segment { duration: d, fluxes: sol.fluxes };
                cost = cost + frozen_segment_cost(&rates, &edges, &s, &e, d, &seg.fluxes);
                segs.push(seg);
            }
            (segs, cost)
        };
        let tol = 1e-9 * (dt / total_time).max(1e-6);
        let mut pieces = 1;
        let (mut segs, mut cost) = plan(pieces, &mut alpha);
        while pieces < MAX_NODES {
            let (s2, c2) = plan(2 * pieces, &mut alpha);
            pieces *= 2;
            let diff = match (cost, c2) {
                (ExtReal::Finite(x), ExtReal::Finite(y)) => (x - y).abs(),
                _ => 0.0,
            };
            segs = s2;
            cost = c2;
            if diff < tol {
                break;
            }
        }
        for s in segs {
            traj.push(s)?;
        }
    }
    Ok(traj)
}

/// Random feasible trajectory on `{0..z_max}`: a full-support start with a
/// roughly geometric profile, then one to four segments of total duration in
/// `[0.5, 2)` whose fluxes are the frozen drift fluxes at each knot scaled by
/// factors in `[e^-0.7, e^0.7]`. Redraws until every knot has full support.
pub fn random_trajectory<R: Rng>(model: &RateModel, rng: &mut R, z_max: usize) -> FluxTrajectory {
    'draw: loop {
        let w: Vec<f64> = (0..=z_max).map(|z| 0.7f64.powi(z as i32) * rng.gen_range(0.5..1.5)).collect();
        let mut traj = FluxTrajectory::new(StateDistribution::from_weights(&w).expect("positive weights"));
        let pieces = rng.gen_range(1..=4);
        let total: f64 = rng.gen_range(0.5..2.0);
        let cuts: Vec<f64> = (0..pieces).map(|_| rng.gen_range(0.2..1.0)).collect();
        let sum: f64 = cuts.iter().sum();
        for c in cuts {
            let Ok(phi) = traj.terminal() else { continue 'draw };
            let rates = model.frozen_at(phi.probs());
            let fluxes: Vec<_> = model
                .edge_kind()
                .edges(z_max)
                .into_iter()
                .map(|e| (e, rates.rate(e) * phi.prob(e.from) * rng.gen_range(-0.7f64..0.7).exp()))
                .collect();
            traj.push(Segment::new(total * c / sum, fluxes).expect("positive duration")).expect("edges in range");
        }
        if traj.terminal().is_ok_and(|t| t.probs().iter().all(|&p| p > 0.0)) {
            return traj;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// Tent `f_n`: `z` up to `n`, back down to 0 at `2n`.
    LinearFn,
    /// Tent over `theta`: `theta(z)` up to `n`, mirrored down to 0 at `2n`.
    ThetaN,
}

impl TestFunction {
    pub fn eval(self, n: usize, z: usize) -> f64 {
        let mirrored = if z <= n {
            Some(z)
        } else if z <= 2 * n {
            Some(2 * n - z)
        } else {
            None
        };
        match (self, mirrored) {
            (_, None) => 0.0,
            (TestFunction::LinearFn, Some(y)) => y as f64,
            (TestFunction::ThetaN, Some(y)) => theta(y),
        }
    }

    fn sup(self, n: usize) -> f64 {
        self.eval(n, n)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TestFunction::LinearFn => "linear_fn",
            TestFunction::ThetaN => "theta_n",
        }
    }
}

/// `<dist, g>` bracketed from below or above according to `upper`; tail mass
/// is placed where `g` is smallest or largest.
fn pairing(dist: &StateDistribution, kind: TestFunction, n: usize, upper: bool) -> f64 {
    let body: f64 = dist.probs().iter().enumerate().map(|(z, p)| kind.eval(n, z) * p).sum();
    if upper {
        body + dist.tail_mass() * kind.sup(n)
    } else {
        body
    }
}

/// Lower bound on the cost of any trajectory of horizon `t` from `start` to
/// `target`, from the tent test function of order `n`. Edge rates are bounded
/// by the model's largest rate `lambda`. For `ThetaN` the path first moment
/// is capped through the linear bound, which makes the bound
/// `[A - 2 lambda t (e (m0 + 1) - 1)] / (1 + 2 e lambda t)` with
/// `m0 = <start, z> + 2 (e - 1) lambda t`.
pub fn testfunction_lower_bound(
    model: &RateModel,
    start: &StateDistribution,
    target: &StateDistribution,
    t: f64,
    n: usize,
    kind: TestFunction,
) -> f64 {
    let lambda = model.max_edge_rate();
    let gain = pairing(target, kind, n, false) - pairing(start, kind, n, true);
    match kind {
        TestFunction::LinearFn => gain - 2.0 * (E - 1.0) * lambda * t,
        TestFunction::ThetaN => {
            let Some(m_start) = first_moment(start).finite() else {
                return f64::NEG_INFINITY;
            };
            let m0 = m_start + 2.0 * (E - 1.0) * lambda * t;
            (gain - 2.0 * lambda * t * (E * (m0 + 1.0) - 1.0)) / (1.0 + 2.0 * E * lambda * t)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub holds: bool,
    pub sup_theta: f64,
    pub rhs: ExtReal,
    pub cost: ExtReal,
}

pub const MOMENT_SLACK: f64 = 1e-9;

/// `sup_t <phi_t, theta> <= <phi_0, theta> + S + slack + upper (e - 1) T`.
pub fn moment_inequality(model: &RateModel, traj: &FluxTrajectory) -> Result<MomentCheck> {
    let b = model
        .bounds()
        .ok_or_else(|| Error::NotCompliant(format!("{} declares no rate bounds", model.name())))?;
    let path = evolve(traj)?;
    let sup_theta = path
        .states
        .iter()
        .map(|s| theta_moment(s).expect_finite("finite truncation"))
        .fold(f64::NEG_INFINITY, f64::max);
    let cost = cost_nonvariational(model, traj)?;
    let base = theta_moment(traj.initial()).expect_finite("finite truncation")
        + MOMENT_SLACK
        + b.upper * (E - 1.0) * traj.duration();
    let rhs = ExtReal::Finite(base) + cost;
    Ok(MomentCheck { holds: ExtReal::Finite(sup_theta).le(rhs), sup_theta, rhs, cost })
}

pub fn moment_inequality_check(model: &RateModel, traj: &FluxTrajectory) -> Result<bool> {
    Ok(moment_inequality(model, traj)?.holds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{interacting_wlan_model, mm1_model, wlan_const_model, wlan_decay_model};
    use approx::assert_abs_diff_eq;

    fn fwd(z: usize) -> Edge {
        Edge::new(z, z + 1)
    }

    #[test]
    fn poisson_pair() {
        assert_eq!(tau(0.0), 0.0);
        assert_eq!(tau_star(0.0), ExtReal::Finite(0.0));
        assert_eq!(tau_star(-1.0), ExtReal::Finite(1.0));
        assert_eq!(tau_star(-1.5), ExtReal::Infinite);
        assert_abs_diff_eq!(tau_star(E - 1.0).finite().unwrap(), 1.0, epsilon = 1e-15);
        // Fenchel-Young: tau(a) + tau*(u) >= a u.
        for a in [-2.0, -0.3, 0.0, 0.7, 1.9] {
            for u in [-0.9, -0.2, 0.0, 0.5, 3.0] {
                assert!(tau(a) + tau_star(u).finite().unwrap() >= a * u - 1e-14);
            }
        }
    }

    #[test]
    fn evolve_basic_moves() {
        let d0 = StateDistribution::point_mass(0, 3).unwrap();
        let mut t = FluxTrajectory::new(d0.clone());
        t.push(Segment::unit_move(fwd(0), 1.0).unwrap()).unwrap();
        let p = evolve(&t).unwrap();
        assert_eq!(p.end(), &StateDistribution::point_mass(1, 3).unwrap());
        let zero = FluxTrajectory::with_segments(d0.clone(), vec![Segment::new(2.0, []).unwrap()]).unwrap();
        assert_eq!(evolve(&zero).unwrap().end(), &d0);
        let mut bad = FluxTrajectory::new(d0);
        bad.push(Segment::new(2.0, [(fwd(0), 1.0)]).unwrap()).unwrap();
        assert!(matches!(evolve(&bad), Err(Error::InfeasibleTrajectory(_))));
    }

    #[test]
    fn idle_cost_is_total_rate() {
        let m = wlan_decay_model(1.0, 1.0).unwrap();
        let xi = StateDistribution::from_weights(&[0.5, 0.3, 0.2]).unwrap();
        let t = FluxTrajectory::with_segments(xi.clone(), vec![Segment::new(2.5, []).unwrap()]).unwrap();
        let expected = 2.5 * (0.5 * 1.0 + 0.3 * (0.5 + 1.0) + 0.2 * 1.0);
        assert_abs_diff_eq!(cost_nonvariational(&m, &t).unwrap().finite().unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn drift_matching_fluxes_cost_nothing() {
        let m = wlan_const_model(1.0, 1.0).unwrap();
        let xi = crate::models::single_particle_stationary(&m, 20).unwrap();
        let rates = m.frozen_at(xi.probs());
        let fluxes: Vec<_> = m.edge_kind().edges(20).into_iter().map(|e| (e, rates.rate(e) * xi.prob(e.from))).collect();
        let t = FluxTrajectory::with_segments(xi, vec![Segment::new(1.0, fluxes).unwrap()]).unwrap();
        assert!(cost_nonvariational(&m, &t).unwrap().finite().unwrap().abs() < 1e-8);
    }

    #[test]
    fn unit_transfer_matches_quadrature() {
        // Integrand at time s: flux 1 from mass 1-s at state 0, rate 1; idle
        // edge (1,2) and reset (1,0) carry mass s.
        let m = wlan_const_model(1.0, 1.0).unwrap();
        let t = FluxTrajectory::with_segments(
            StateDistribution::point_mass(0, 4).unwrap(),
            vec![Segment::unit_move(fwd(0), 1.0).unwrap()],
        )
        .unwrap();
        let closed = cost_nonvariational(&m, &t).unwrap().finite().unwrap();
        let integrand = |s: f64| {
            let p = 1.0 - s;
            (1.0 / p).ln() - 1.0 + p + 2.0 * s
        };
        // Substitution s = 1 - u^2 removes the endpoint log singularity.
        let n = 200_000;
        let quad: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                integrand(1.0 - u * u) * 2.0 * u / n as f64
            })
            .sum();
        assert_abs_diff_eq!(closed, quad, epsilon = 1e-6);
        assert_abs_diff_eq!(closed, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn flux_out_of_empty_state_is_infinite() {
        let m = wlan_const_model(1.0, 1.0).unwrap();
        let xi = StateDistribution::point_mass(0, 3).unwrap();
        // Mass passes through state 1 without ever accumulating there.
        let seg = Segment::new(0.5, [(fwd(0), 1.0), (fwd(1), 1.0)]).unwrap();
        let t = FluxTrajectory::with_segments(xi, vec![seg]).unwrap();
        assert_eq!(cost_nonvariational(&m, &t).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn rejects_missing_edges() {
        let m = mm1_model(1.0, 2.0).unwrap();
        let xi = StateDistribution::point_mass(2, 3).unwrap();
        let t = FluxTrajectory::with_segments(xi, vec![Segment::unit_move(Edge::new(2, 0), 0.5).unwrap()]).unwrap();
        assert!(matches!(cost_nonvariational(&m, &t), Err(Error::EdgeNotPresent { .. })));
    }

    #[test]
    fn concatenation_is_additive() {
        let m = interacting_wlan_model(0.5).unwrap();
        let d0 = StateDistribution::point_mass(0, 5).unwrap();
        let a = FluxTrajectory::with_segments(d0, vec![Segment::unit_move(fwd(0), 0.4).unwrap()]).unwrap();
        let b = FluxTrajectory::with_segments(
            a.terminal().unwrap(),
            vec![Segment::unit_move(fwd(1), 0.3).unwrap(), Segment::new(0.7, []).unwrap()],
        )
        .unwrap();
        let ab = concatenate(&a, &b).unwrap();
        let (ca, cb, cab) = (
            cost_nonvariational(&m, &a).unwrap().finite().unwrap(),
            cost_nonvariational(&m, &b).unwrap().finite().unwrap(),
            cost_nonvariational(&m, &ab).unwrap().finite().unwrap(),
        );
        assert_abs_diff_eq!(cab, ca + cb, epsilon = 1e-12);
        let empty = FluxTrajectory::new(ab.terminal().unwrap());
        assert_eq!(concatenate(&ab, &empty).unwrap(), ab);
        assert!(matches!(concatenate(&b, &a), Err(Error::EndpointMismatch(_))));
    }

    #[test]
    fn text_round_trip() {
        let xi = StateDistribution::from_weights(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = FluxTrajectory::with_segments(
            xi,
            vec![
                Segment::new(0.1 / 3.0, [(fwd(0), 0.7), (Edge::new(3, 0), 1.0 / 7.0)]).unwrap(),
                Segment::new(1.25, []).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(FluxTrajectory::from_text(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn dual_is_zero_on_drift() {
        let m = interacting_wlan_model(0.5).unwrap();
        let xi = StateDistribution::from_weights(&[0.4, 0.3, 0.2, 0.1]).unwrap();
        let rates = m.frozen_at(xi.probs());
        let v = rates.drift(xi.probs());
        let mut alpha = Vec::new();
        let sol = dual_sup(&rates, xi.probs(), &v, &mut alpha);
        assert!(sol.converged);
        assert!(sol.value.finite().unwrap() < 1e-14);
        for e in m.edge_kind().edges(3) {
            assert_abs_diff_eq!(sol.fluxes[&e], rates.rate(e) * xi.prob(e.from), epsilon = 1e-12);
        }
    }

    #[test]
    fn birth_death_dual_matches_closed_form() {
        // On a path graph each cut carries a fixed net flow J, and the optimal
        // pair satisfies f_fwd f_bwd = a b, so f_fwd = (J + sqrt(J^2 + 4ab)) / 2.
        let m = mm1_model(1.0, 2.0).unwrap();
        let phi = [0.4, 0.3, 0.2, 0.1];
        let v = [-0.05, 0.2, -0.1, -0.05];
        let rates = m.frozen(0.0, 3);
        let mut alpha = Vec::new();
        let sol = dual_sup(&rates, &phi, &v, &mut alpha);
        let mut expected = 0.0;
        let mut cut = 0.0;
        for z in 0..3 {
            cut -= v[z];
            let (a, b) = (1.0 * phi[z], 2.0 * phi[z + 1]);
            let f = 0.5 * (cut + (cut * cut + 4.0 * a * b).sqrt());
            let g = f - cut;
            expected += f * (f / a).ln() - f + a + g * (g / b).ln() - g + b;
        }
        assert_abs_diff_eq!(sol.value.finite().unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn variational_handles_endpoint_singularity() {
        let m = wlan_const_model(1.0, 1.0).unwrap();
        let t = FluxTrajectory::with_segments(
            StateDistribution::point_mass(0, 4).unwrap(),
            vec![Segment::unit_move(fwd(0), 1.0).unwrap()],
        )
        .unwrap();
        let v = cost_variational(&m, &evolve(&t).unwrap()).unwrap();
        // The optimal plan also uses the reset 1 -> 0 as a counterflow: net
        // flux 1 between masses a = 1 - s and b = s, plus the idle edge (1,2).
        let integrand = |s: f64| {
            let (a, b) = (1.0 - s, s);
            let f = 0.5 * (1.0 + (1.0 + 4.0 * a * b).sqrt());
            let g = f - 1.0;
            let kl = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() - x + y } else { y };
            kl(f, a) + kl(g, b) + s
        };
        let n = 400_000;
        let oracle: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                integrand(1.0 - u * u) * 2.0 * u / n as f64
            })
            .sum();
        assert!(oracle < 1.5);
        // The midpoint rule loses about 0.3 h next to log(1/phi).
        assert_abs_diff_eq!(v.value.finite().unwrap(), oracle, epsilon = 1e-2);
    }

    #[test]
    fn tent_functions() {
        let f: Vec<f64> = (0..8).map(|z| TestFunction::LinearFn.eval(3, z)).collect();
        assert_eq!(f, vec![0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 0.0]);
        assert_eq!(TestFunction::ThetaN.eval(3, 5), 0.0);
        assert_eq!(TestFunction::ThetaN.eval(3, 4), theta(2));
    }

    #[test]
    fn lower_bound_vacuous_at_equilibrium() {
        let m = mm1_model(1.0, 2.0).unwrap();
        let xi = StateDistribution::geometric(0.5, 60).unwrap();
        for n in [1, 5, 20] {
            for kind in [TestFunction::LinearFn, TestFunction::ThetaN] {
                assert!(testfunction_lower_bound(&m, &xi, &xi, 1.0, n, kind) <= 0.0);
            }
        }
    }

    #[test]
    fn moment_check_requires_bounds() {
        let d0 = StateDistribution::point_mass(0, 3).unwrap();
        let t = FluxTrajectory::new(d0);
        assert!(moment_inequality_check(&mm1_model(1.0, 2.0).unwrap(), &t).is_err());
        assert!(moment_inequality_check(&wlan_decay_model(1.0, 1.0).unwrap(), &t).unwrap());
    }
}
