//! The McKean-Vlasov flow `mu' = Lambda*_mu mu`: adaptive RK4 integration,
//! equilibrium search and numerical audits of global stability (B1) and
//! moment convergence (B2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::extended::ExtReal;
use crate::measures::{in_class_kdelta, theta, theta_moment, tv_distance, StateDistribution};
use crate::models::{frozen_stationary, single_particle_stationary, RateModel};
use crate::path::TimePath;

pub type MvePath = TimePath;

/// Largest negative entry silently clipped after a step.
const CLIP: f64 = 1e-12;
const MIN_STEP: f64 = 1e-12;
const MAX_STEP: f64 = 0.25;

fn rhs(model: &RateModel, phi: &[f64], out: &mut [f64]) {
    model.frozen_at(phi).drift_into(phi, out);
}

fn rk4(model: &RateModel, phi: &[f64], dt: f64) -> Vec<f64> {
    let n = phi.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    rhs(model, phi, &mut k1);
    tmp.iter_mut().zip(phi).zip(&k1).for_each(|((t, p), k)| *t = p + 0.5 * dt * k);
    rhs(model, &tmp, &mut k2);
    tmp.iter_mut().zip(phi).zip(&k2).for_each(|((t, p), k)| *t = p + 0.5 * dt * k);
    rhs(model, &tmp, &mut k3);
    tmp.iter_mut().zip(phi).zip(&k3).for_each(|((t, p), k)| *t = p + dt * k);
    rhs(model, &tmp, &mut k4);
    (0..n)
        .map(|i| phi[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Adaptive stepper with step doubling for the local error estimate.
struct Stepper<'a> {
    model: &'a RateModel,
    tol: f64,
    dt: f64,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a RateModel, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance {tol}")));
        }
        Ok(Self { model, tol, dt: 0.01 })
    }

    /// Advances `phi` from `t` to exactly `t_end`, calling `on_step` after
    /// every accepted step.
    fn advance(
        &mut self,
        phi: &mut Vec<f64>,
        t: &mut f64,
        t_end: f64,
        mut on_step: impl FnMut(f64, &[f64]),
    ) -> Result<()> {
        while *t < t_end {
            let remaining = t_end - *t;
            let last = self.dt >= remaining;
            let h = if last { remaining } else { self.dt };
            let coarse = rk4(self.model, phi, h);
            let half = rk4(self.model, phi, 0.5 * h);
            let fine = rk4(self.model, &half, 0.5 * h);
            let err: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).sum::<f64>() / 15.0;
            let min = fine.iter().copied().fold(f64::INFINITY, f64::min);
            if !err.is_finite() || err > self.tol || min < -CLIP {
                self.dt = 0.5 * h;
                if self.dt < MIN_STEP {
                    return Err(Error::Stiffness { t: *t });
                }
                continue;
            }
            *phi = fine;
            phi.iter_mut().for_each(|p| *p = p.max(0.0));
            let s: f64 = phi.iter().sum();
            phi.iter_mut().for_each(|p| *p /= s);
            *t = if last { t_end } else { *t + h };
            on_step(*t, phi);
            if err < self.tol / 64.0 && !last {
                self.dt = (2.0 * h).min(MAX_STEP);
            }
        }
        Ok(())
    }
}

fn to_state(phi: &[f64]) -> StateDistribution {
    StateDistribution::new(phi.to_vec()).expect("stepper keeps iterates on the simplex")
}

/// Integrates from `nu` over `[0, t_end]`, recording every accepted step.
pub fn integrate(model: &RateModel, nu: &StateDistribution, t_end: f64, tol: f64) -> Result<MvePath> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon {t_end}")));
    }
    let mut stepper = Stepper::new(model, tol)?;
    let mut phi = nu.without_tail().probs().to_vec();
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![to_state(&phi)];
    stepper.advance(&mut phi, &mut t, t_end, |t, p| {
        times.push(t);
        states.push(to_state(p));
    })?;
    TimePath::new(times, states)
}

/// Integrates from `nu` and reports the state at each requested time.
pub fn integrate_on_grid(model: &RateModel, nu: &StateDistribution, grid: &[f64], tol: f64) -> Result<MvePath> {
    if grid.first() != Some(&0.0) {
        return Err(Error::InvalidParameter("grid must start at 0".into()));
    }
    let mut stepper = Stepper::new(model, tol)?;
    let mut phi = nu.without_tail().probs().to_vec();
    let mut t = 0.0;
    let mut states = vec![to_state(&phi)];
    for &target in &grid[1..] {
        stepper.advance(&mut phi, &mut t, target, |_, _| {})?;
        states.push(to_state(&phi));
    }
    TimePath::new(grid.to_vec(), states)
}

/// Uniform grid `0, dt, ..., t_end` with `n` intervals.
pub fn uniform_grid(t_end: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
}

/// `|| Lambda*_xi xi ||_1`.
pub fn fixed_point_residual(model: &RateModel, xi: &StateDistribution) -> f64 {
    model.frozen_at(xi.probs()).drift(xi.probs()).iter().map(|x| x.abs()).sum()
}

pub const DAMPING: f64 = 0.5;
pub const MAX_FIXED_POINT_ITERS: usize = 10_000;

/// Equilibrium on `{0..z_max}` by damped iteration of the frozen-field
/// stationary map, started from `delta_0`.
pub fn find_equilibrium(model: &RateModel, z_max: usize, tol: f64) -> Result<StateDistribution> {
    if !model.interacting() {
        return single_particle_stationary(model, z_max);
    }
    find_equilibrium_from(model, &StateDistribution::point_mass(0, z_max)?, tol)
}

pub fn find_equilibrium_from(model: &RateModel, init: &StateDistribution, tol: f64) -> Result<StateDistribution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol}")));
    }
    let z_max = init.z_max();
    let mut xi = init.without_tail();
    let mut residual = fixed_point_residual(model, &xi);
    for _ in 0..MAX_FIXED_POINT_ITERS {
        if residual < tol {
            return Ok(xi);
        }
        let target = frozen_stationary(model, model.field_of(xi.probs()), z_max)?;
        xi = StateDistribution::mixture(&target, &xi, DAMPING)?;
        residual = fixed_point_residual(model, &xi);
    }
    if residual < tol {
        return Ok(xi);
    }
    Err(Error::EquilibriumNotFound { iterations: MAX_FIXED_POINT_ITERS, residual })
}

#[derive(Debug, Clone)]
pub struct B2Options {
    pub m: f64,
    pub horizon: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub z_max: usize,
    pub threshold: f64,
    pub grid_points: usize,
    pub tol: f64,
    /// Initial conditions audited before the random samples.
    pub initial: Vec<StateDistribution>,
}

impl B2Options {
    pub fn new(m: f64, horizon: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            m,
            horizon,
            n_samples,
            seed,
            z_max: 40,
            threshold: 1e-3,
            grid_points: 40,
            tol: 1e-10,
            initial: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct B2Report {
    pub grid: Vec<f64>,
    /// Sup over samples of the theta-moment gap to the equilibrium, per grid time.
    pub sup_theta_gap: Vec<f64>,
    /// Sup over samples of the TV distance to the equilibrium, per grid time.
    pub sup_tv: Vec<f64>,
    pub initial_theta_moments: Vec<f64>,
    /// Largest pairwise TV distance among terminal states.
    pub terminal_spread: f64,
    pub terminal_theta_gap: f64,
    pub passed: bool,
    pub statement: String,
}

/// Random mixture of up to four point masses, pulled toward `delta_0` until
/// its theta-moment is at most `m`.
pub fn sample_km_initial<R: Rng>(rng: &mut R, m: f64, z_max: usize) -> StateDistribution {
    let cap = (0..=z_max).take_while(|&z| theta(z) <= 4.0 * m.max(1.0)).last().unwrap_or(0).max(1);
    let k = rng.gen_range(1..=4);
    let mut w = vec![0.0; z_max + 1];
    for _ in 0..k {
        let z = rng.gen_range(0..=cap);
        w[z] += -rng.gen::<f64>().max(1e-300).ln();
    }
    let nu = StateDistribution::from_weights(&w).expect("positive weights");
    let th = theta_moment(&nu).expect_finite("finite support");
    if th <= m {
        return nu;
    }
    let d0 = StateDistribution::point_mass(0, z_max).expect("z_max >= 0");
    StateDistribution::mixture(&nu, &d0, m / th).expect("valid weight")
}

/// Integrates sampled initial conditions from `K_M` and tracks their distance
/// to the equilibrium. Stability is audited over the samples, never proved.
pub fn check_b2(model: &RateModel, opts: &B2Options) -> Result<B2Report> {
    if !(opts.m > 0.0) {
        return Err(Error::InvalidParameter(format!("M = {}", opts.m)));
    }
    let xi_star = find_equilibrium(model, opts.z_max, 1e-13)?;
    let star_theta = theta_moment(&xi_star).expect_finite("finite truncation");
    let grid = uniform_grid(opts.horizon, opts.grid_points);
    let mut inits: Vec<StateDistribution> = opts.initial.iter().map(|nu| nu.retruncate(opts.z_max)).collect();
    inits.extend((0..opts.n_samples).map(|i| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        sample_km_initial(&mut rng, opts.m, opts.z_max)
    }));
    let runs: Vec<Result<(f64, MvePath)>> = inits
        .par_iter()
        .map(|nu| {
            let th = theta_moment(nu).expect_finite("finite support");
            Ok((th, integrate_on_grid(model, nu, &grid, opts.tol)?))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut sup_theta_gap = vec![0.0f64; grid.len()];
    let mut sup_tv = vec![0.0f64; grid.len()];
    for (_, path) in &runs {
        for (j, s) in path.states.iter().enumerate() {
            let gap = (theta_moment(s).expect_finite("finite truncation") - star_theta).abs();
            sup_theta_gap[j] = sup_theta_gap[j].max(gap);
            sup_tv[j] = sup_tv[j].max(tv_distance(s, &xi_star)?);
        }
    }
    let mut terminal_spread = 0.0f64;
    for a in &runs {
        for b in &runs {
            terminal_spread = terminal_spread.max(tv_distance(a.1.end(), b.1.end())?);
        }
    }
    let terminal_theta_gap = *sup_theta_gap.last().unwrap();
    let passed = terminal_theta_gap < opts.threshold;
    let statement = if passed {
        format!("consistent with B1 over the {} sampled initial conditions", runs.len())
    } else {
        format!("terminal theta gap {terminal_theta_gap:e} exceeds {:e}", opts.threshold)
    };
    Ok(B2Report {
        grid,
        sup_theta_gap,
        sup_tv,
        initial_theta_moments: runs.iter().map(|r| r.0).collect(),
        terminal_spread,
        terminal_theta_gap,
        passed,
        statement,
    })
}

/// Time horizon used when searching for entry into `K(delta)`: ten
/// relaxation times of the slowest rate.
pub fn default_descent_horizon(model: &RateModel) -> f64 {
    let lower = model
        .bounds()
        .map(|b| b.lower)
        .unwrap_or_else(|| model.forward_rate(0, 0.0).min(model.backward_rate(0.0)));
    10.0 / lower
}

#[derive(Debug, Clone)]
pub struct KDeltaSearch {
    pub horizon: f64,
    pub grid_dt: f64,
    pub tol: f64,
}

impl KDeltaSearch {
    pub fn for_model(model: &RateModel) -> Self {
        Self { horizon: default_descent_horizon(model), grid_dt: 0.01, tol: 1e-11 }
    }
}

/// Follows the flow on a uniform grid until it enters `K(delta)` around
/// `xi_star`. Returns the entry time and the sampled path up to it, or `None`
/// if the horizon passes first.
pub fn flow_into_kdelta(
    model: &RateModel,
    nu: &StateDistribution,
    xi_star: &StateDistribution,
    delta: f64,
    search: &KDeltaSearch,
) -> Result<Option<(f64, MvePath)>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta {delta}")));
    }
    let nu = nu.without_tail();
    let mut stepper = Stepper::new(model, search.tol)?;
    let mut phi = nu.probs().to_vec();
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![nu.clone()];
    if in_class_kdelta(&nu, xi_star, delta)? {
        return Ok(Some((0.0, TimePath::new(times, states)?)));
    }
    let steps = (search.horizon / search.grid_dt).ceil() as usize;
    for i in 1..=steps {
        let target = (i as f64 * search.grid_dt).min(search.horizon);
        stepper.advance(&mut phi, &mut t, target, |_, _| {})?;
        let s = to_state(&phi);
        let inside = in_class_kdelta(&s, xi_star, delta)?;
        times.push(target);
        states.push(s);
        if inside {
            return Ok(Some((target, TimePath::new(times, states)?)));
        }
    }
    Ok(None)
}

/// Smallest grid time at which the flow from `nu` lies in `K(delta)`;
/// infinite if not reached within the default horizon.
pub fn time_to_kdelta(model: &RateModel, nu: &StateDistribution, delta: f64) -> Result<ExtReal> {
    let xi_star = find_equilibrium(model, nu.z_max(), 1e-13)?;
    let search = KDeltaSearch::for_model(model);
    Ok(match flow_into_kdelta(model, nu, &xi_star, delta, &search)? {
        Some((t, _)) => ExtReal::Finite(t),
        None => ExtReal::Infinite,
    })
}
