//! Exact simulation of the N-particle system, stationary estimation, exact
//! i.i.d. stationary sampling for non-interacting models, and Monte Carlo
//! rate estimates.
//!
//! Randomness comes from ChaCha8 seeded with `seed`, with replica `r` on
//! stream `r`, so results do not depend on scheduling or thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{theta, tv_distance, StateDistribution};
use crate::models::{single_particle_stationary, ModelKind, RateModel};

/// Name of the generator, recorded in every output.
pub const ALGORITHM: &str = "ChaCha8";

/// Deterministic generator for `(seed, replica)`.
pub fn stream_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Occupancy counts of `n` particles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParticleSystemState {
    counts: Vec<u64>,
    n: u64,
}

impl ParticleSystemState {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::InvalidParameter("a particle system needs at least one particle".into()));
        }
        Ok(Self { counts, n })
    }

    /// All `n` particles at state `z`, on `{0..z_max}`.
    pub fn all_at(z: usize, n: u64, z_max: usize) -> Result<Self> {
        if z > z_max {
            return Err(Error::InvalidParameter(format!("state {z} above z_max {z_max}")));
        }
        let mut counts = vec![0; z_max + 1];
        counts[z] = n;
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Largest state the count vector covers.
    pub fn z_max(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn fraction(&self, z: usize) -> f64 {
        self.counts.get(z).copied().unwrap_or(0) as f64 / self.n as f64
    }

    /// Empirical measure on `{0..z_max}`, any particles above folded into the tail.
    pub fn empirical(&self, z_max: usize) -> StateDistribution {
        let probs: Vec<f64> = self.counts.iter().map(|&c| c as f64 / self.n as f64).collect();
        StateDistribution::new(probs).expect("counts sum to n").retruncate(z_max)
    }

    pub fn theta_moment(&self) -> f64 {
        self.counts.iter().enumerate().map(|(z, &c)| theta(z) * c as f64).sum::<f64>() / self.n as f64
    }

    fn move_particle(&mut self, from: usize, to: usize) {
        self.counts[from] -= 1;
        if to >= self.counts.len() {
            self.counts.resize(to + 1, 0);
        }
        self.counts[to] += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n: u64,
    pub seed: u64,
    pub horizon: f64,
    pub burn_in: f64,
    pub z_max: usize,
    /// Spacing of recorded samples.
    pub thinning: f64,
}

impl SimConfig {
    /// Burn-in defaults to `20 / lambda_lower`.
    pub fn new(model: &RateModel, n: u64, seed: u64, horizon: f64, z_max: usize) -> Result<Self> {
        let c = Self { n, seed, horizon, burn_in: default_burn_in(model), z_max, thinning: 1.0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("N must be at least 1".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return Err(Error::InvalidParameter(format!(
                "burn-in {} must lie in [0, horizon {})",
                self.burn_in, self.horizon
            )));
        }
        if !(self.thinning > 0.0) {
            return Err(Error::InvalidParameter(format!("thinning {}", self.thinning)));
        }
        Ok(())
    }
}

/// Slowest rate of the model: the A2 lower constant, or the smaller of the
/// two constant rates.
pub fn lambda_lower(model: &RateModel) -> f64 {
    model
        .bounds()
        .map(|b| b.lower)
        .unwrap_or_else(|| model.forward_rate(0, 0.0).min(model.backward_rate(0.0)))
}

pub fn default_burn_in(model: &RateModel) -> f64 {
    20.0 / lambda_lower(model)
}

/// One transition of the particle system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub dt: f64,
    pub from: usize,
    pub to: usize,
}

/// Draws the holding time and moves one particle along an edge chosen with
/// probability proportional to `count(z) * rate(z, z')` at the current field.
/// The forward edge out of the top of the count vector fires like any other;
/// in interacting models that is an overflow error, otherwise the vector grows.
pub fn gillespie_step<R: Rng>(model: &RateModel, state: &mut ParticleSystemState, rng: &mut R) -> Result<Jump> {
    let field = state.fraction(0);
    let back = model.backward_rate(field);
    let occupied = state.counts.iter().rposition(|&c| c > 0).expect("n >= 1");
    let mut total = 0.0;
    for z in 0..=occupied {
        let c = state.counts[z] as f64;
        total += c * model.forward_rate(z, field);
        if z >= 1 {
            total += c * back;
        }
    }
    if !(total > 0.0) {
        return Err(Error::AbsorbingState);
    }
    let e: f64 = Exp1.sample(rng);
    let dt = e / total;
    let mut u = rng.gen::<f64>() * total;
    let mut chosen = None;
    'scan: for z in 0..=occupied {
        let c = state.counts[z] as f64;
        if c == 0.0 {
            continue;
        }
        let f = c * model.forward_rate(z, field);
        if u < f {
            chosen = Some((z, z + 1));
            break 'scan;
        }
        u -= f;
        if z >= 1 {
            let b = c * back;
            if u < b {
                chosen = Some((z, model.edge_kind().backward_target(z)));
                break 'scan;
            }
            u -= b;
        }
    }
    // Rounding can leave u marginally above the last bucket.
    let (from, to) = chosen.unwrap_or_else(|| {
        let z = occupied;
        if z >= 1 {
            (z, model.edge_kind().backward_target(z))
        } else {
            (0, 1)
        }
    });
    if to > state.z_max() && model.interacting() {
        return Err(Error::TruncationOverflow(state.z_max()));
    }
    state.move_particle(from, to);
    Ok(Jump { dt, from, to })
}

/// States recorded every `thinning` time units on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub states: Vec<ParticleSystemState>,
}

impl SampledPath {
    /// `replica,t,z,prob` rows on `{0..z_max}`.
    pub fn to_csv_rows(&self, replica: u64, z_max: usize, out: &mut String) {
        use crate::io::fmt_real;
        for (t, s) in self.times.iter().zip(&self.states) {
            let t = fmt_real(*t);
            let e = s.empirical(z_max);
            for (z, p) in e.probs().iter().enumerate() {
                out.push_str(&format!("{replica},{t},{z},{}\n", fmt_real(*p)));
            }
        }
    }
}

/// Simulates replica `replica` from `initial`, holding the state between
/// jumps to produce samples at multiples of `thinning`.
pub fn simulate_path_from(
    model: &RateModel,
    config: &SimConfig,
    initial: ParticleSystemState,
    replica: u64,
) -> Result<SampledPath> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, replica);
    let mut state = initial;
    let mut t = 0.0;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut next_sample = 0.0;
    loop {
        let jump = {
            let mut trial = state.clone();
            let j = gillespie_step(model, &mut trial, &mut rng)?;
            (j, trial)
        };
        let t_next = t + jump.0.dt;
        while next_sample <= config.horizon && next_sample < t_next {
            times.push(next_sample);
            states.push(state.clone());
            next_sample += config.thinning;
        }
        if t_next > config.horizon {
            break;
        }
        t = t_next;
        state = jump.1;
    }
    Ok(SampledPath { times, states })
}

/// Simulates replica 0 from all particles at state 0.
pub fn simulate_path(model: &RateModel, config: &SimConfig) -> Result<SampledPath> {
    let init = ParticleSystemState::all_at(0, config.n, config.z_max)?;
    simulate_path_from(model, config, init, 0)
}

/// Sets of empirical measures whose probabilities are estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    All,
    /// `{ d(., center) <= radius }`.
    TvBall { center: StateDistribution, radius: f64 },
    /// Complement of `K_M`: theta-moment above `M`.
    ThetaMomentAbove(f64),
}

impl Event {
    pub fn contains(&self, state: &ParticleSystemState) -> bool {
        match self {
            Event::All => true,
            Event::TvBall { center, radius } => {
                let e = state.empirical(center.z_max());
                tv_distance(&e, center).expect("same truncation") <= *radius
            }
            Event::ThetaMomentAbove(m) => state.theta_moment() > *m,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Event::All => "all".into(),
            Event::TvBall { radius, .. } => format!("tv_ball(r={radius})"),
            Event::ThetaMomentAbove(m) => format!("theta_moment_above({m})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub event: String,
    pub n: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `-(1/N) log p_hat`, or `-(1/N) log ci_high` when no hit was seen.
    pub rate: f64,
    /// The event was never observed; `rate` is then only a lower bound.
    pub lower_bound_only: bool,
    pub seed: u64,
    pub algorithm: &'static str,
}

impl RateEstimate {
    fn from_interval(event: String, n: u64, p_hat: f64, ci_low: f64, ci_high: f64, seed: u64) -> Self {
        let lower_bound_only = p_hat <= 0.0;
        let basis = if lower_bound_only { ci_high } else { p_hat };
        let rate = if basis >= 1.0 { 0.0 } else { -basis.ln() / n as f64 };
        Self { event, n, p_hat, ci_low, ci_high, rate, lower_bound_only, seed, algorithm: ALGORITHM }
    }

    pub const CSV_HEADER: &'static str = "N,event,p_hat,ci_low,ci_high,rate,seed,algorithm";

    pub fn csv_row(&self) -> String {
        use crate::io::fmt_real;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n,
            self.event,
            fmt_real(self.p_hat),
            fmt_real(self.ci_low),
            fmt_real(self.ci_high),
            fmt_real(self.rate),
            self.seed,
            self.algorithm
        )
    }
}

pub const BATCHES: usize = 20;
/// Two-sided 97.5% Student quantile with `BATCHES - 1` degrees of freedom.
const T_QUANTILE: f64 = 2.093;

/// Time average of an observable after burn-in with batch-means interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeAverage {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub batch_means: Vec<f64>,
    pub first_half: f64,
    pub second_half: f64,
    /// Halves agree within the interval half-width times two.
    pub burn_in_ok: bool,
}

/// Integrates `f` along a single run after burn-in, checking it at jump
/// times and weighting by holding times.
pub fn time_average<F>(model: &RateModel, config: &SimConfig, replica: u64, f: F) -> Result<TimeAverage>
where
    F: Fn(&ParticleSystemState) -> f64,
{
    config.validate()?;
    let mut rng = stream_rng(config.seed, replica);
    let mut state = ParticleSystemState::all_at(0, config.n, config.z_max)?;
    let mut t = 0.0;
    while t < config.burn_in {
        let mut next = state.clone();
        let j = gillespie_step(model, &mut next, &mut rng)?;
        if t + j.dt >= config.burn_in {
            // Memorylessness lets the holding interval restart at the burn-in
            // boundary with the current state.
            break;
        }
        t += j.dt;
        state = next;
    }
    let span = config.horizon - config.burn_in;
    let width = span / BATCHES as f64;
    let mut acc = vec![0.0; BATCHES];
    let mut t = 0.0;
    let mut value = f(&state);
    while t < span {
        let dt = gillespie_step(model, &mut state, &mut rng)?.dt;
        let end = (t + dt).min(span);
        let mut a = t;
        while a < end {
            let b = (((a / width).floor() + 1.0) * width).min(end);
            let idx = ((a / width) as usize).min(BATCHES - 1);
            acc[idx] += value * (b - a);
            a = b;
        }
        t = end;
        value = f(&state);
    }
    let batch_means: Vec<f64> = acc.iter().map(|x| x / width).collect();
    let mean = batch_means.iter().sum::<f64>() / BATCHES as f64;
    let var = batch_means.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
    let half = T_QUANTILE * (var / BATCHES as f64).sqrt();
    let h = BATCHES / 2;
    let first_half = batch_means[..h].iter().sum::<f64>() / h as f64;
    let second_half = batch_means[h..].iter().sum::<f64>() / (BATCHES - h) as f64;
    let burn_in_ok = (first_half - second_half).abs() <= 2.0 * half.max(1e-12);
    Ok(TimeAverage {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        batch_means,
        first_half,
        second_half,
        burn_in_ok,
    })
}

/// Long-run occupation estimate of the stationary probability of `event`.
pub fn estimate_invariant(model: &RateModel, config: &SimConfig, event: &Event) -> Result<RateEstimate> {
    let avg = time_average(model, config, 0, |s| if event.contains(s) { 1.0 } else { 0.0 })?;
    let (p, lo, hi) = if avg.mean <= 0.0 {
        let bound = (3.0 / ((config.horizon - config.burn_in) * lambda_lower(model))).min(1.0);
        (0.0, 0.0, bound)
    } else {
        (avg.mean, avg.ci_low.max(0.0), avg.ci_high.min(1.0))
    };
    Ok(RateEstimate::from_interval(event.describe(), config.n, p, lo.min(p), hi.max(p), config.seed))
}

/// Sampler for the single-particle stationary law.
#[derive(Debug, Clone)]
pub enum StationarySampler {
    Geometric(Geometric),
    Cdf(Vec<f64>),
}

/// Truncation used for inverse-CDF sampling.
pub const CDF_Z_MAX: usize = 200;

impl StationarySampler {
    pub fn new(model: &RateModel) -> Result<Self> {
        if model.interacting() {
            return Err(Error::InteractingModel(format!("{} has no i.i.d. stationary law", model.name())));
        }
        let ratio = match model.kind() {
            ModelKind::Mm1 { lambda_f, lambda_b } => {
                if lambda_f >= lambda_b {
                    return Err(Error::Instability(format!("lambda_f={lambda_f} >= lambda_b={lambda_b}")));
                }
                Some(lambda_f / lambda_b)
            }
            ModelKind::WlanConst { lambda_f, lambda_b } => Some(lambda_f / (lambda_f + lambda_b)),
            _ => None,
        };
        if let Some(r) = ratio {
            let g = Geometric::new(1.0 - r).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            return Ok(Self::Geometric(g));
        }
        let pi = single_particle_stationary(model, CDF_Z_MAX)?;
        let mut acc = 0.0;
        let cdf = pi.probs().iter().map(|p| {
            acc += p;
            acc
        });
        Ok(Self::Cdf(cdf.collect()))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            Self::Geometric(g) => g.sample(rng) as usize,
            Self::Cdf(cdf) => {
                let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
                cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
            }
        }
    }
}

/// Empirical measure of `n` i.i.d. draws from the stationary law.
pub fn sample_iid_stationary<R: Rng>(model: &RateModel, n: u64, rng: &mut R) -> Result<ParticleSystemState> {
    let sampler = StationarySampler::new(model)?;
    Ok(sample_with(&sampler, n, rng))
}

fn sample_with<R: Rng>(sampler: &StationarySampler, n: u64, rng: &mut R) -> ParticleSystemState {
    let mut counts: Vec<u64> = vec![0; 1];
    for _ in 0..n {
        let z = sampler.sample(rng);
        if z >= counts.len() {
            counts.resize(z + 1, 0);
        }
        counts[z] += 1;
    }
    ParticleSystemState::new(counts).expect("n >= 1")
}

/// Two-sided 95% Wilson interval for `hits` out of `trials`.
pub fn wilson_interval(hits: u64, trials: u64) -> (f64, f64) {
    let z = 1.959_963_984_540_054f64;
    let n = trials as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if hits == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Draws per parallel chunk; chunk `c` of list entry `i` uses stream
/// `(i << 32) | c`.
pub const CHUNK: u64 = 10_000;

/// Rate estimates per `N`. Non-interacting models use exact i.i.d. draws
/// (`samples_per_n` of them); interacting models use one long run whose
/// post-burn-in length is `samples_per_n` time units.
pub fn estimate_rate_curve(
    model: &RateModel,
    event: &Event,
    n_list: &[u64],
    samples_per_n: u64,
    seed: u64,
) -> Result<Vec<RateEstimate>> {
    if samples_per_n == 0 {
        return Err(Error::InvalidParameter("samples_per_n must be positive".into()));
    }
    if model.interacting() {
        let z_max = match event {
            Event::TvBall { center, .. } => center.z_max(),
            _ => 60,
        };
        return n_list
            .iter()
            .map(|&n| {
                let burn_in = default_burn_in(model);
                let config = SimConfig { n, seed, horizon: burn_in + samples_per_n as f64, burn_in, z_max, thinning: 1.0 };
                estimate_invariant(model, &config, event)
            })
            .collect();
    }
    let sampler = StationarySampler::new(model)?;
    n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n == 0 {
                return Err(Error::InvalidParameter("N must be at least 1".into()));
            }
            let chunks = samples_per_n.div_ceil(CHUNK);
            let hits: u64 = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = stream_rng(seed, ((i as u64) << 32) | c);
                    let len = CHUNK.min(samples_per_n - c * CHUNK);
                    (0..len).filter(|_| event.contains(&sample_with(&sampler, n, &mut rng))).count() as u64
                })
                .sum();
            let (lo, hi) = wilson_interval(hits, samples_per_n);
            let p = hits as f64 / samples_per_n as f64;
            Ok(RateEstimate::from_interval(event.describe(), n, p, lo, hi, seed))
        })
        .collect()
}

/// Theta-moments of the empirical measure sampled every `thinning` time
/// units after burn-in.
pub fn theta_moment_samples(model: &RateModel, config: &SimConfig, replica: u64) -> Result<Vec<f64>> {
    let init = ParticleSystemState::all_at(0, config.n, config.z_max)?;
    let path = simulate_path_from(model, config, init, replica)?;
    Ok(path
        .times
        .iter()
        .zip(&path.states)
        .filter(|(t, _)| **t >= config.burn_in)
        .map(|(_, s)| s.theta_moment())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceTest {
    /// `sup_x (F_upper(x) - F_lower(x))`.
    pub statistic: f64,
    pub critical: f64,
    pub dominated: bool,
}

/// One-sided two-sample Kolmogorov-Smirnov test at the 99% level of the
/// hypothesis that `lower` is stochastically dominated by `upper`.
pub fn ks_dominance(lower: &[f64], upper: &[f64]) -> DominanceTest {
    let mut a = lower.to_vec();
    let mut b = upper.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut statistic = 0.0f64;
    for &x in a.iter().chain(&b) {
        let fa = a.partition_point(|&y| y <= x) as f64 / n;
        let fb = b.partition_point(|&y| y <= x) as f64 / m;
        statistic = statistic.max(fb - fa);
    }
    let critical = (100f64.ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt();
    DominanceTest { statistic, critical, dominated: statistic <= critical }
}
