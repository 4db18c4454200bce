//! Probability distributions on `{0..z_max}` with tail bookkeeping, the
//! total-variation metric, moments, relative entropy and the compact classes
//! `K_M` and `K(delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended::ExtReal;
use crate::io::{content_lines, fmt_real, parse_index, parse_real};

/// Tolerance on total mass for a valid distribution.
pub const MASS_TOL: f64 = 1e-12;
/// Looser tolerance accepted when reading distributions from files.
pub const FILE_MASS_TOL: f64 = 1e-9;

/// `z log z`, with `0 log 0 = 0`.
pub fn theta(z: usize) -> f64 {
    if z <= 1 {
        0.0
    } else {
        let x = z as f64;
        x * x.ln()
    }
}

/// Contribution of the mass beyond `z_max` to the two moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailMoments {
    pub theta: ExtReal,
    pub first: ExtReal,
}

impl TailMoments {
    pub const NONE: TailMoments = TailMoments {
        theta: ExtReal::ZERO,
        first: ExtReal::ZERO,
    };

    /// Tail of unknown shape: both moments flagged infinite.
    pub const UNKNOWN: TailMoments = TailMoments {
        theta: ExtReal::Infinite,
        first: ExtReal::Infinite,
    };
}

/// A probability vector on `{0..z_max}` plus mass `tail_mass` beyond `z_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    probs: Vec<f64>,
    tail_mass: f64,
    tail: TailMoments,
}

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tail(probs, 0.0, TailMoments::NONE)
    }

    pub fn with_tail(probs: Vec<f64>, tail_mass: f64, tail: TailMoments) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((z, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!("entry {z} is {p}")));
        }
        if !tail_mass.is_finite() || tail_mass < 0.0 {
            return Err(Error::InvalidDistribution(format!("tail mass {tail_mass}")));
        }
        let total: f64 = probs.iter().sum::<f64>() + tail_mass;
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!("total mass {total}")));
        }
        let tail = if tail_mass == 0.0 { TailMoments::NONE } else { tail };
        Ok(Self { probs, tail_mass, tail })
    }

    /// Normalizes nonnegative weights into a distribution without tail.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidDistribution(format!("weight sum {s}")));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub fn point_mass(z: usize, z_max: usize) -> Result<Self> {
        if z > z_max {
            return Err(Error::InvalidParameter(format!("point mass at {z} > z_max {z_max}")));
        }
        let mut probs = vec![0.0; z_max + 1];
        probs[z] = 1.0;
        Self::new(probs)
    }

    /// `(1 - r) r^z`, with the exact mass and moments beyond `z_max` kept in
    /// the tail.
    pub fn geometric(ratio: f64, z_max: usize) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidParameter(format!("geometric ratio {ratio}")));
        }
        let probs: Vec<f64> = (0..=z_max)
            .map(|z| (1.0 - ratio) * ratio.powi(z as i32))
            .collect();
        let k = (z_max + 1) as f64;
        let tail_mass = ratio.powf(k);
        let first = tail_mass * (k + ratio / (1.0 - ratio));
        let mut theta_sum = 0.0;
        let mut z = z_max + 1;
        loop {
            let term = theta(z) * (1.0 - ratio) * ratio.powf(z as f64);
            theta_sum += term;
            if term == 0.0 || term < 1e-18 * theta_sum {
                break;
            }
            z += 1;
        }
        // Summation order leaves the total a few ulps off one.
        let s: f64 = probs.iter().sum::<f64>() + tail_mass;
        let probs = probs.into_iter().map(|p| p / s).collect();
        Self::with_tail(
            probs,
            tail_mass / s,
            TailMoments {
                theta: ExtReal::Finite(theta_sum),
                first: ExtReal::Finite(first),
            },
        )
    }

    /// `alpha a + (1 - alpha) b`; both must share `z_max`.
    pub fn mixture(a: &Self, b: &Self, alpha: f64) -> Result<Self> {
        same_truncation(a, b)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("mixture weight {alpha}")));
        }
        let probs = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        let mix = |x: ExtReal, y: ExtReal| match (x, y) {
            (ExtReal::Finite(x), ExtReal::Finite(y)) => ExtReal::Finite(alpha * x + (1.0 - alpha) * y),
            _ => ExtReal::Infinite,
        };
        let tail = TailMoments {
            theta: mix(a.tail.theta, b.tail.theta),
            first: mix(a.tail.first, b.tail.first),
        };
        Self::with_tail(probs, alpha * a.tail_mass + (1.0 - alpha) * b.tail_mass, tail)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn z_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn tail_moments(&self) -> TailMoments {
        self.tail
    }

    /// Probability of state `z`; zero beyond the truncation.
    pub fn prob(&self, z: usize) -> f64 {
        self.probs.get(z).copied().unwrap_or(0.0)
    }

    /// Largest state carrying positive mass.
    pub fn support_max(&self) -> usize {
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Moves the representation to another truncation level. Mass above a
    /// lower level is folded into the tail together with its exact moments.
    pub fn retruncate(&self, z_max: usize) -> Self {
        let mut probs = self.probs.clone();
        let mut tail_mass = self.tail_mass;
        let mut tail = self.tail;
        if z_max + 1 < probs.len() {
            let cut: Vec<f64> = probs.split_off(z_max + 1);
            let mass: f64 = cut.iter().sum();
            if mass > 0.0 {
                let th: f64 = cut.iter().enumerate().map(|(i, p)| theta(z_max + 1 + i) * p).sum();
                let fm: f64 = cut.iter().enumerate().map(|(i, p)| (z_max + 1 + i) as f64 * p).sum();
                let base = if tail_mass > 0.0 { tail } else { TailMoments::NONE };
                tail = TailMoments {
                    theta: base.theta + ExtReal::Finite(th),
                    first: base.first + ExtReal::Finite(fm),
                };
                tail_mass += mass;
            }
        } else {
            probs.resize(z_max + 1, 0.0);
        }
        Self { probs, tail_mass, tail: if tail_mass > 0.0 { tail } else { TailMoments::NONE } }
    }

    /// Drops the tail and rescales the truncated part to unit mass.
    pub fn without_tail(&self) -> Self {
        if self.tail_mass == 0.0 {
            return self.clone();
        }
        let s: f64 = self.probs.iter().sum();
        Self {
            probs: self.probs.iter().map(|p| p / s).collect(),
            tail_mass: 0.0,
            tail: TailMoments::NONE,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("z,prob\n");
        for (z, p) in self.probs.iter().enumerate() {
            out.push_str(&format!("{z},{}\n", fmt_real(*p)));
        }
        if self.tail_mass > 0.0 {
            out.push_str(&format!("tail,{}\n", fmt_real(self.tail_mass)));
        }
        out
    }

    /// Reads the `z,prob` format. States must appear in order `0, 1, ...`;
    /// a tail row, if present, marks its moments as unknown.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        match lines.next() {
            Some((_, h)) if h.replace(' ', "") == "z,prob" => {}
            Some((line, h)) => {
                return Err(Error::Parse { line, msg: format!("expected header z,prob, got {h:?}") })
            }
            None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
        }
        let mut probs = Vec::new();
        let mut tail_mass = 0.0;
        let mut seen_tail = false;
        for (line, l) in lines {
            let (key, val) = l.split_once(',').ok_or(Error::Parse {
                line,
                msg: "expected two fields".into(),
            })?;
            if seen_tail {
                return Err(Error::Parse { line, msg: "rows after tail row".into() });
            }
            if key.trim() == "tail" {
                tail_mass = parse_real(val, line)?;
                seen_tail = true;
                continue;
            }
            let z = parse_index(key, line)?;
            if z != probs.len() {
                return Err(Error::Parse { line, msg: format!("expected state {}, got {z}", probs.len()) });
            }
            probs.push(parse_real(val, line)?);
        }
        let total: f64 = probs.iter().sum::<f64>() + tail_mass;
        if (total - 1.0).abs() > FILE_MASS_TOL {
            return Err(Error::InvalidDistribution(format!("file total mass {total}")));
        }
        if (total - 1.0).abs() > MASS_TOL {
            probs.iter_mut().for_each(|p| *p /= total);
            tail_mass /= total;
        }
        Self::with_tail(probs, tail_mass, TailMoments::UNKNOWN)
    }
}

fn same_truncation(a: &StateDistribution, b: &StateDistribution) -> Result<()> {
    if a.z_max() != b.z_max() {
        return Err(Error::TruncationMismatch { left: a.z_max(), right: b.z_max() });
    }
    Ok(())
}

/// Half-L1 distance, with the tails compared as one extra label.
pub fn tv_distance(a: &StateDistribution, b: &StateDistribution) -> Result<f64> {
    same_truncation(a, b)?;
    let body: f64 = a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum();
    Ok((0.5 * (body + (a.tail_mass - b.tail_mass).abs())).min(1.0))
}

pub fn theta_moment(a: &StateDistribution) -> ExtReal {
    let body: f64 = a.probs.iter().enumerate().map(|(z, p)| theta(z) * p).sum();
    ExtReal::Finite(body) + a.tail.theta
}

pub fn first_moment(a: &StateDistribution) -> ExtReal {
    let body: f64 = a.probs.iter().enumerate().map(|(z, p)| z as f64 * p).sum();
    ExtReal::Finite(body) + a.tail.first
}

/// `sum zeta log(zeta / nu)`, infinite when `zeta` is not absolutely
/// continuous with respect to `nu`. Tails count as one extra label.
pub fn relative_entropy(zeta: &StateDistribution, nu: &StateDistribution) -> Result<ExtReal> {
    same_truncation(zeta, nu)?;
    let pairs = zeta
        .probs
        .iter()
        .zip(&nu.probs)
        .chain(std::iter::once((&zeta.tail_mass, &nu.tail_mass)));
    let mut sum = 0.0;
    for (&p, &q) in pairs {
        if p > 0.0 {
            if q <= 0.0 {
                return Ok(ExtReal::Infinite);
            }
            sum += p * (p / q).ln();
        }
    }
    Ok(ExtReal::Finite(sum.max(0.0)))
}

/// Parameters of the two compact classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    m: f64,
    delta: f64,
}

impl ClassParams {
    pub fn new(m: f64, delta: f64) -> Result<Self> {
        if !(m > 0.0) || !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("class params M={m}, delta={delta}")));
        }
        Ok(Self { m, delta })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

pub fn in_class_km(a: &StateDistribution, m: f64) -> bool {
    theta_moment(a).le(ExtReal::Finite(m))
}

pub fn in_class_kdelta(a: &StateDistribution, xi_star: &StateDistribution, delta: f64) -> Result<bool> {
    if tv_distance(a, xi_star)? > delta {
        return Ok(false);
    }
    Ok(match (theta_moment(a), theta_moment(xi_star)) {
        (ExtReal::Finite(x), ExtReal::Finite(y)) => (x - y).abs() <= delta,
        _ => false,
    })
}

/// Minimizer and value of the relative entropy over a TV ball.
#[derive(Debug, Clone)]
pub struct SanovSolution {
    pub value: ExtReal,
    pub zeta: Option<StateDistribution>,
}

/// `inf { I(zeta | nu) : d(zeta, center) <= delta }` over `zeta` supported on
/// `{0..z_max}`.
///
/// The optimality conditions force `zeta(z) = clamp(center(z), a nu(z), b nu(z))`
/// for two scalars `a <= b`; with the ball constraint active the excess over
/// the center depends on `a` only and the deficit on `b` only, and each must
/// equal `delta`. Both are piecewise linear and solved exactly.
pub fn sanov_projection(
    nu: &StateDistribution,
    center: &StateDistribution,
    delta: f64,
    z_max: usize,
) -> Result<SanovSolution> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameter(format!("ball radius {delta}")));
    }
    let nu = nu.retruncate(z_max);
    let center = center.retruncate(z_max);
    let n = &nu.probs;
    let c = &center.probs;
    let n_total: f64 = n.iter().sum();
    if n_total <= 0.0 {
        return Ok(SanovSolution { value: ExtReal::Infinite, zeta: None });
    }

    let unconstrained: Vec<f64> = n.iter().map(|x| x / n_total).collect();
    let excess_at = |zeta: &[f64]| -> f64 {
        zeta.iter().zip(c).map(|(z, c)| (z - c).max(0.0)).sum::<f64>()
    };
    if excess_at(&unconstrained) <= delta {
        let zeta = StateDistribution::new(unconstrained)?;
        return Ok(SanovSolution {
            value: ExtReal::Finite((-n_total.ln()).max(0.0)),
            zeta: Some(zeta),
        });
    }

    // Deficit that no finite b can remove: center mass where nu vanishes.
    let stuck: f64 = center.tail_mass
        + n.iter().zip(c).filter(|(n, _)| **n <= 0.0).map(|(_, c)| c).sum::<f64>();
    if stuck > delta {
        return Ok(SanovSolution { value: ExtReal::Infinite, zeta: None });
    }

    let mut ratios: Vec<(f64, f64, f64)> = n
        .iter()
        .zip(c)
        .filter(|(n, _)| **n > 0.0)
        .map(|(&n, &c)| (c / n, n, c))
        .collect();
    ratios.sort_by(|x, y| x.0.total_cmp(&y.0));

    // Excess E(a) = sum_{r < a} (a n - c), increasing piecewise linear.
    let a = {
        let (mut slope, mut offset) = (0.0, 0.0);
        let mut root = f64::NAN;
        for (i, &(r, nz, cz)) in ratios.iter().enumerate() {
            slope += nz;
            offset += cz;
            let next = ratios.get(i + 1).map_or(f64::INFINITY, |x| x.0);
            let cand = (delta + offset) / slope;
            if cand >= r && cand <= next {
                root = cand;
                break;
            }
        }
        root
    };
    // Deficit D(b) = stuck + sum_{r > b} (c - b n), decreasing piecewise linear.
    let b = {
        let (mut slope, mut offset) = (0.0, stuck);
        let mut root = f64::NAN;
        for (i, &(r, nz, cz)) in ratios.iter().enumerate().rev() {
            slope += nz;
            offset += cz;
            let prev = if i == 0 { 0.0 } else { ratios[i - 1].0 };
            let cand = (offset - delta) / slope;
            if cand <= r && cand >= prev {
                root = cand;
                break;
            }
        }
        if root.is_nan() {
            // Only reachable when delta equals the stuck deficit.
            ratios.last().map_or(0.0, |x| x.0)
        } else {
            root
        }
    };
    if !(a.is_finite() && b.is_finite() && a <= b * (1.0 + 1e-12)) {
        return Err(Error::InvalidParameter(format!(
            "ball projection failed to bracket (a={a}, b={b})"
        )));
    }

    let zeta: Vec<f64> = n
        .iter()
        .zip(c)
        .map(|(&n, &c)| if n <= 0.0 { 0.0 } else { c.clamp(a * n, b * n) })
        .collect();
    let value: f64 = zeta
        .iter()
        .zip(n)
        .filter(|(z, _)| **z > 0.0)
        .map(|(z, n)| z * (z / n).ln())
        .sum();
    let s: f64 = zeta.iter().sum();
    let zeta = StateDistribution::new(zeta.into_iter().map(|z| z / s).collect())?;
    Ok(SanovSolution { value: ExtReal::Finite(value.max(0.0)), zeta: Some(zeta) })
}

pub fn sanov_inf_over_ball(
    nu: &StateDistribution,
    center: &StateDistribution,
    delta: f64,
    z_max: usize,
) -> Result<ExtReal> {
    Ok(sanov_projection(nu, center, delta, z_max)?.value)
}
