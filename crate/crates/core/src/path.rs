//! Time-indexed sequences of distributions, read as piecewise-linear curves.

use crate::error::{Error, Result};
use crate::io::{content_lines, fmt_real, parse_index, parse_real};
use crate::measures::StateDistribution;

/// Samples of a measure-valued curve; between samples the curve is the
/// linear interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePath {
    pub times: Vec<f64>,
    pub states: Vec<StateDistribution>,
}

impl TimePath {
    pub fn new(times: Vec<f64>, states: Vec<StateDistribution>) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(Error::InvalidParameter("path needs matching nonempty times and states".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("path times must be strictly increasing".into()));
        }
        let k = states[0].z_max();
        if let Some(s) = states.iter().find(|s| s.z_max() != k) {
            return Err(Error::TruncationMismatch { left: k, right: s.z_max() });
        }
        Ok(Self { times, states })
    }

    pub fn z_max(&self) -> usize {
        self.states[0].z_max()
    }

    pub fn start(&self) -> &StateDistribution {
        &self.states[0]
    }

    pub fn end(&self) -> &StateDistribution {
        self.states.last().expect("nonempty path")
    }

    pub fn duration(&self) -> f64 {
        self.times.last().unwrap() - self.times[0]
    }

    /// Linear interpolation, clamped to the time range.
    pub fn probs_at(&self, t: f64) -> Vec<f64> {
        let i = match self.times.partition_point(|&s| s <= t) {
            0 => return self.states[0].probs().to_vec(),
            i if i >= self.times.len() => return self.end().probs().to_vec(),
            i => i - 1,
        };
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.states[i]
            .probs()
            .iter()
            .zip(self.states[i + 1].probs())
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Long-format CSV `t,z,prob`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,z,prob\n");
        for (t, s) in self.times.iter().zip(&self.states) {
            let t = fmt_real(*t);
            for (z, p) in s.probs().iter().enumerate() {
                out.push_str(&format!("{t},{z},{}\n", fmt_real(*p)));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        match lines.next() {
            Some((_, h)) if h.replace(' ', "") == "t,z,prob" => {}
            _ => return Err(Error::Parse { line: 1, msg: "expected header t,z,prob".into() }),
        }
        let mut times: Vec<f64> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, l) in lines {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Parse { line, msg: "expected three fields".into() });
            }
            let (t, z, p) = (parse_real(f[0], line)?, parse_index(f[1], line)?, parse_real(f[2], line)?);
            if times.last() != Some(&t) {
                times.push(t);
                rows.push(Vec::new());
            }
            let row = rows.last_mut().unwrap();
            if z != row.len() {
                return Err(Error::Parse { line, msg: format!("expected state {}, got {z}", row.len()) });
            }
            row.push(p);
        }
        let states = rows.into_iter().map(StateDistribution::new).collect::<Result<Vec<_>>>()?;
        Self::new(times, states)
    }
}
