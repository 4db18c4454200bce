//! Shared text-format helpers.

use crate::error::{Error, Result};

/// Fixed 17-significant-digit rendering used by every file output.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_real(field: &str, line: usize) -> Result<f64> {
    let t = field.trim();
    t.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("not a real number: {t:?}"),
    })
}

pub(crate) fn parse_index(field: &str, line: usize) -> Result<usize> {
    let t = field.trim();
    t.parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("not a state index: {t:?}"),
    })
}

/// Nonempty, non-comment lines paired with their 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}
