//! Flat `key = value` configuration with `[model]` and `[experiment]`
//! sections, typed against a per-experiment key schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mfqp::models::{interacting_wlan_model, mm1_model, wlan_const_model, wlan_decay_model, EdgeKind, RateModel};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Counterexample,
    RateCurve,
    MveAudit,
    QuasipotentialBounds,
    DualityCheck,
    TightnessAudit,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Counterexample,
        Experiment::RateCurve,
        Experiment::MveAudit,
        Experiment::QuasipotentialBounds,
        Experiment::DualityCheck,
        Experiment::TightnessAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Counterexample => "counterexample",
            Experiment::RateCurve => "rate_curve",
            Experiment::MveAudit => "mve_audit",
            Experiment::QuasipotentialBounds => "quasipotential_bounds",
            Experiment::DualityCheck => "duality_check",
            Experiment::TightnessAudit => "tightness_audit",
        }
    }

    /// Experiment-specific keys of the `[experiment]` section.
    fn keys(self) -> &'static [KeySpec] {
        use Kind::*;
        match self {
            Experiment::Counterexample => const { &[
                KeySpec::required("K_list", IntList),
                KeySpec::optional("horizons", RealList, "1"),
            ] },
            Experiment::RateCurve => const { &[
                KeySpec::required("N_list", IntList),
                KeySpec::required("samples_per_N", Int),
                KeySpec::required("seed", Int),
                KeySpec::optional("event", Word(&["all", "tv_ball", "theta_above"]), "tv_ball"),
                KeySpec::optional("center", Word(&["delta0", "equilibrium"]), "delta0"),
                KeySpec::optional("radius", Real, "0.1"),
                KeySpec::optional("M", Real, "2"),
            ] },
            Experiment::MveAudit => const { &[
                KeySpec::optional("M", Real, "5"),
                KeySpec::optional("horizon", Real, "40"),
                KeySpec::optional("n_samples", Int, "20"),
                KeySpec::optional("seed", Int, "0"),
                KeySpec::optional("threshold", Real, "1e-3"),
                KeySpec::optional("tolerance", Real, "1e-10"),
            ] },
            Experiment::QuasipotentialBounds => const { &[
                KeySpec::optional("n_targets", Int, "10"),
                KeySpec::optional("M", Real, "5"),
                KeySpec::optional("seed", Int, "0"),
                KeySpec::optional("refine", Bool, "false"),
            ] },
            Experiment::DualityCheck => const { &[
                KeySpec::optional("n_trajectories", Int, "10"),
                KeySpec::optional("seed", Int, "0"),
                KeySpec::optional("tolerance", Real, "1e-5"),
            ] },
            Experiment::TightnessAudit => const { &[
                KeySpec::optional("N", Int, "50"),
                KeySpec::required("horizon", Real),
                KeySpec::optional("burn_in", Real, "default"),
                KeySpec::required("seed", Int),
                KeySpec::optional("delta", Real, "0.1"),
                KeySpec::optional("M_list", RealList, "2, 4, 6"),
            ] },
        }
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
            format!("unknown experiment '{s}' (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Real,
    Int,
    Bool,
    IntList,
    RealList,
    Word(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
struct KeySpec {
    name: &'static str,
    kind: Kind,
    default: Option<&'static str>,
}

impl KeySpec {
    const fn required(name: &'static str, kind: Kind) -> Self {
        Self { name, kind, default: None }
    }

    const fn optional(name: &'static str, kind: Kind, default: &'static str) -> Self {
        Self { name, kind, default: Some(default) }
    }
}

/// One validation finding, tied to the key or line it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Problem {
    pub location: String,
    pub message: String,
}

impl Problem {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self { location: location.into(), message: message.into() }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }
}

/// Splits the text into sections. Comments start with `#` or `;`.
pub fn parse(text: &str) -> Result<RawConfig, Vec<Problem>> {
    let mut raw = RawConfig::default();
    let mut problems = Vec::new();
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let at = format!("line {}", i + 1);
        let line = line.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if name != "model" && name != "experiment" {
                problems.push(Problem::new(at, format!("unknown section [{name}]")));
                current = None;
                continue;
            }
            if raw.sections.contains_key(name) {
                problems.push(Problem::new(at, format!("section [{name}] repeated")));
            }
            raw.sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(Problem::new(at, "expected 'key = value'"));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(section) = &current else {
            problems.push(Problem::new(at, format!("key '{key}' outside a section")));
            continue;
        };
        if key.is_empty() {
            problems.push(Problem::new(at, "empty key"));
            continue;
        }
        let entries = raw.sections.get_mut(section).expect("section registered");
        if entries.insert(key.to_string(), value.to_string()).is_some() {
            problems.push(Problem::new(at, format!("key '{key}' repeated")));
        }
    }
    if problems.is_empty() {
        Ok(raw)
    } else {
        Err(problems)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub lambda_f: Option<f64>,
    pub lambda_b: Option<f64>,
    pub kappa: Option<f64>,
    pub z_max: usize,
}

impl ModelSpec {
    pub fn build(&self) -> mfqp::Result<RateModel> {
        let pair = || (self.lambda_f.unwrap_or(f64::NAN), self.lambda_b.unwrap_or(f64::NAN));
        match self.name.as_str() {
            "mm1" => mm1_model(pair().0, pair().1),
            "wlan_const" => wlan_const_model(pair().0, pair().1),
            "wlan_decay" => wlan_decay_model(pair().0, pair().1),
            _ => interacting_wlan_model(self.kappa.unwrap_or(f64::NAN)),
        }
    }
}

/// Typed experiment parameters after defaults are applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Params(BTreeMap<String, String>);

impl Params {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).unwrap_or_else(|| panic!("key '{key}' is in the schema"))
    }

    pub fn real(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated")
    }

    /// `None` when the key holds the word `default`.
    pub fn real_or_default(&self, key: &str) -> Option<f64> {
        match self.raw(key) {
            "default" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    pub fn int(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn word(&self, key: &str) -> &str {
        self.raw(key)
    }

    pub fn ints(&self, key: &str) -> Vec<u64> {
        split_list(self.raw(key)).map(|v| v.parse().expect("validated")).collect()
    }

    pub fn reals(&self, key: &str) -> Vec<f64> {
        split_list(self.raw(key)).map(|v| v.parse().expect("validated")).collect()
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelSpec,
    pub params: Params,
    pub output_dir: Option<PathBuf>,
    pub raw: RawConfig,
}

fn check_kind(kind: Kind, value: &str) -> Result<(), String> {
    let real = |v: &str| match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(()),
        _ => Err(format!("'{v}' is not a finite real")),
    };
    let int = |v: &str| v.parse::<u64>().map(|_| ()).map_err(|_| format!("'{v}' is not a nonnegative integer"));
    match kind {
        Kind::Real if value == "default" => Ok(()),
        Kind::Real => real(value),
        Kind::Int => int(value),
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(format!("'{value}' is not true or false")),
        },
        Kind::IntList | Kind::RealList => {
            let items: Vec<&str> = split_list(value).collect();
            if items.is_empty() {
                return Err("empty list".into());
            }
            items.into_iter().try_for_each(|v| if matches!(kind, Kind::IntList) { int(v) } else { real(v) })
        }
        Kind::Word(words) if words.contains(&value) => Ok(()),
        Kind::Word(words) => Err(format!("'{value}' is not one of {}", words.join(", "))),
    }
}

const MODELS: [&str; 4] = ["mm1", "wlan_const", "wlan_decay", "interacting_wlan"];

/// Schema and cross-field validation. Returns the typed config only when the
/// problem list is empty.
pub fn validate(raw: &RawConfig) -> (Option<ExperimentConfig>, Vec<Problem>) {
    let mut problems = Vec::new();
    for section in ["model", "experiment"] {
        if !raw.sections.contains_key(section) {
            problems.push(Problem::new(format!("[{section}]"), "missing section"));
        }
    }

    // Model block.
    let model_name = raw.get("model", "model").unwrap_or("");
    let model_keys: &[&str] = match model_name {
        "mm1" | "wlan_const" | "wlan_decay" => &["model", "lambda_f", "lambda_b", "z_max"],
        "interacting_wlan" => &["model", "kappa", "z_max"],
        "" => {
            problems.push(Problem::new("model.model", "missing"));
            &["model", "lambda_f", "lambda_b", "kappa", "z_max"]
        }
        other => {
            problems.push(Problem::new("model.model", format!("unknown model '{other}' (expected one of {})", MODELS.join(", "))));
            &["model", "lambda_f", "lambda_b", "kappa", "z_max"]
        }
    };
    if let Some(entries) = raw.sections.get("model") {
        for key in entries.keys() {
            if !model_keys.contains(&key.as_str()) {
                problems.push(Problem::new(format!("model.{key}"), "unknown key for this model"));
            }
        }
    }
    let model_real = |key: &str, problems: &mut Vec<Problem>| -> Option<f64> {
        let v = raw.get("model", key)?;
        match check_kind(Kind::Real, v) {
            Ok(()) if v != "default" => Some(v.parse().expect("checked")),
            Ok(()) => None,
            Err(e) => {
                problems.push(Problem::new(format!("model.{key}"), e));
                None
            }
        }
    };
    let lambda_f = model_real("lambda_f", &mut problems);
    let lambda_b = model_real("lambda_b", &mut problems);
    let kappa = model_real("kappa", &mut problems);
    let z_max = match raw.get("model", "z_max") {
        None => 30,
        Some(v) => match v.parse::<usize>() {
            Ok(z) if z >= 2 => z,
            _ => {
                problems.push(Problem::new("model.z_max", format!("'{v}' is not an integer >= 2")));
                30
            }
        },
    };
    for key in model_keys.iter().filter(|k| !matches!(**k, "model" | "z_max")) {
        if raw.get("model", key).is_none() && MODELS.contains(&model_name) {
            problems.push(Problem::new(format!("model.{key}"), "missing"));
        }
    }
    let model = ModelSpec { name: model_name.to_string(), lambda_f, lambda_b, kappa, z_max };
    let built = if MODELS.contains(&model_name) && problems.iter().all(|p| !p.location.starts_with("model.")) {
        match model.build() {
            Ok(m) => Some(m),
            Err(e) => {
                problems.push(Problem::new("[model]", e.to_string()));
                None
            }
        }
    } else {
        None
    };

    // Experiment block.
    let experiment = match raw.get("experiment", "experiment") {
        None => {
            problems.push(Problem::new("experiment.experiment", "missing"));
            None
        }
        Some(v) => match v.parse::<Experiment>() {
            Ok(e) => Some(e),
            Err(msg) => {
                problems.push(Problem::new("experiment.experiment", msg));
                None
            }
        },
    };
    let mut params = BTreeMap::new();
    if let Some(exp) = experiment {
        let specs = exp.keys();
        let entries = raw.sections.get("experiment").cloned().unwrap_or_default();
        for key in entries.keys() {
            if key != "experiment" && key != "output_dir" && !specs.iter().any(|s| s.name == key) {
                problems.push(Problem::new(format!("experiment.{key}"), format!("unknown key for {}", exp.name())));
            }
        }
        for spec in specs {
            match (entries.get(spec.name), spec.default) {
                (Some(v), _) => match check_kind(spec.kind, v) {
                    Ok(()) => {
                        params.insert(spec.name.to_string(), v.clone());
                    }
                    Err(e) => problems.push(Problem::new(format!("experiment.{}", spec.name), e)),
                },
                (None, Some(d)) => {
                    params.insert(spec.name.to_string(), d.to_string());
                }
                (None, None) => problems.push(Problem::new(format!("experiment.{}", spec.name), "missing")),
            }
        }
        let params = Params(params.clone());
        cross_check(exp, &params, built.as_ref(), &mut problems);
    }
    let output_dir = raw.get("experiment", "output_dir").map(PathBuf::from);
    if output_dir.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
        problems.push(Problem::new("experiment.output_dir", "empty path"));
    }

    if !problems.is_empty() {
        return (None, problems);
    }
    let config = ExperimentConfig {
        experiment: experiment.expect("no problems"),
        model,
        params: Params(params),
        output_dir,
        raw: raw.clone(),
    };
    (Some(config), problems)
}

fn cross_check(exp: Experiment, params: &Params, model: Option<&RateModel>, problems: &mut Vec<Problem>) {
    let has = |k: &str| params.0.contains_key(k);
    let positive_real = |k: &str, problems: &mut Vec<Problem>| {
        if has(k) && params.real_or_default(k).is_some_and(|x| !(x > 0.0)) {
            problems.push(Problem::new(format!("experiment.{k}"), "must be positive"));
        }
    };
    for k in ["N_list", "K_list"] {
        if has(k) && params.ints(k).contains(&0) {
            problems.push(Problem::new(format!("experiment.{k}"), "contains zero"));
        }
    }
    for k in ["samples_per_N", "N", "n_targets", "n_trajectories"] {
        if has(k) && params.int(k) == 0 {
            problems.push(Problem::new(format!("experiment.{k}"), "must be at least 1"));
        }
    }
    for k in ["horizon", "M", "threshold", "tolerance", "delta", "radius"] {
        positive_real(k, problems);
    }
    if has("horizons") && params.reals("horizons").iter().any(|t| !(*t > 0.0)) {
        problems.push(Problem::new("experiment.horizons", "horizons must be positive"));
    }
    if has("M_list") && params.reals("M_list").iter().any(|m| !(*m > 0.0)) {
        problems.push(Problem::new("experiment.M_list", "levels must be positive"));
    }
    if has("K_list") && params.ints("K_list").iter().any(|&k| k < 2) {
        problems.push(Problem::new("experiment.K_list", "truncations must be at least 2"));
    }
    if has("burn_in") && has("horizon") {
        if let (Some(b), Some(h)) = (params.real_or_default("burn_in"), params.real_or_default("horizon")) {
            if !(b >= 0.0 && b < h) {
                problems.push(Problem::new("experiment.burn_in", "must lie in [0, horizon)"));
            }
        }
    }
    let Some(model) = model else { return };
    match exp {
        Experiment::Counterexample if model.closed_form_stationary(2).is_none() => problems.push(Problem::new(
            "model.model",
            format!("counterexample needs a non-interacting geometric system (mm1 or wlan_const), got {}", model.name()),
        )),
        Experiment::QuasipotentialBounds | Experiment::MveAudit
            if model.edge_kind() != EdgeKind::ChainWithResets || model.bounds().is_none() =>
        {
            problems.push(Problem::new(
                "model.model",
                format!("{} needs a model with reset edges and uniform rate bounds, got {}", exp.name(), model.name()),
            ))
        }
        Experiment::TightnessAudit if model.edge_kind() != EdgeKind::ChainWithResets => problems.push(Problem::new(
            "model.model",
            format!("tightness_audit compares against the dominating chain, which needs reset edges; got {}", model.name()),
        )),
        _ => {}
    }
    if let mfqp::models::ModelKind::Mm1 { lambda_f, lambda_b } = model.kind() {
        if lambda_f >= lambda_b {
            problems.push(Problem::new("[model]", "mm1 needs lambda_f < lambda_b for a stationary law"));
        }
    }
}
