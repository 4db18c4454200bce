//! The named experiments. Each writes its files into a staging directory and
//! returns a summary that goes into the manifest.

use std::fs;
use std::path::Path;

use mfqp::cost::{cost_nonvariational, cost_variational, evolve, flux_from_path, random_trajectory};
use mfqp::io::fmt_real;
use mfqp::mckean_vlasov::{check_b2, find_equilibrium, sample_km_initial, B2Options};
use mfqp::measures::{sanov_inf_over_ball, StateDistribution};
use mfqp::models::{dominating_chain, RateModel};
use mfqp::quasipotential::{cm_bound, counterexample_report, v_upper_bound, VBound};
use mfqp::simulator::{
    default_burn_in, estimate_invariant, estimate_rate_curve, ks_dominance, stream_rng, theta_moment_samples, Event,
    RateEstimate, SimConfig,
};
use mfqp::{ExtReal, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig};

const EQUILIBRIUM_TOL: f64 = 1e-13;

pub fn run(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    match cfg.experiment {
        Experiment::Counterexample => counterexample(cfg, model, dir),
        Experiment::RateCurve => rate_curve(cfg, model, dir),
        Experiment::MveAudit => mve_audit(cfg, model, dir),
        Experiment::QuasipotentialBounds => quasipotential_bounds(cfg, model, dir),
        Experiment::DualityCheck => duality_check(cfg, model, dir),
        Experiment::TightnessAudit => tightness_audit(cfg, model, dir),
    }
}

fn ext(x: ExtReal) -> String {
    match x {
        ExtReal::Finite(v) => fmt_real(v),
        ExtReal::Infinite => "inf".into(),
    }
}

fn write(dir: &Path, name: &str, body: String) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}

fn counterexample(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let ks: Vec<usize> = cfg.params.ints("K_list").into_iter().map(|k| k as usize).collect();
    let horizons = cfg.params.reals("horizons");
    let report = counterexample_report(model, &ks, &horizons)?;
    let mut csv = String::from("K,entropy,theta_moment,horizon,test_function,n,lower_bound\n");
    for row in &report.rows {
        for b in &row.bounds {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.k,
                ext(row.entropy),
                fmt_real(row.theta_moment),
                fmt_real(b.horizon),
                b.kind.as_str(),
                b.n,
                fmt_real(b.value)
            ));
        }
    }
    write(dir, "counterexample.csv", csv)?;
    Ok(json!({
        "model": report.model,
        "lower_bound_growth": fmt_real(report.lower_bound_growth),
        "divergence_ratio": report.divergence_ratio.map(fmt_real),
        "entropy_change": fmt_real(report.entropy_change),
    }))
}

fn rate_curve(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let p = &cfg.params;
    let z_max = cfg.model.z_max;
    let center = match p.word("center") {
        "equilibrium" => find_equilibrium(model, z_max, EQUILIBRIUM_TOL)?,
        _ => StateDistribution::point_mass(0, z_max)?,
    };
    let event = match p.word("event") {
        "all" => Event::All,
        "theta_above" => Event::ThetaMomentAbove(p.real("M")),
        _ => Event::TvBall { center: center.clone(), radius: p.real("radius") },
    };
    let seed = p.int("seed");
    let curve = estimate_rate_curve(model, &event, &p.ints("N_list"), p.int("samples_per_N"), seed)?;
    let mut csv = format!("{}\n", RateEstimate::CSV_HEADER);
    for r in &curve {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(dir, "rate_curve.csv", csv)?;
    let sanov = match (&event, model.interacting()) {
        (Event::TvBall { center, radius }, false) => {
            let star = find_equilibrium(model, z_max, EQUILIBRIUM_TOL)?;
            Some(ext(sanov_inf_over_ball(&star, center, *radius, z_max)?))
        }
        _ => None,
    };
    Ok(json!({
        "event": event.describe(),
        "seed": seed,
        "sanov_reference": sanov,
        "lower_bound_only": curve.iter().filter(|r| r.lower_bound_only).map(|r| r.n).collect::<Vec<_>>(),
    }))
}

fn mve_audit(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let p = &cfg.params;
    let mut opts = B2Options::new(p.real("M"), p.real("horizon"), p.int("n_samples") as usize, p.int("seed"));
    opts.z_max = cfg.model.z_max;
    opts.threshold = p.real("threshold");
    opts.tol = p.real("tolerance");
    let report = check_b2(model, &opts)?;
    let mut csv = String::from("t,sup_tv,sup_theta_gap\n");
    for ((t, tv), gap) in report.grid.iter().zip(&report.sup_tv).zip(&report.sup_theta_gap) {
        csv.push_str(&format!("{},{},{}\n", fmt_real(*t), fmt_real(*tv), fmt_real(*gap)));
    }
    write(dir, "b2_audit.csv", csv)?;
    write(dir, "equilibrium.csv", find_equilibrium(model, opts.z_max, EQUILIBRIUM_TOL)?.to_csv())?;
    Ok(json!({
        "passed": report.passed,
        "statement": report.statement,
        "terminal_spread": fmt_real(report.terminal_spread),
        "terminal_theta_gap": fmt_real(report.terminal_theta_gap),
        "initial_conditions": report.initial_theta_moments.len(),
    }))
}

fn quasipotential_bounds(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let p = &cfg.params;
    let z_max = cfg.model.z_max;
    let n = p.int("n_targets");
    let targets: Vec<StateDistribution> = (0..n)
        .map(|i| sample_km_initial(&mut stream_rng(p.int("seed"), i), p.real("M"), z_max))
        .collect();
    let refine = p.flag("refine");
    let bounds: Vec<(VBound, f64)> = targets
        .par_iter()
        .map(|t| Ok((v_upper_bound(model, t, refine)?, cm_bound(model, t)?)))
        .collect::<Result<_>>()?;
    let mut csv = String::from("target,upper,lower,cm_bound,lower_T,lower_n,lower_kind,label\n");
    for (i, (b, c)) in bounds.iter().enumerate() {
        let stem = format!("target_{i:03}");
        b.write_files(dir, &stem)?;
        csv.push_str(&format!(
            "{stem},{},{},{},{},{},{},{}\n",
            ext(b.upper),
            fmt_real(b.lower),
            fmt_real(*c),
            fmt_real(b.lower_params.horizon),
            b.lower_params.n,
            b.lower_params.kind.as_str(),
            VBound::LABEL
        ));
    }
    write(dir, "bounds.csv", csv)?;
    let above = bounds.iter().filter(|(b, c)| b.upper.to_f64() > *c).count();
    Ok(json!({ "targets": n, "witnesses_above_cm_bound": above, "refined": refine }))
}

fn duality_check(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let p = &cfg.params;
    let z_max = cfg.model.z_max;
    let tol = p.real("tolerance");
    let rows: Vec<(f64, f64, f64, bool)> = (0..p.int("n_trajectories"))
        .into_par_iter()
        .map(|i| {
            let traj = random_trajectory(model, &mut stream_rng(p.int("seed"), i), z_max);
            fs::write(dir.join(format!("trajectory_{i:03}.txt")), traj.to_text())?;
            let path = evolve(&traj)?;
            let var = cost_variational(model, &path)?;
            let nonvar = cost_nonvariational(model, &flux_from_path(model, &path)?)?;
            Ok((traj.duration(), var.value.to_f64(), nonvar.to_f64(), var.converged))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("index,duration,variational,nonvariational,abs_diff,converged\n");
    let mut worst = 0.0f64;
    for (i, (d, v, n, ok)) in rows.iter().enumerate() {
        worst = worst.max((v - n).abs());
        csv.push_str(&format!(
            "{i},{},{},{},{},{ok}\n",
            fmt_real(*d),
            fmt_real(*v),
            fmt_real(*n),
            fmt_real((v - n).abs())
        ));
    }
    write(dir, "duality.csv", csv)?;
    Ok(json!({ "max_abs_diff": fmt_real(worst), "tolerance": fmt_real(tol), "within_tolerance": worst < tol }))
}

fn tightness_audit(cfg: &ExperimentConfig, model: &RateModel, dir: &Path) -> Result<Value> {
    let p = &cfg.params;
    let z_max = cfg.model.z_max;
    let seed = p.int("seed");
    let config = SimConfig {
        n: p.int("N"),
        seed,
        horizon: p.real("horizon"),
        burn_in: p.real_or_default("burn_in").unwrap_or_else(|| default_burn_in(model)),
        z_max,
        thinning: 1.0,
    };
    config.validate()?;
    let star = find_equilibrium(model, z_max, EQUILIBRIUM_TOL)?;
    let mut events = vec![Event::TvBall { center: star, radius: p.real("delta") }];
    events.extend(p.reals("M_list").into_iter().map(Event::ThetaMomentAbove));
    let estimates: Vec<RateEstimate> = events
        .par_iter()
        .enumerate()
        .map(|(i, e)| estimate_invariant(model, &SimConfig { seed: seed.wrapping_add(i as u64), ..config.clone() }, e))
        .collect::<Result<_>>()?;
    let mut csv = format!("{}\n", RateEstimate::CSV_HEADER);
    for r in &estimates {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(dir, "tightness.csv", csv)?;

    let dominating = dominating_chain(model)?;
    let mut sample_cfg = config.clone();
    sample_cfg.thinning = 2.0;
    let a = theta_moment_samples(model, &sample_cfg, 1)?;
    let b = theta_moment_samples(&dominating, &sample_cfg, 2)?;
    let ks = ks_dominance(&a, &b);
    let tail_rates: Vec<f64> = estimates[1..].iter().map(|r| r.rate).collect();
    Ok(json!({
        "concentration_p_hat": fmt_real(estimates[0].p_hat),
        "tail_rates": tail_rates.iter().map(|r| fmt_real(*r)).collect::<Vec<_>>(),
        "tail_rates_increasing": tail_rates.windows(2).all(|w| w[1] > w[0]),
        "dominance": {
            "statistic": fmt_real(ks.statistic),
            "critical": fmt_real(ks.critical),
            "dominated": ks.dominated,
        },
    }))
}
