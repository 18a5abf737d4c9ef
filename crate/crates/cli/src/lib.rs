//! Subcommand implementations behind the `stochflow` binary.
//!
//! Every command writes its tables and a `summary.json` into a run directory
//! and closes it with a manifest. Check commands report pass/fail through
//! [`Outcome::passed`]; the binary maps that onto its exit code.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use stochflow_core::diagnostics::{
    circulation_transport_decomposition, energy_ledger, kelvin_residual, weber_label_grid, weber_pullback,
    cauchy_residual,
};
use stochflow_core::ensemble::{conditional_kelvin_members, run_sweep};
use stochflow_core::flow::{
    advect, evolve_deformation, jacobian_formula_check, label_lattice, solve_back_to_labels, volume_defect,
};
use stochflow_core::lie::run_identity_suite;
use stochflow_core::output::fmt_f64;
use stochflow_core::spde::run;
use stochflow_core::{
    AdvectOptions, BrownianDriver, FieldTrajectory, Flavor, NoiseBasis, RunConfig, RunDir, SpectralField,
    SweepKind, Table, VelocitySource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Identities,
    Run,
    Kelvin,
    Energy,
    Weber,
    Cikelvin,
    Jacobian,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Identities => "identities",
            Command::Run => "run",
            Command::Kelvin => "kelvin",
            Command::Energy => "energy",
            Command::Weber => "weber",
            Command::Cikelvin => "cikelvin",
            Command::Jacobian => "jacobian",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    /// `false` when a configured tolerance was exceeded.
    pub passed: bool,
    pub summary: Value,
}

/// Runs `cmd` and writes its artifacts under `out`.
pub fn dispatch(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut dir = RunDir::create(out)?;
    let outcome = match cmd {
        Command::Identities => identities(cfg, &mut dir)?,
        Command::Run => run_cmd(cfg, &mut dir)?,
        Command::Kelvin => kelvin(cfg, &mut dir)?,
        Command::Energy => energy(cfg, &mut dir)?,
        Command::Weber => weber(cfg, &mut dir)?,
        Command::Cikelvin => cikelvin(cfg, &mut dir)?,
        Command::Jacobian => jacobian(cfg, &mut dir)?,
        Command::Sweep => sweep(cfg, &mut dir)?,
    };
    let mut summary = outcome.summary;
    summary["passed"] = json!(outcome.passed);
    dir.write_json("summary.json", &summary)?;
    dir.finish(cmd.name(), cfg)?;
    Ok(Outcome { passed: outcome.passed, summary })
}

fn within(value: f64, tol: Option<f64>) -> bool {
    tol.map_or(true, |t| value <= t)
}

struct Setup {
    basis: std::sync::Arc<NoiseBasis>,
    model: stochflow_core::ModelSpec,
    u0: SpectralField,
    driver: BrownianDriver,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let grid = cfg.build_grid()?;
    let basis = cfg.build_basis(&grid)?;
    let model = cfg.build_model(basis.clone())?;
    let u0 = cfg.build_initial(&grid)?;
    let driver = cfg.build_driver(&basis)?;
    Ok(Setup { basis, model, u0, driver })
}

fn solve(s: &Setup, cfg: &RunConfig, stride: usize) -> Result<FieldTrajectory> {
    run(&s.model, &s.u0, cfg.time.t_final, &s.driver, cfg.time.scheme, stride)
        .context("field solve failed")
}

fn identities(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let tol = cfg.diagnostics.tolerance.unwrap_or(1e-10);
    let reports = run_identity_suite(cfg.grid.d, cfg.grid.n, cfg.w_seed(), tol)?;
    let mut csv = String::from("identity,d,n,residual,tolerance,passed\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.identity,
            r.d,
            r.n,
            fmt_f64(r.residual),
            fmt_f64(r.tolerance),
            r.passed
        ));
    }
    dir.write("identities.csv", csv.as_bytes())?;
    let passed = reports.iter().all(|r| r.passed);
    let worst = reports.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(Outcome { passed, summary: json!({ "checks": reports.len(), "max_residual": worst }) })
}

fn run_cmd(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let s = setup(cfg)?;
    let traj = solve(&s, cfg, cfg.time.save_stride)?;
    let mut t = Table::new(&["t", "energy", "max_speed", "max_divergence"]);
    for (time, u) in traj.times.iter().zip(&traj.snapshots) {
        t.push(vec![*time, 0.5 * u.l2_norm().powi(2), u.max_magnitude(), u.divergence()?.max_magnitude()])?;
    }
    dir.write_table("timeseries.csv", &t)?;
    if cfg.output.save_fields {
        for &fmt in &cfg.output.formats {
            let ext = if fmt == stochflow_core::output::FieldFormat::Csv { "csv" } else { "bin" };
            dir.write_field(&format!("u_final_{ext}"), traj.last(), fmt)?;
        }
    }
    let e0 = 0.5 * traj.initial().l2_norm().powi(2);
    let e1 = 0.5 * traj.last().l2_norm().powi(2);
    Ok(Outcome {
        passed: true,
        summary: json!({
            "family": cfg.model.family.name(),
            "steps": cfg.n_steps(),
            "energy_initial": e0,
            "energy_final": e1,
        }),
    })
}

fn kelvin(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let s = setup(cfg)?;
    let traj = solve(&s, cfg, 1)?;
    let loops = cfg.build_loops()?;
    let opts = AdvectOptions { flavor: cfg.diagnostics.flavor, deformation: false, nu: 0.0 };
    let mut cols: Vec<(String, Vec<f64>)> = vec![("t".into(), traj.times.clone())];
    let mut per_loop = Vec::new();
    let mut passed = true;
    for (i, lp) in loops.iter().enumerate() {
        let flow = advect(&lp.points, VelocitySource::carrier_of(&traj), &s.basis, &s.driver, opts)?;
        let k = kelvin_residual(&traj, &flow, lp.winding)?;
        let dcmp = circulation_transport_decomposition(&traj, &flow, lp.winding)?;
        let rel_kelvin = k.max_abs() / dcmp.scale;
        let rel_closure = dcmp.max_rel_closure();
        passed &= within(rel_closure, cfg.diagnostics.tolerance);
        per_loop.push(json!({
            "loop": i,
            "max_rel_kelvin_residual": rel_kelvin,
            "max_rel_closure": rel_closure,
            "final_drift_term": dcmp.drift.last(),
            "final_martingale_term": dcmp.martingale.last(),
        }));
        cols.push((format!("loop{i}_kelvin"), k.values));
        cols.push((format!("loop{i}_drift"), dcmp.drift));
        cols.push((format!("loop{i}_martingale"), dcmp.martingale));
        cols.push((format!("loop{i}_closure"), dcmp.closure));
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    dir.write_table("kelvin.csv", &Table::from_columns(&refs)?)?;
    Ok(Outcome {
        passed,
        summary: json!({ "family": cfg.model.family.name(), "flavor": cfg.diagnostics.flavor, "loops": per_loop }),
    })
}

fn energy(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let s = setup(cfg)?;
    let traj = solve(&s, cfg, 1)?;
    let ledger = energy_ledger(&traj)?;
    let mut cols: Vec<(&str, &[f64])> = vec![
        ("t", &ledger.times),
        ("energy", &ledger.energy),
        ("dissipation_integral", &ledger.dissipation_integral),
    ];
    for (name, v) in &ledger.groups {
        cols.push((name.as_str(), v));
    }
    cols.push(("closure", &ledger.closure));
    dir.write_table("energy.csv", &Table::from_columns(&cols)?)?;
    let closure = ledger.max_rel_closure();
    Ok(Outcome {
        passed: within(closure, cfg.diagnostics.tolerance),
        summary: json!({
            "family": cfg.model.family.name(),
            "max_rel_closure": closure,
            "max_rel_energy_drift": ledger.max_rel_drift(),
        }),
    })
}

fn weber(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let s = setup(cfg)?;
    let traj = solve(&s, cfg, 1)?;
    let m = cfg.diagnostics.label_lattice;
    let labels = label_lattice(cfg.grid.d, m);
    let flow = evolve_deformation(&labels, VelocitySource::carrier_of(&traj), &s.basis, &s.driver, Flavor::Strat)?;
    let pull = weber_pullback(&traj, &flow, m)?;
    let map = solve_back_to_labels(&traj, &s.basis, &s.driver, cfg.model.nu, cfg.n_steps())?;
    let grid = weber_label_grid(&traj, &map)?;
    let cauchy = cauchy_residual(&traj, &flow)?;
    let defect = volume_defect(&flow, cfg.grid.d).last().copied().unwrap_or(0.0);
    let mut t = Table::new(&["pullback_curl_ratio", "pullback_loop_mismatch", "label_grid_residual", "cauchy_residual", "volume_defect"]);
    t.push(vec![pull.residual, pull.loop_mismatch, grid.residual, cauchy, defect])?;
    dir.write_table("weber.csv", &t)?;
    let worst = pull.residual.max(grid.residual).max(cauchy);
    Ok(Outcome {
        passed: within(worst, cfg.diagnostics.tolerance),
        summary: json!({ "pullback": pull, "label_grid": grid, "cauchy_residual": cauchy, "volume_defect": defect }),
    })
}

fn cikelvin(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let s = setup(cfg)?;
    let traj = solve(&s, cfg, 1)?;
    let loops = cfg.build_loops()?;
    let m = cfg.diagnostics.members;
    let slack = cfg.diagnostics.tolerance.unwrap_or(0.0);
    let mut passed = true;
    let mut ests = Vec::new();
    let mut t = Table::new(&["member"]);
    let mut member_cols: Vec<Vec<f64>> = Vec::new();
    for (i, lp) in loops.iter().enumerate() {
        let mv = conditional_kelvin_members(&traj, &lp.points, lp.winding, cfg.b_seed_base(), m)?;
        let est = mv.estimate()?;
        let gap = (est.mc_mean - est.target).abs();
        let ok = if est.mc_stderr.is_finite() { gap <= 3.0 * est.mc_stderr + slack } else { gap <= slack };
        passed &= ok;
        ests.push(json!({
            "loop": i,
            "estimate": est,
            "gap": gap,
            "passed": ok,
            "stderr_reliable": m > 1,
        }));
        t.header.push(format!("loop{i}"));
        member_cols.push(mv.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect());
    }
    for k in 0..m {
        let mut row = vec![k as f64];
        row.extend(member_cols.iter().map(|c| c[k]));
        t.push(row)?;
    }
    dir.write_table("members.csv", &t)?;
    if m == 1 {
        log::warn!("one member: the standard error is not meaningful");
    }
    Ok(Outcome { passed, summary: json!({ "members": m, "loops": ests }) })
}

fn jacobian(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let grid = cfg.build_grid()?;
    let basis = NoiseBasis::compressible(&grid, cfg.basis.xi.build(&grid)?, vec![])?;
    let b = cfg.build_initial(&grid)?;
    let driver = BrownianDriver::new(cfg.w_seed(), cfg.b_seed_base(), cfg.time.dt, cfg.n_steps(), basis.kw(), 0)?;
    let pts = label_lattice(cfg.grid.d, cfg.diagnostics.label_lattice.min(16));
    let check = jacobian_formula_check(&pts, VelocitySource::Steady(&b), &basis, &driver)?;
    let mut t = Table::new(&["t", "max_rel_mismatch", "det_particle0", "formula_particle0"]);
    for (i, time) in check.times.iter().enumerate() {
        let worst = check.determinant[i]
            .iter()
            .zip(&check.formula[i])
            .map(|(a, f)| (a - f).abs() / f.abs())
            .fold(0.0, f64::max);
        t.push(vec![*time, worst, check.determinant[i][0], check.formula[i][0]])?;
    }
    dir.write_table("jacobian.csv", &t)?;
    Ok(Outcome {
        passed: within(check.max_rel_mismatch, cfg.diagnostics.tolerance),
        summary: json!({ "particles": pts.len(), "max_rel_mismatch": check.max_rel_mismatch }),
    })
}

/// Scalar measured by a sweep point.
fn observe(cfg: &RunConfig, observable: &str, driver: &BrownianDriver, scale: f64) -> Result<BTreeMap<String, f64>> {
    let grid = cfg.build_grid()?;
    let basis = std::sync::Arc::new(cfg.build_basis(&grid)?.scaled(scale)?);
    let model = cfg.build_model(basis.clone())?;
    let u0 = cfg.build_initial(&grid)?;
    let traj = run(&model, &u0, cfg.time.t_final, driver, cfg.time.scheme, 1)?;
    let mut out = BTreeMap::new();
    match observable {
        "kelvin" | "decomposition" => {
            let opts = AdvectOptions { flavor: cfg.diagnostics.flavor, deformation: false, nu: 0.0 };
            for (i, lp) in cfg.build_loops()?.iter().enumerate() {
                let flow = advect(&lp.points, VelocitySource::carrier_of(&traj), &basis, driver, opts)?;
                let d = circulation_transport_decomposition(&traj, &flow, lp.winding)?;
                let k = kelvin_residual(&traj, &flow, lp.winding)?;
                out.insert(format!("loop{i}_kelvin"), k.max_abs() / d.scale);
                out.insert(format!("loop{i}_closure"), d.max_rel_closure());
            }
        }
        "energy" => {
            let l = energy_ledger(&traj)?;
            out.insert("closure".into(), l.max_rel_closure());
            out.insert("energy_drift".into(), l.max_rel_drift());
        }
        "weber" => {
            let m = cfg.diagnostics.label_lattice;
            let labels = label_lattice(cfg.grid.d, m);
            let flow = evolve_deformation(&labels, VelocitySource::carrier_of(&traj), &basis, driver, Flavor::Strat)?;
            out.insert("pullback".into(), weber_pullback(&traj, &flow, m)?.residual);
            out.insert("cauchy".into(), cauchy_residual(&traj, &flow)?);
        }
        "field" => {
            // distance to the noise-free run with the same initial data
            let quiet = std::sync::Arc::new(cfg.build_basis(&grid)?.scaled(0.0)?);
            let det = run(&cfg.build_model(quiet)?, &u0, cfg.time.t_final, driver, cfg.time.scheme, cfg.n_steps())?;
            out.insert("field_distance".into(), traj.last().sub(det.last()).l2_norm() / det.last().l2_norm());
        }
        other => bail!("unknown sweep observable {other:?}"),
    }
    Ok(out)
}

fn sweep(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let Some(sw) = cfg.diagnostics.sweep.clone() else {
        bail!("sweep needs a [diagnostics.sweep] block");
    };
    let grid = cfg.build_grid()?;
    let basis = cfg.build_basis(&grid)?;
    let report = match sw.kind {
        SweepKind::DtHalving => {
            let finest = sw.values.iter().copied().fold(f64::INFINITY, f64::min);
            let steps = (cfg.time.t_final / finest).round() as usize;
            let fine = BrownianDriver::new(cfg.w_seed(), cfg.b_seed_base(), finest, steps, basis.kw(), basis.kb())?;
            run_sweep(sw.kind, &sw.values, |dt| {
                let factor = (dt / finest).round() as usize;
                if ((factor as f64) * finest - dt).abs() > 1e-9 * dt {
                    return Err(stochflow_core::Error::InvalidArgument(format!("{dt} is not a multiple of {finest}")));
                }
                let drv = fine.coarsen(factor)?;
                observe(cfg, &sw.observable, &drv, 1.0).map_err(|e| stochflow_core::Error::Precondition(format!("{e:#}")))
            })?
        }
        SweepKind::Amplitude => {
            let driver = cfg.build_driver(&basis)?;
            run_sweep(sw.kind, &sw.values, |a| {
                observe(cfg, "field", &driver, a).map_err(|e| stochflow_core::Error::Precondition(format!("{e:#}")))
            })?
        }
        SweepKind::MScaling => {
            let s = setup(cfg)?;
            let traj = solve(&s, cfg, 1)?;
            let lp = cfg.build_loops()?.remove(0);
            let max_m = sw.values.iter().copied().fold(0.0, f64::max) as usize;
            let mv = conditional_kelvin_members(&traj, &lp.points, lp.winding, cfg.b_seed_base(), max_m)?;
            run_sweep(sw.kind, &sw.values, |m| {
                let e = mv.prefix(m as usize)?;
                Ok(BTreeMap::from([
                    ("stderr".to_string(), e.mc_stderr),
                    ("gap".to_string(), (e.mc_mean - e.target).abs()),
                ]))
            })?
        }
    };
    let keys: Vec<String> = report.points[0].values.keys().cloned().collect();
    let mut header = vec!["x".to_string()];
    header.extend(keys.iter().cloned());
    let mut t = Table { header, rows: vec![] };
    for p in &report.points {
        let mut row = vec![p.x];
        row.extend(keys.iter().map(|k| p.values[k]));
        t.push(row)?;
    }
    dir.write_table("sweep.csv", &t)?;
    let threshold = cfg.diagnostics.tolerance;
    let passed = match (sw.kind, threshold) {
        (_, None) => true,
        (SweepKind::MScaling, Some(tol)) => report.slopes.get("stderr").map_or(false, |s| (s + 0.5).abs() <= tol),
        (_, Some(min_slope)) => report.slopes.values().all(|s| *s >= min_slope),
    };
    Ok(Outcome { passed, summary: json!({ "sweep": report }) })
}
