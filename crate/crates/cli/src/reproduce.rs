use std::fs;
use std::path::Path;

use serde_json::json;

use distrack::bb::SolverParams;
use distrack::discrete_ot::{wasserstein, DiscreteMeasure};
use distrack::gaussian_ot::{displacement_interpolate, gaussian_wasserstein};
use distrack::io;
use distrack::liouville::{self, VectorFieldSpec, DUFFING_PARAMS};
use distrack::measures::{grid_from_particles, normalize, ParticleEnsemble};
use distrack::refine::{self, Correction};

use crate::commands::{num, refine_rows, solve_bb, write_bb_outputs, write_json};
use crate::{CmdResult, Failure};

struct Check {
    name: String,
    pass: bool,
    value: f64,
    tolerance: f64,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            pass: value <= tolerance,
            value,
            tolerance,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            pass: value >= tolerance,
            value,
            tolerance,
        }
    }
}

fn finish(experiment: &str, out: &Path, checks: &[Check]) -> CmdResult {
    let report = json!({
        "experiment": experiment,
        "checks": checks
            .iter()
            .map(|c| json!({"name": c.name, "pass": c.pass, "value": c.value, "tolerance": c.tolerance}))
            .collect::<Vec<_>>(),
    });
    write_json(&out.join("report.json"), &report)?;
    for c in checks {
        println!(
            "{} {}: value={} tolerance={}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            num(c.value),
            num(c.tolerance)
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Domain(format!("{failed} of {} checks failed", checks.len())))
    }
}

/// Square box centered on both ensembles with twice their half-extent.
fn auto_box(a: &ParticleEnsemble, b: &ParticleEnsemble) -> (Vec<f64>, Vec<f64>) {
    let d = a.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for e in [a, b] {
        for p in e.points().chunks(d) {
            for k in 0..d {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let half = (0..d).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max) * 2.0;
    let centers: Vec<f64> = (0..d).map(|k| 0.5 * (lo[k] + hi[k])).collect();
    (
        centers.iter().map(|c| c - half).collect(),
        centers.iter().map(|c| c + half).collect(),
    )
}

pub fn duffing(out: &Path, seed: u64, n: usize, grid: usize, time_steps: usize) -> CmdResult {
    if grid < 8 {
        return Err(Failure::Usage("--grid must be at least 8".into()));
    }
    fs::create_dir_all(out)?;
    let horizons: Vec<f64> = (1..=9).map(|j| j as f64 / 2.0).collect();
    let snapshots = liouville::duffing_dataset(n, seed, &horizons)?;
    for (j, snap) in snapshots.iter().enumerate() {
        io::write_ensemble(&out.join(format!("eta_{:02}.csv", j + 1)), snap)?;
    }

    let (alpha, beta, delta) = DUFFING_PARAMS;
    let mut checks = Vec::new();
    let factor = (delta * 0.5).exp();
    let mut factor_err: f64 = 0.0;
    let mut previous: Vec<f64> = vec![1.0 / 16.0; n];
    for snap in &snapshots {
        let dv = snap.density_values().ok_or(Failure::Internal("missing density values".into()))?;
        for (now, before) in dv.iter().zip(&previous) {
            factor_err = factor_err.max((now / before - factor).abs());
        }
        previous = dv.to_vec();
    }
    checks.push(Check::at_most("liouville_density_factor_error", factor_err, 1e-9));

    let field = VectorFieldSpec::duffing(alpha, beta, delta)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (first, label) in [(1usize, "1_2"), (8, "8_9")] {
        let (a, b) = (&snapshots[first - 1], &snapshots[first]);
        let (t0, t1) = (horizons[first - 1], horizons[first]);
        let dt = t1 - t0;
        let action = liouville::path_kinetic_energy(&field, a, t0, t1, liouville::default_steps(dt))?;
        let particle_w2 = wasserstein(&DiscreteMeasure::from_ensemble(a)?, &DiscreteMeasure::from_ensemble(b)?)?.powi(2);
        let (lo, hi) = auto_box(a, b);
        let shape = vec![grid; 2];
        let g0 = normalize(&grid_from_particles(a, &lo, &hi, &shape)?)?;
        let g1 = normalize(&grid_from_particles(b, &lo, &hi, &shape)?)?;
        io::write_grid(&out.join(format!("grid_eta_{:02}.json", first)), &g0)?;
        io::write_grid(&out.join(format!("grid_eta_{:02}.json", first + 1)), &g1)?;
        let sol = solve_bb(&g0, &g1, time_steps, &SolverParams::default())?;
        log::info!("horizon {label}: bb energy {} in {} iterations", sol.energy, sol.iterations);
        write_bb_outputs(&sol, &out.join(format!("bb_{label}")))?;
        let scaled = action * dt;
        checks.push(Check {
            name: format!("bb_converged_{label}"),
            pass: sol.converged,
            value: sol.continuity_residual,
            tolerance: SolverParams::default().tolerance,
        });
        let margin = 1.0 - sol.energy / scaled;
        if first == 1 {
            checks.push(Check::at_least(format!("bb_energy_margin_{label}"), margin, 0.10));
        } else {
            checks.push(Check::at_least(format!("bb_energy_margin_{label}"), margin, 0.0));
        }
        rows.push(vec![
            first.to_string(),
            num(t0),
            num(t1),
            num(sol.energy),
            num(particle_w2),
            num(action),
            num(scaled),
        ]);
        summary.push(json!({
            "horizon": [t0, t1],
            "bb_energy": sol.energy,
            "particle_w2": particle_w2,
            "duffing_action": scaled,
            "duffing_action_physical": action,
            "iterations": sol.iterations,
            "continuity_residual": sol.continuity_residual,
            "converged": sol.converged,
            "box": {"lo": lo, "hi": hi},
        }));
    }
    io::write_table(
        &out.join("energy_comparison.csv"),
        &["horizon", "t0", "t1", "bb_energy", "particle_w2", "duffing_action_physical", "duffing_action"],
        &rows,
    )?;
    write_json(&out.join("summary.json"), &json!({"horizons": summary}))?;
    finish("duffing", out, &checks)
}

pub fn refine_linear(out: &Path) -> CmdResult {
    fs::create_dir_all(out)?;
    let (truth, model) = refine::example_linear_models();
    io::write_model(&out.join("truth.json"), &truth)?;
    io::write_model(&out.join("model.json"), &model)?;
    let instants = [1usize, 2, 3];
    for m in refine::refine_sequence(&truth, &model, &instants, false)? {
        if let Correction::Affine(a) = &m.correction {
            write_json(&out.join(format!("correction_j{}.json", m.instant)), &io::affine_map_json(a))?;
        }
    }
    let (header, rows) = refine_rows(&truth, &model, &instants, 11)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_table(&out.join("refinement_path.csv"), &header, &rows)?;

    let mut checks = Vec::new();
    for &j in &instants {
        let pred = refine::predict_output_gaussian(&model, j)?;
        let meas = refine::predict_output_gaussian(&truth, j)?;
        let total = gaussian_wasserstein(&pred, &meas)?;
        let (mut linear, mut identity): (f64, f64) = (0.0, 0.0);
        for k in 0..=10 {
            let s = k as f64 / 10.0;
            let path = refine::refinement_path(&truth, &model, j, s)?;
            let w = gaussian_wasserstein(&pred, &path)?;
            linear = linear.max((w - s * total).abs() / total);
            let geo = displacement_interpolate(&pred, &meas, s)?;
            let mean_err = (path.mean() - geo.mean()).amax() / (1.0 + geo.mean().amax());
            let cov_err = (path.cov() - geo.cov()).amax() / (1.0 + geo.cov().amax());
            identity = identity.max(mean_err).max(cov_err);
        }
        checks.push(Check::at_most(format!("w_linear_in_s_j{j}"), linear, 1e-8));
        checks.push(Check::at_most(format!("path_equals_geodesic_j{j}"), identity, 1e-10));
    }
    finish("refine-linear", out, &checks)
}
