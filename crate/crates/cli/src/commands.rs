use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use distrack::bb::{self, BbSolution, SolverParams};
use distrack::discrete_ot::{solve_plan, DiscreteMeasure};
use distrack::gaussian_ot::{displacement_interpolate, gaussian_brenier_map, gaussian_wasserstein};
use distrack::io;
use distrack::liouville::{self, VectorFieldSpec};
use distrack::lti_feedback::{check_feasibility, synthesize};
use distrack::measures::{GaussianDensity, GridDensity, ParticleEnsemble};
use distrack::refine::{self, Correction};
use distrack::Error;

use crate::{CmdResult, Failure};

/// Shortest decimal that round-trips, so no precision is lost.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn wasserstein(src: &Path, tgt: &Path, plan_out: Option<&Path>) -> CmdResult {
    let a = DiscreteMeasure::from_ensemble(&io::read_ensemble(src)?)?;
    let b = DiscreteMeasure::from_ensemble(&io::read_ensemble(tgt)?)?;
    let plan = solve_plan(&a, &b)?;
    println!("W={}", io::format_significant(plan.cost.max(0.0).sqrt(), 12));
    if let Some(path) = plan_out {
        let rows: Vec<Vec<String>> = plan
            .entries
            .iter()
            .map(|&(i, j, m)| vec![i.to_string(), j.to_string(), num(m)])
            .collect();
        io::write_table(path, &["i", "j", "mass"], &rows)?;
    }
    Ok(())
}

pub fn gauss_map(src: &Path, tgt: &Path, s: Option<f64>) -> CmdResult {
    let a = io::read_gaussian(src)?;
    let b = io::read_gaussian(tgt)?;
    let map = gaussian_brenier_map(&a, &b)?;
    println!("{}", io::affine_map_json(&map));
    if let Some(s) = s {
        println!("{}", io::gaussian_json(&displacement_interpolate(&a, &b, s)?));
    }
    Ok(())
}

pub fn interpolate(src: &Path, tgt: &Path, steps: usize, out: &Path) -> CmdResult {
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let a = io::read_gaussian(src)?;
    let b = io::read_gaussian(tgt)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let s = k as f64 / steps as f64;
        let g = displacement_interpolate(&a, &b, s)?;
        io::write_gaussian(&out.join(format!("step_{k:03}.json")), &g)?;
        rows.push(vec![
            num(s),
            num(gaussian_wasserstein(&a, &g)?),
            num(gaussian_wasserstein(&g, &b)?),
        ]);
    }
    io::write_table(&out.join("profile.csv"), &["s", "W_from_src", "W_to_tgt"], &rows)?;
    Ok(())
}

pub fn feedback(system: &Path, pdfs: &[PathBuf], free_pair: Option<&Path>) -> CmdResult {
    let mut systems = io::read_systems(system)?;
    let densities: Vec<GaussianDensity> = pdfs.iter().map(|p| io::read_gaussian(p)).collect::<Result<_, _>>()?;
    let horizons = densities.len() - 1;
    if systems.len() == 1 && horizons > 1 {
        systems = vec![systems[0].clone(); horizons];
    }
    if systems.len() != horizons {
        return Err(usage(format!("{} systems for {horizons} horizons", systems.len())));
    }
    let free = free_pair.map(io::read_free_pair).transpose()?;
    let mut table = Vec::with_capacity(horizons);
    for (j, sys) in systems.iter().enumerate() {
        let report = check_feasibility(sys, &densities[j], &densities[j + 1])?;
        if report.feasible {
            let law = synthesize(sys, &densities[j], &densities[j + 1], free.as_ref())?;
            println!("{}", io::feedback_law_json(&law));
        } else {
            println!("null");
        }
        table.push((j, report));
    }
    println!("horizon,feasible,residual_mat,residual_vec");
    for (j, r) in &table {
        println!("{j},{},{},{}", r.feasible, num(r.residual_mat), num(r.residual_vec));
    }
    match table.iter().find(|(_, r)| !r.feasible) {
        Some((j, _)) => Err(Failure::Domain(format!("horizon {j} is infeasible"))),
        None => Ok(()),
    }
}

/// Writes slices, velocities and the summary of a dynamic transport run.
pub fn write_bb_outputs(sol: &BbSolution, out: &Path) -> CmdResult {
    fs::create_dir_all(out)?;
    let t = sol.field.time_steps();
    for k in 0..=t {
        let s = k as f64 / t as f64;
        io::write_grid(&out.join(format!("slice_{k:03}.json")), &sol.field.slice(k)?)?;
        let v = bb::extract_velocity(sol, s)?;
        let d = v.shape.len();
        let mut header: Vec<String> = (0..d).map(|a| format!("i{}", a + 1)).collect();
        header.extend((0..d).map(|a| format!("v{}", a + 1)));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..v.len())
            .map(|c| {
                let mut idx = Vec::with_capacity(d);
                let mut rest = c;
                for &n in v.shape.iter().rev() {
                    idx.push(rest % n);
                    rest /= n;
                }
                idx.reverse();
                let mut row: Vec<String> = idx.iter().map(usize::to_string).collect();
                row.extend(v.at(c).into_iter().map(num));
                row
            })
            .collect();
        io::write_table(&out.join(format!("velocity_{k:03}.csv")), &header, &rows)?;
    }
    write_json(
        &out.join("summary.json"),
        &json!({
            "energy": sol.energy,
            "W": sol.energy.max(0.0).sqrt(),
            "iterations": sol.iterations,
            "continuity_residual": sol.continuity_residual,
            "converged": sol.converged,
        }),
    )
}

/// Solves, mapping non-convergence to a returned solution flagged as such.
pub fn solve_bb(src: &GridDensity, tgt: &GridDensity, time_steps: usize, params: &SolverParams) -> Result<BbSolution, Failure> {
    match bb::bb_solve(src, tgt, time_steps, params) {
        Ok(sol) => Ok(sol),
        Err(Error::NotConverged(sol)) => Ok(*sol),
        Err(e) => Err(e.into()),
    }
}

pub fn bb_solve(src: &Path, tgt: &Path, time_steps: usize, params: &SolverParams, out: &Path) -> CmdResult {
    let a = io::read_grid(src)?;
    let b = io::read_grid(tgt)?;
    let sol = solve_bb(&a, &b, time_steps, params)?;
    log::info!(
        "energy {} after {} iterations, residual {}",
        sol.energy,
        sol.iterations,
        sol.continuity_residual
    );
    write_bb_outputs(&sol, out)?;
    println!("energy={}", num(sol.energy));
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::Domain(format!("not converged after {} iterations", sol.iterations)))
    }
}

pub enum Field {
    Duffing,
    Affine,
}

pub struct PropagateOptions {
    pub field: Field,
    pub params: String,
    pub init: String,
    pub n: usize,
    pub seed: u64,
    pub times: String,
    pub steps_per_unit: f64,
    pub out: Option<PathBuf>,
    pub kinetic: Option<Vec<f64>>,
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad number {t:?} in {what}"))))
        .collect()
}

/// `start:step:end` with `end` included up to rounding.
pub fn parse_times(s: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad time range {s:?}"))))
        .collect::<Result<_, _>>()?;
    let [start, step, end] = parts[..] else {
        return Err(usage(format!("time range {s:?} is not start:step:end")));
    };
    if !(start > 0.0 && step > 0.0 && end >= start) {
        return Err(usage("need 0 < start <= end and step > 0"));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| start + k as f64 * step).collect())
}

fn field_spec(field: &Field, params: &[f64]) -> Result<VectorFieldSpec, Failure> {
    Ok(match field {
        Field::Duffing => {
            let [a, b, d] = params[..] else {
                return Err(usage("duffing takes three parameters a,b,d"));
            };
            VectorFieldSpec::duffing(a, b, d)?
        }
        Field::Affine => {
            if params.len() != 6 {
                return Err(usage("affine takes six parameters m11,m12,m21,m22,c1,c2"));
            }
            VectorFieldSpec::affine(
                DMatrix::from_row_slice(2, 2, &params[..4]),
                DVector::from_column_slice(&params[4..]),
            )?
        }
    })
}

fn initial_ensemble(init: &str, n: usize, seed: u64) -> Result<ParticleEnsemble, Failure> {
    if let Some(rest) = init.strip_prefix("uniform:") {
        let bounds = parse_list(rest, "--init")?;
        let [lo, hi] = bounds[..] else {
            return Err(usage("--init uniform:lo,hi"));
        };
        return Ok(liouville::uniform_square(n, lo, hi, seed)?);
    }
    if let Some(path) = init.strip_prefix("csv:") {
        return Ok(io::read_ensemble(Path::new(path))?);
    }
    Err(usage(format!("unknown initial ensemble {init:?}")))
}

fn steps_for(dt: f64, per_unit: f64) -> usize {
    ((dt.abs() * per_unit).ceil() as usize).max(1)
}

pub fn propagate(o: &PropagateOptions) -> CmdResult {
    if !(o.steps_per_unit > 0.0) {
        return Err(usage("--steps-per-unit must be positive"));
    }
    let field = field_spec(&o.field, &parse_list(&o.params, "--params")?)?;
    for w in field.parameter_warnings() {
        log::warn!("{w}");
    }
    let mut current = initial_ensemble(&o.init, o.n, o.seed)?;
    let times = parse_times(&o.times)?;
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir)?;
    }
    let mut kinetic_done = false;
    let mut t = 0.0;
    for (k, &tk) in times.iter().enumerate() {
        if let Some(kin) = &o.kinetic {
            if !kinetic_done && (kin[0] - t).abs() <= 1e-12 {
                print_kinetic(&field, &current, kin, o.steps_per_unit)?;
                kinetic_done = true;
            }
        }
        current = liouville::propagate(&field, &current, t, tk, steps_for(tk - t, o.steps_per_unit))?;
        t = tk;
        if let Some(dir) = &o.out {
            io::write_ensemble(&dir.join(format!("eta_{:02}.csv", k + 1)), &current)?;
        }
    }
    if let Some(kin) = &o.kinetic {
        if !kinetic_done {
            if (kin[0] - t).abs() <= 1e-12 {
                print_kinetic(&field, &current, kin, o.steps_per_unit)?;
            } else {
                return Err(usage("--kinetic t0 must be 0 or one of the snapshot times"));
            }
        }
    }
    Ok(())
}

fn print_kinetic(field: &VectorFieldSpec, ens: &ParticleEnsemble, kin: &[f64], per_unit: f64) -> CmdResult {
    let (t0, t1) = (kin[0], kin[1]);
    if !(t1 > t0) {
        return Err(usage("--kinetic needs t0 < t1"));
    }
    let e = liouville::path_kinetic_energy(field, ens, t0, t1, steps_for(t1 - t0, per_unit))?;
    println!("kinetic={}", num(e));
    Ok(())
}

fn covariance_header(prefix: &str, p: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..p).map(|i| format!("mean{}", i + 1)).collect();
    for i in 0..p {
        for j in 0..p {
            h.push(format!("{prefix}{}{}", i + 1, j + 1));
        }
    }
    h
}

pub fn gaussian_row(g: &GaussianDensity) -> Vec<String> {
    let p = g.dim();
    let mut row: Vec<String> = g.mean().iter().map(|v| num(*v)).collect();
    for i in 0..p {
        for j in 0..p {
            row.push(num(g.cov()[(i, j)]));
        }
    }
    row
}

/// Rows `j,s,mean...,cov...,W_from_model` along each refinement path.
pub fn refine_rows(
    truth: &refine::LinearGaussianModel,
    model: &refine::LinearGaussianModel,
    instants: &[usize],
    samples: usize,
) -> Result<(Vec<String>, Vec<Vec<String>>), Failure> {
    if samples < 2 {
        return Err(usage("--path-samples must be at least 2"));
    }
    let mut header = vec!["j".to_string(), "s".to_string()];
    header.extend(covariance_header("cov", model.output_dim()));
    header.push("W_from_model".into());
    let mut rows = Vec::new();
    for &j in instants {
        let pred = refine::predict_output_gaussian(model, j)?;
        for k in 0..samples {
            let s = k as f64 / (samples - 1) as f64;
            let g = refine::refinement_path(truth, model, j, s)?;
            let mut row = vec![j.to_string(), num(s)];
            row.extend(gaussian_row(&g));
            row.push(num(gaussian_wasserstein(&pred, &g)?));
            rows.push(row);
        }
    }
    Ok((header, rows))
}

pub fn refine(truth: &Path, model: &Path, instants: &[usize], samples: usize, chained: bool, out: &Path) -> CmdResult {
    let truth = io::read_model(truth)?;
    let model = io::read_model(model)?;
    fs::create_dir_all(out)?;
    let maps = refine::refine_sequence(&truth, &model, instants, chained)?;
    for m in &maps {
        if let Correction::Affine(a) = &m.correction {
            write_json(&out.join(format!("correction_j{}.json", m.instant)), &io::affine_map_json(a))?;
        }
    }
    let (header, rows) = refine_rows(&truth, &model, instants, samples)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_table(&out.join("refinement_path.csv"), &header, &rows)?;
    Ok(())
}

pub fn refine_empirical(pred: &Path, meas: &Path, out: &Path) -> CmdResult {
    let p = io::read_ensemble(pred)?;
    let m = io::read_ensemble(meas)?;
    let map = refine::refine_empirical(&p, &m)?;
    let Correction::Empirical(e) = &map.correction else {
        return Err(Failure::Internal("expected an empirical correction".into()));
    };
    let d = e.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{}", i + 1)).collect();
    header.extend((0..d).map(|i| format!("y{}", i + 1)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..e.len())
        .map(|i| e.source(i).iter().chain(e.image(i)).map(|v| num(*v)).collect())
        .collect();
    io::write_table(out, &header, &rows)?;
    let ratio = refine::residual_ratio(&map, &p, &m)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "residual_ratio={}", num(ratio))?;
    Ok(())
}
