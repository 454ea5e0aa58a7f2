//! Dynamic optimal transport on a staggered space-time grid.
//!
//! The kinetic energy `∫∫ ‖m‖²/φ` is minimized over densities `φ` and
//! momenta `m = φ v` subject to `∂_s φ + ∇·m = 0`, prescribed endpoint
//! densities and zero normal flux through the box boundary. The problem is
//! split Douglas-Rachford style between a staggered copy `V` carrying the
//! continuity constraint and a centered copy `U` carrying the energy, tied
//! together by `U = I(V)`.

mod grid;
mod prox;

use std::collections::VecDeque;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::discrete_ot::{wasserstein, DiscreteMeasure};
use crate::measures::{normalize, GridDensity, MASS_TOLERANCE};
use crate::{Error, Result};
use grid::{Boundary, ContinuityProjector, Fields, InterpolationProjector, Layout};

pub use prox::prox_kinetic;

/// Fraction of the mass that must sit more than two cells from the boundary.
pub const INTERIOR_MASS_FRACTION: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    /// Proximal step of the splitting, in units of the peak endpoint density.
    pub gamma: f64,
    /// Douglas-Rachford relaxation in `(0, 2)`.
    pub relaxation: f64,
    /// Continuity residual tolerance, relative to `max|m| / min cell width`.
    pub tolerance: f64,
    /// Relative energy change allowed over `energy_window` iterations.
    pub energy_tolerance: f64,
    pub energy_window: usize,
    pub max_iter: usize,
    /// Endpoint densities are floored at this fraction of their maximum.
    pub density_floor: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            relaxation: 1.8,
            tolerance: 1e-3,
            energy_tolerance: 1e-5,
            energy_window: 50,
            max_iter: 20_000,
            density_floor: 1e-10,
        }
    }
}

/// Density slices at `s = t/T`, `t = 0..=T`, and face momenta on the `T`
/// time intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    phi: ArrayD<f64>,
    momentum: Vec<ArrayD<f64>>,
    density_floor: f64,
}

impl SpaceTimeField {
    pub fn time_steps(&self) -> usize {
        self.phi.shape()[0] - 1
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// `[T + 1, n_1, …, n_d]`.
    pub fn phi(&self) -> &ArrayD<f64> {
        &self.phi
    }

    /// Axis-`k` momentum, `[T, n_1, …, n_k + 1, …, n_d]`.
    pub fn momentum(&self, k: usize) -> &ArrayD<f64> {
        &self.momentum[k]
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        (0..self.shape.len())
            .map(|k| (self.hi[k] - self.lo[k]) / self.shape[k] as f64)
            .collect()
    }

    /// Density slice `t` as stored.
    pub fn slice(&self, t: usize) -> Result<GridDensity> {
        let values = self.phi.index_axis(Axis(0), t).iter().copied().collect();
        GridDensity::new(self.lo.clone(), self.hi.clone(), self.shape.clone(), values)
    }

    fn phi_at(&self, s: f64) -> ArrayD<f64> {
        let (i, frac) = split_time(s * self.time_steps() as f64, self.time_steps());
        let a = self.phi.index_axis(Axis(0), i);
        let b = self.phi.index_axis(Axis(0), (i + 1).min(self.time_steps()));
        let mut out = &a * (1.0 - frac) + &b * frac;
        out.mapv_inplace(|v| v.max(0.0));
        out
    }

    /// Cell-centered velocity on time layer `i`, where momenta live, with the
    /// density averaged from the two bounding slices; `None` below `floor`.
    fn layer_velocity(&self, i: usize, floor: f64) -> Vec<Option<Vec<f64>>> {
        let a = self.phi.index_axis(Axis(0), i);
        let b = self.phi.index_axis(Axis(0), i + 1);
        let phi = (&a + &b) * 0.5;
        let centered: Vec<ArrayD<f64>> = self
            .momentum
            .iter()
            .enumerate()
            .map(|(k, mk)| {
                let faces = mk.index_axis(Axis(0), i);
                let n = self.shape[k];
                let lo = faces.slice_axis(Axis(k), ndarray::Slice::from(0..n));
                let hi = faces.slice_axis(Axis(k), ndarray::Slice::from(1..n + 1));
                (&lo + &hi) * 0.5
            })
            .collect();
        let flat: Vec<&[f64]> = centered.iter().map(|c| c.as_slice().expect("standard layout")).collect();
        phi.iter()
            .enumerate()
            .map(|(c, &p)| (p > 0.0 && p >= floor).then(|| flat.iter().map(|mk| mk[c] / p).collect()))
            .collect()
    }
}

fn split_time(pos: f64, last: usize) -> (usize, f64) {
    let i = (pos.floor() as usize).min(last);
    (i, (pos - i as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BbSolution {
    pub field: SpaceTimeField,
    /// Kinetic energy `∫₀¹∫ ‖m‖²/φ`; equals `W²` at the optimum.
    pub energy: f64,
    pub continuity_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the dynamic transport problem between two grids on `T` time steps.
pub fn bb_solve(src: &GridDensity, tgt: &GridDensity, time_steps: usize, params: &SolverParams) -> Result<BbSolution> {
    if !src.same_geometry(tgt) {
        return Err(Error::GeometryMismatch);
    }
    if time_steps < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 time steps, got {time_steps}")));
    }
    if !(params.relaxation > 0.0 && params.relaxation < 2.0) || !(params.gamma > 0.0) {
        return Err(Error::InvalidInput("relaxation must lie in (0, 2) and gamma be positive".into()));
    }
    let src = prepare_endpoint(src, params.density_floor)?;
    let tgt = prepare_endpoint(tgt, params.density_floor)?;
    let layout = Layout {
        steps: time_steps,
        shape: src.shape().to_vec(),
        widths: src.cell_widths(),
    };
    let as_array = |g: &GridDensity| ArrayD::from_shape_vec(IxDyn(g.shape()), g.values().to_vec()).expect("grid shape");
    let bc = Boundary {
        src: as_array(&src),
        tgt: as_array(&tgt),
    };
    let peak = src.values().iter().chain(tgt.values()).copied().fold(0.0, f64::max);
    let solver = Solver {
        gamma: params.gamma * peak,
        interp: InterpolationProjector::new(&layout),
        continuity: ContinuityProjector::new(&layout),
        weight: src.cell_volume() * layout.ds(),
        h_min: layout.widths.iter().copied().fold(f64::INFINITY, f64::min),
        layout,
        bc,
    };
    let sol = solver.run(params, &src);
    if sol.converged {
        Ok(sol)
    } else {
        Err(Error::NotConverged(Box::new(sol)))
    }
}

fn prepare_endpoint(g: &GridDensity, floor: f64) -> Result<GridDensity> {
    if let Some((index, &value)) = g.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeDensity { index, value });
    }
    let mass = g.mass();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::UnnormalizedInput { mass });
    }
    let inner = interior_fraction(g);
    if inner < INTERIOR_MASS_FRACTION {
        return Err(Error::MassNearBoundary { inner_fraction: inner });
    }
    let max = g.values().iter().copied().fold(0.0, f64::max);
    normalize(&g.with_values(g.values().iter().map(|v| v.max(floor * max)).collect())?)
}

/// Share of the mass in cells whose centers are more than two cells away
/// from every face of the box.
fn interior_fraction(g: &GridDensity) -> f64 {
    let total: f64 = g.values().iter().sum();
    let inner: f64 = g
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            g.unravel(*i)
                .iter()
                .zip(g.shape())
                .all(|(&j, &n)| j >= 2 && j + 2 < n)
        })
        .map(|(_, v)| v)
        .sum();
    inner / total
}

struct Solver {
    gamma: f64,
    layout: Layout,
    bc: Boundary,
    interp: InterpolationProjector,
    continuity: ContinuityProjector,
    weight: f64,
    h_min: f64,
}

impl Solver {
    fn initial(&self) -> (Fields, Fields) {
        let t = self.layout.steps;
        let mut v = self.layout.zeros_staggered();
        for (i, mut slice) in v.phi.outer_iter_mut().enumerate() {
            let s = i as f64 / t as f64;
            slice.assign(&(&self.bc.src * (1.0 - s) + &self.bc.tgt * s));
        }
        (self.layout.interpolate(&v), v)
    }

    fn prox_energy(&self, u: &mut Fields, gamma: f64) {
        let d = self.layout.dim();
        let phi = u.phi.as_slice_mut().expect("standard layout");
        let mut ms: Vec<&mut [f64]> = u.m.iter_mut().map(|a| a.as_slice_mut().expect("standard layout")).collect();
        let mut buf = [0.0; 3];
        for (i, p) in phi.iter_mut().enumerate() {
            for k in 0..d {
                buf[k] = ms[k][i];
            }
            prox_kinetic(p, &mut buf[..d], gamma);
            for k in 0..d {
                ms[k][i] = buf[k];
            }
        }
    }

    fn energy(&self, u: &Fields) -> f64 {
        let phi = u.phi.as_slice().expect("standard layout");
        let mut total = 0.0;
        for (i, &p) in phi.iter().enumerate() {
            let norm_sq: f64 = u.m.iter().map(|a| a.as_slice().expect("standard layout")[i].powi(2)).sum();
            if p > 0.0 {
                total += norm_sq / p;
            }
        }
        total * self.weight
    }

    /// Relative continuity residual of `v` with its density clamped at zero.
    fn residual(&self, v: &Fields) -> f64 {
        let mut v = v.clone();
        v.phi.mapv_inplace(|p| p.max(0.0));
        let worst = self.layout.divergence(&v).iter().fold(0.0, |a: f64, r| a.max(r.abs()));
        let peak = v.phi.iter().copied().fold(0.0, f64::max);
        let scale = (v.max_abs_momentum() / self.h_min).max(peak);
        if worst == 0.0 {
            0.0
        } else if scale > 0.0 {
            worst / scale
        } else {
            f64::INFINITY
        }
    }

    fn run(&self, params: &SolverParams, src: &GridDensity) -> BbSolution {
        let (mut zu, mut zv) = self.initial();
        let mut history: VecDeque<f64> = VecDeque::with_capacity(params.energy_window + 1);
        let alpha = params.relaxation;
        let mut iterations = 0;
        let mut converged = false;
        let mut energy = 0.0;
        let mut xv = zv.clone();
        while iterations < params.max_iter {
            iterations += 1;
            let (xu, xv_new) = self.interp.project(&self.layout, &self.bc, &zu, &zv);
            xv = xv_new;
            let mut ru = xu.clone();
            ru.zip_with(&zu, |x, z| 2.0 * x - z);
            let mut rv = xv.clone();
            rv.zip_with(&zv, |x, z| 2.0 * x - z);
            self.prox_energy(&mut ru, self.gamma);
            let yv = self.continuity.project(&self.layout, &self.bc, &rv);
            energy = self.energy(&ru);
            zu.zip_with(&ru, |z, y| z + alpha * y);
            zu.zip_with(&xu, |z, x| z - alpha * x);
            zv.zip_with(&yv, |z, y| z + alpha * y);
            zv.zip_with(&xv, |z, x| z - alpha * x);

            if history.len() > params.energy_window {
                history.pop_front();
            }
            history.push_back(energy);
            if history.len() > params.energy_window {
                let old = history[0];
                let stable = (energy - old).abs() <= params.energy_tolerance * energy.abs() + 1e-10;
                if stable && self.residual(&xv) <= params.tolerance {
                    converged = true;
                    break;
                }
            }
        }
        xv.phi.mapv_inplace(|v| v.max(0.0));
        let continuity_residual = self.residual(&xv);
        BbSolution {
            field: SpaceTimeField {
                lo: src.lo().to_vec(),
                hi: src.hi().to_vec(),
                shape: src.shape().to_vec(),
                phi: xv.phi,
                momentum: xv.m,
                density_floor: params.density_floor,
            },
            energy,
            continuity_residual,
            iterations,
            converged,
        }
    }
}

/// Normalized density at `s`, linear between stored slices.
pub fn intermediate_density(sol: &BbSolution, s: f64) -> Result<GridDensity> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::SOutOfRange(s));
    }
    let f = &sol.field;
    let values = f.phi_at(s).iter().copied().collect();
    normalize(&GridDensity::new(f.lo.clone(), f.hi.clone(), f.shape.clone(), values)?)
}

/// Cell-centered velocity on the synthetic time scale `s ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub shape: Vec<usize>,
    /// One flat row-major array per axis.
    pub components: Vec<Vec<f64>>,
    /// Cells whose density fell below the floor; their velocity is zero.
    pub flagged: Vec<bool>,
    /// Density used for the division.
    pub density: Vec<f64>,
}

impl VelocityField {
    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn at(&self, i: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[i]).collect()
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.components.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt()
    }

    /// Central-difference `∂v₂/∂x₁ − ∂v₁/∂x₂` at interior cells of a 2-D
    /// field; boundary cells report zero.
    pub fn curl_2d(&self, widths: &[f64]) -> Option<Vec<f64>> {
        if self.shape.len() != 2 {
            return None;
        }
        let (n0, n1) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n0 * n1];
        for i in 1..n0.saturating_sub(1) {
            for j in 1..n1.saturating_sub(1) {
                let at = |a: usize, b: usize| a * n1 + b;
                let dv2 = (self.components[1][at(i + 1, j)] - self.components[1][at(i - 1, j)]) / (2.0 * widths[0]);
                let dv1 = (self.components[0][at(i, j + 1)] - self.components[0][at(i, j - 1)]) / (2.0 * widths[1]);
                out[at(i, j)] = dv2 - dv1;
            }
        }
        Some(out)
    }
}

/// `v = m / φ` at cell centers. Velocities are formed on the momentum
/// layers at interval midpoints and interpolated linearly in `s`, held
/// constant before the first and after the last midpoint.
pub fn extract_velocity(sol: &BbSolution, s: f64) -> Result<VelocityField> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::SOutOfRange(s));
    }
    let f = &sol.field;
    let t = f.time_steps();
    let phi = f.phi_at(s);
    let floor = f.density_floor * phi.iter().copied().fold(0.0, f64::max);
    let pos = (s * t as f64 - 0.5).clamp(0.0, (t - 1) as f64);
    let (i, frac) = split_time(pos, t - 1);
    let lo = f.layer_velocity(i, floor);
    let hi = if frac > 0.0 { f.layer_velocity(i + 1, floor) } else { lo.clone() };
    let d = f.shape.len();
    let cells = lo.len();
    let mut components = vec![vec![0.0; cells]; d];
    let mut flagged = vec![false; cells];
    for c in 0..cells {
        match (&lo[c], &hi[c]) {
            (Some(a), Some(b)) => {
                for k in 0..d {
                    components[k][c] = (1.0 - frac) * a[k] + frac * b[k];
                }
            }
            _ => flagged[c] = true,
        }
    }
    Ok(VelocityField {
        shape: f.shape.clone(),
        components,
        flagged,
        density: phi.iter().copied().collect(),
    })
}

/// `(s, W(src, φ(s)))` at `samples` evenly spaced `s` including both ends.
pub fn geodesic_w_profile(sol: &BbSolution, src: &GridDensity, samples: usize) -> Result<Vec<(f64, f64)>> {
    if samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let a = DiscreteMeasure::from_grid(&normalize(src)?)?;
    (0..samples)
        .map(|i| {
            let s = i as f64 / (samples - 1) as f64;
            let b = DiscreteMeasure::from_grid(&intermediate_density(sol, s)?)?;
            Ok((s, wasserstein(&a, &b)?))
        })
        .collect()
}
