//! Propagation of joint densities under a known vector field by the method
//! of characteristics.
//!
//! Along a trajectory `ẋ = f(x, t)` the density obeys
//! `d/dt ln ξ = −∇·f`, so each particle carries its exact density value:
//! points advance with classical RK4 and the divergence integral is
//! accumulated with Simpson's rule on the same stages.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::measures::ParticleEnsemble;
use crate::{Error, Result};

/// Default integration density (RK4 steps per unit time).
pub const STEPS_PER_UNIT_TIME: f64 = 100.0;

/// Trajectories leaving this radius are reported as diverging.
pub const BLOW_UP_RADIUS: f64 = 1e6;

/// Duffing parameters used for the synthetic data set: `(α, β, δ)`.
pub const DUFFING_PARAMS: (f64, f64, f64) = (1.0, -1.0, 0.5);

/// A velocity field sampled on the nodes of a rectangular lattice and
/// interpolated multilinearly. Node `i` on axis `k` sits at
/// `lo[k] + i (hi[k] − lo[k]) / (shape[k] − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedField {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    /// `components[k]` holds velocity component `k` at every node, row-major.
    components: Vec<Vec<f64>>,
}

impl TabulatedField {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, components: Vec<Vec<f64>>) -> Result<Self> {
        let d = shape.len();
        if d == 0 || lo.len() != d || hi.len() != d || components.len() != d {
            return Err(Error::InvalidGeometry("tabulated field dimensions disagree".into()));
        }
        if (0..d).any(|k| !(lo[k] < hi[k]) || shape[k] < 2) {
            return Err(Error::InvalidGeometry(
                "tabulated field needs lo < hi and at least two nodes per axis".into(),
            ));
        }
        let n: usize = shape.iter().product();
        if components.iter().any(|c| c.len() != n || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidGeometry("tabulated component size or value".into()));
        }
        Ok(Self { lo, hi, shape, components })
    }

    /// Samples `f` on the lattice nodes.
    pub fn from_fn(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let d = shape.len();
        let n: usize = shape.iter().product();
        let mut components = vec![vec![0.0; n]; d];
        let mut x = vec![0.0; d];
        for flat in 0..n {
            let mut rem = flat;
            for k in (0..d).rev() {
                let i = rem % shape[k];
                rem /= shape[k];
                x[k] = lo[k] + i as f64 * (hi[k] - lo[k]) / (shape[k] - 1) as f64;
            }
            let v = f(&x);
            for k in 0..d {
                components[k][flat] = v[k];
            }
        }
        Self::new(lo, hi, shape, components)
    }

    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|k| x[k] >= self.lo[k] && x[k] <= self.hi[k])
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.contains(x) {
            return Err(Error::OutOfDomain { point: x.to_vec() });
        }
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let h = (self.hi[k] - self.lo[k]) / (self.shape[k] - 1) as f64;
            let u = ((x[k] - self.lo[k]) / h).clamp(0.0, (self.shape[k] - 1) as f64);
            let i = (u.floor() as usize).min(self.shape[k] - 2);
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let mut out = vec![0.0; d];
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let bit = (corner >> (d - 1 - k)) & 1;
                weight *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                flat = flat * self.shape[k] + base[k] + bit;
            }
            if weight != 0.0 {
                for (o, comp) in out.iter_mut().zip(&self.components) {
                    *o += weight * comp[flat];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorFieldSpec {
    /// `ẋ₁ = x₂`, `ẋ₂ = −αx₁³ − βx₁ − δx₂`.
    Duffing { alpha: f64, beta: f64, delta: f64 },
    /// `ẋ = M x + c`.
    Affine { matrix: DMatrix<f64>, offset: DVector<f64> },
    Tabulated(TabulatedField),
}

impl VectorFieldSpec {
    pub fn duffing(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && delta.is_finite()) {
            return Err(Error::InvalidInput("Duffing parameters must be finite".into()));
        }
        Ok(Self::Duffing { alpha, beta, delta })
    }

    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() != offset.len() || offset.is_empty() {
            return Err(Error::DimensionMismatch("affine field matrix/offset".into()));
        }
        Ok(Self::Affine { matrix, offset })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Duffing { .. } => 2,
            Self::Affine { offset, .. } => offset.len(),
            Self::Tabulated(t) => t.dim(),
        }
    }

    /// Non-fatal remarks about the parameters, e.g. a Duffing oscillator
    /// without the pair of off-origin equilibria.
    pub fn parameter_warnings(&self) -> Vec<String> {
        match self {
            Self::Duffing { alpha, beta, .. } if alpha * beta >= 0.0 => vec![format!(
                "alpha*beta = {} >= 0: no equilibria at (±sqrt(-beta/alpha), 0)",
                alpha * beta
            )],
            _ => Vec::new(),
        }
    }
}

fn check_point(f: &VectorFieldSpec, x: &[f64]) -> Result<()> {
    if x.len() != f.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point of dimension {} for a {}-dimensional field",
            x.len(),
            f.dim()
        )));
    }
    Ok(())
}

/// `f(x, t)`. All supported kinds are autonomous, so `t` is unused.
pub fn eval_field(f: &VectorFieldSpec, x: &[f64], _t: f64) -> Result<Vec<f64>> {
    check_point(f, x)?;
    match f {
        VectorFieldSpec::Duffing { alpha, beta, delta } => Ok(vec![
            x[1],
            -alpha * x[0].powi(3) - beta * x[0] - delta * x[1],
        ]),
        VectorFieldSpec::Affine { matrix, offset } => {
            let v = matrix * DVector::from_column_slice(x) + offset;
            Ok(v.iter().copied().collect())
        }
        VectorFieldSpec::Tabulated(t) => t.eval(x),
    }
}

/// Central-difference step for tabulated fields, as a fraction of the span.
const FD_STEP: f64 = 1e-5;

/// Partial derivative `∂f_i/∂x_k` by central differences, shifted inward
/// near the tabulated domain's boundary.
fn partial(f: &VectorFieldSpec, x: &[f64], i: usize, k: usize, h: f64, lo: f64, hi: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[k] = (x[k] + h).min(hi);
    xm[k] = (x[k] - h).max(lo);
    let span = xp[k] - xm[k];
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok((eval_field(f, &xp, 0.0)?[i] - eval_field(f, &xm, 0.0)?[i]) / span)
}

fn bounds(f: &VectorFieldSpec, k: usize) -> (f64, f64) {
    match f {
        VectorFieldSpec::Tabulated(t) => (t.lo[k], t.hi[k]),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// `∇·f` at `x`: analytic for Duffing and affine fields, central
/// differences for tabulated ones.
pub fn divergence(f: &VectorFieldSpec, x: &[f64]) -> Result<f64> {
    check_point(f, x)?;
    match f {
        VectorFieldSpec::Duffing { delta, .. } => Ok(-delta),
        VectorFieldSpec::Affine { matrix, .. } => Ok(matrix.trace()),
        VectorFieldSpec::Tabulated(t) => {
            if !t.contains(x) {
                return Err(Error::OutOfDomain { point: x.to_vec() });
            }
            (0..t.dim())
                .map(|k| {
                    let h = FD_STEP * (t.hi[k] - t.lo[k]);
                    partial(f, x, k, k, h, t.lo[k], t.hi[k])
                })
                .sum()
        }
    }
}

/// Scalar vorticity `∂f₂/∂x₁ − ∂f₁/∂x₂` of a planar field by central
/// differences with step `h` (clipped to a tabulated domain).
pub fn curl_2d(f: &VectorFieldSpec, x: &[f64], h: f64) -> Result<f64> {
    if f.dim() != 2 {
        return Err(Error::DimensionMismatch("curl_2d needs a planar field".into()));
    }
    check_point(f, x)?;
    let (lo0, hi0) = bounds(f, 0);
    let (lo1, hi1) = bounds(f, 1);
    Ok(partial(f, x, 1, 0, h, lo0, hi0)? - partial(f, x, 0, 1, h, lo1, hi1)?)
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// One particle over `[t0, t0 + steps·h]`. Returns the end point, the
/// divergence integral and the kinetic action `∫‖f‖² dt`.
fn trace_particle(f: &VectorFieldSpec, x0: &[f64], t0: f64, h: f64, steps: usize) -> Result<(Vec<f64>, f64, f64)> {
    let mut x = x0.to_vec();
    let mut div_int = 0.0;
    let mut action = 0.0;
    let sq = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>();
    for n in 0..steps {
        let t = t0 + n as f64 * h;
        let k1 = eval_field(f, &x, t)?;
        let x2 = axpy(&x, 0.5 * h, &k1);
        let k2 = eval_field(f, &x2, t + 0.5 * h)?;
        let x3 = axpy(&x, 0.5 * h, &k2);
        let k3 = eval_field(f, &x3, t + 0.5 * h)?;
        let x4 = axpy(&x, h, &k3);
        let k4 = eval_field(f, &x4, t + h)?;
        let next: Vec<f64> = (0..x.len())
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if next.iter().map(|c| c * c).sum::<f64>().sqrt() > BLOW_UP_RADIUS || next.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { time: t + h });
        }
        // Simpson on [x, midpoint stage, next]; the midpoint is the state the
        // k3 stage was evaluated at.
        let k_end = eval_field(f, &next, t + h)?;
        div_int += h / 6.0 * (divergence(f, &x)? + 4.0 * divergence(f, &x3)? + divergence(f, &next)?);
        action += h / 6.0 * (sq(&k1) + 4.0 * sq(&k3) + sq(&k_end));
        x = next;
    }
    Ok((x, div_int, action))
}

fn check_ensemble(f: &VectorFieldSpec, ens: &ParticleEnsemble, t0: f64, t1: f64, steps: usize) -> Result<()> {
    if ens.dim() != f.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dimensional ensemble in a {}-dimensional field",
            ens.dim(),
            f.dim()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("at least one integration step".into()));
    }
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::InvalidInput("non-finite time".into()));
    }
    Ok(())
}

/// Advances every particle from `t0` to `t1` in `steps` RK4 steps and
/// rescales its density value by `exp(−∫∇·f dt)`. Weights are unchanged.
pub fn propagate(
    f: &VectorFieldSpec,
    ens: &ParticleEnsemble,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<ParticleEnsemble> {
    check_ensemble(f, ens, t0, t1, steps)?;
    let dv = ens.density_values().ok_or(Error::MissingDensityValues)?;
    let h = (t1 - t0) / steps as f64;
    let traced: Vec<(Vec<f64>, f64, f64)> = (0..ens.len())
        .into_par_iter()
        .map(|i| trace_particle(f, ens.point(i), t0, h, steps))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(ens.points().len());
    let mut densities = Vec::with_capacity(ens.len());
    for ((x, div_int, _), rho) in traced.into_iter().zip(dv) {
        points.extend(x);
        densities.push(rho * (-div_int).exp());
    }
    ParticleEnsemble::new(ens.dim(), points, ens.weights().to_vec(), Some(densities))
}

/// `Σ wᵢ ∫_{t0}^{t1} ‖f(xᵢ(t))‖² dt` along the true trajectories.
pub fn path_kinetic_energy(
    f: &VectorFieldSpec,
    ens: &ParticleEnsemble,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<f64> {
    check_ensemble(f, ens, t0, t1, steps)?;
    let h = (t1 - t0) / steps as f64;
    let actions: Vec<f64> = (0..ens.len())
        .into_par_iter()
        .map(|i| trace_particle(f, ens.point(i), t0, h, steps).map(|r| r.2))
        .collect::<Result<_>>()?;
    Ok(actions.iter().zip(ens.weights()).map(|(a, w)| a * w).sum())
}

/// RK4 step count for a horizon of length `dt` at the default density.
pub fn default_steps(dt: f64) -> usize {
    ((dt.abs() * STEPS_PER_UNIT_TIME).ceil() as usize).max(1)
}

/// `n` points uniform on `[lo, hi]²` from a ChaCha8 stream, each carrying
/// the uniform density value `1 / (hi − lo)²`.
pub fn uniform_square(n: usize, lo: f64, hi: f64, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 || !(lo < hi) {
        return Err(Error::InvalidInput("need n ≥ 1 and lo < hi".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..2 * n).map(|_| rng.random_range(lo..hi)).collect();
    let value = 1.0 / ((hi - lo) * (hi - lo));
    ParticleEnsemble::uniform(2, points, Some(vec![value; n]))
}

/// Snapshots of the Duffing flow (`α = 1, β = −1, δ = 0.5`) started from
/// `n` uniform samples on `[−2, 2]²`, one ensemble per horizon time.
pub fn duffing_dataset(n: usize, seed: u64, horizons: &[f64]) -> Result<Vec<ParticleEnsemble>> {
    if horizons.is_empty() || horizons[0] <= 0.0 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "horizons must be positive and strictly increasing".into(),
        ));
    }
    let (alpha, beta, delta) = DUFFING_PARAMS;
    let field = VectorFieldSpec::duffing(alpha, beta, delta)?;
    let mut current = uniform_square(n, -2.0, 2.0, seed)?;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(horizons.len());
    for &tj in horizons {
        current = propagate(&field, &current, t, tj, default_steps(tj - t))?;
        out.push(current.clone());
        t = tj;
    }
    Ok(out)
}
