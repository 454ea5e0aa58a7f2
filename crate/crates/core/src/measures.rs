//! Density representations: rectangular grids, weighted particles and
//! Gaussians, plus the conversions between them.
//!
//! Grid values live at cell centers and are read as a piecewise-constant
//! density; every integral over a grid is the midpoint Riemann sum
//! `sum(values) * cell_volume`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Largest grid dimension supported by the grid-based solvers.
pub const MAX_GRID_DIM: usize = 3;

/// Tolerated deviation from unit mass for inputs that must be normalized.
pub const MASS_TOLERANCE: f64 = 1e-4;

/// Relative (to the trace) eigenvalue slack below zero that is repaired
/// instead of rejected.
pub const PSD_REPAIR_TOLERANCE: f64 = 1e-10;

/// Masses this close to one count as normalized.
const UNIT_MASS_SLACK: f64 = 1e-13;

/// Nonnegative density values on a box, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl GridDensity {
    /// Builds a grid after validating the geometry. Values are only checked
    /// for finiteness; sign and mass are the business of [`normalize`].
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let dim = shape.len();
        if dim == 0 || dim > MAX_GRID_DIM {
            return Err(Error::InvalidGeometry(format!(
                "grid dimension {dim} not in 1..={MAX_GRID_DIM}"
            )));
        }
        if lo.len() != dim || hi.len() != dim {
            return Err(Error::InvalidGeometry(
                "lo/hi length differs from shape length".into(),
            ));
        }
        for k in 0..dim {
            if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] < hi[k]) {
                return Err(Error::InvalidGeometry(format!(
                    "axis {k}: need lo < hi, got [{}, {}]",
                    lo[k], hi[k]
                )));
            }
            if shape[k] == 0 {
                return Err(Error::InvalidGeometry(format!("axis {k} has zero cells")));
            }
        }
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "{} values for {} cells",
                values.len(),
                n
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite density value".into()));
        }
        Ok(Self {
            lo,
            hi,
            shape,
            values,
        })
    }

    /// Grid whose values are `f` evaluated at the cell centers (not normalized).
    pub fn from_fn(
        lo: Vec<f64>,
        hi: Vec<f64>,
        shape: Vec<usize>,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut g = Self::new(lo, hi, shape, vec![0.0; n])?;
        let mut center = vec![0.0; g.dim()];
        for i in 0..n {
            g.cell_center_into(i, &mut center);
            g.values[i] = f(&center);
        }
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite density value".into()));
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn num_cells(&self) -> usize {
        self.values.len()
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| (self.hi[k] - self.lo[k]) / self.shape[k] as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_widths().iter().product()
    }

    /// Riemann-sum integral of the values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// True when both grids share bounds and shape exactly.
    pub fn same_geometry(&self, other: &GridDensity) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.shape == other.shape
    }

    /// Per-axis cell indices of a flat (row-major) index.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
        idx
    }

    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        self.cell_center_into(flat, &mut c);
        c
    }

    fn cell_center_into(&self, mut flat: usize, out: &mut [f64]) {
        for k in (0..self.dim()).rev() {
            let i = flat % self.shape[k];
            flat /= self.shape[k];
            let h = (self.hi[k] - self.lo[k]) / self.shape[k] as f64;
            out[k] = self.lo[k] + (i as f64 + 0.5) * h;
        }
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.lo.clone(), self.hi.clone(), self.shape.clone(), values)
    }
}

/// Rescales a grid to unit mass.
pub fn normalize(g: &GridDensity) -> Result<GridDensity> {
    if let Some((index, &value)) = g.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeDensity { index, value });
    }
    let mass = g.mass();
    if mass <= 0.0 {
        return Err(Error::AllZeroDensity);
    }
    // Grids already at unit mass up to rounding are returned untouched, which
    // makes normalization idempotent bit-for-bit.
    if (mass - 1.0).abs() <= UNIT_MASS_SLACK {
        return Ok(g.clone());
    }
    let mut out = g.with_values(g.values.iter().map(|v| v / mass).collect())?;
    let m2 = out.mass();
    if (m2 - 1.0).abs() > UNIT_MASS_SLACK {
        out = out.with_values(out.values.iter().map(|v| v / m2).collect())?;
    }
    Ok(out)
}

/// Mean and covariance of a normalized grid, treating each cell as uniform
/// over its extent (so a single occupied cell has variance `h²/12` per axis).
pub fn moments(g: &GridDensity) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mass = g.mass();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::UnnormalizedInput { mass });
    }
    let d = g.dim();
    let vol = g.cell_volume();
    let mut mean = DVector::zeros(d);
    let mut c = vec![0.0; d];
    for (i, &v) in g.values.iter().enumerate() {
        g.cell_center_into(i, &mut c);
        for k in 0..d {
            mean[k] += c[k] * v * vol;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, &v) in g.values.iter().enumerate() {
        g.cell_center_into(i, &mut c);
        let w = v * vol;
        for a in 0..d {
            let da = c[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (c[b] - mean[b]) * w;
            }
        }
    }
    let widths = g.cell_widths();
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
        cov[(a, a)] += widths[a] * widths[a] / 12.0 * mass;
    }
    Ok((mean, cov))
}

/// Weighted points, optionally carrying the exact density value at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    density_values: Option<Vec<f64>>,
}

impl ParticleEnsemble {
    /// `points` is row-major, `weights.len()` rows of `dim` coordinates.
    pub fn new(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        density_values: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("zero-dimensional particles".into()));
        }
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty ensemble".into()));
        }
        if points.len() != n * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates for {n} particles of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite particle coordinate".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {total}")));
        }
        if let Some(dv) = &density_values {
            if dv.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} density values for {n} particles",
                    dv.len()
                )));
            }
            if dv.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidInput("density values must be positive".into()));
            }
        }
        Ok(Self {
            dim,
            points,
            weights,
            density_values,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>, density_values: Option<Vec<f64>>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        Self::new(dim, points, vec![1.0 / n.max(1) as f64; n], density_values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn density_values(&self) -> Option<&[f64]> {
        self.density_values.as_deref()
    }

    /// Weighted sample mean and (biased) covariance.
    pub fn sample_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for (i, w) in self.weights.iter().enumerate() {
            for k in 0..d {
                mean[k] += w * self.point(i)[k];
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (i, w) in self.weights.iter().enumerate() {
            let p = self.point(i);
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += w * (p[a] - mean[a]) * (p[b] - mean[b]);
                }
            }
        }
        (mean, cov)
    }
}

/// Gaussian density `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianDensity {
    /// Validates symmetry and positive semidefiniteness. Eigenvalues that
    /// fall below zero by less than `1e-10 * trace` are clamped to zero and
    /// the covariance is re-symmetrized; larger violations are errors.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidInput("zero-dimensional Gaussian".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {d}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite Gaussian parameter".into()));
        }
        let max_abs = cov.amax();
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 * max_abs {
            return Err(Error::InvalidInput(format!(
                "covariance asymmetric by {asym:e}"
            )));
        }
        let cov = repair_psd(&cov).map_err(|e| match e {
            Error::NonPsdInput { min_eigenvalue } => Error::NonPsdCovariance { min_eigenvalue },
            other => other,
        })?;
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_rows: &[&[f64]]) -> Result<Self> {
        let d = mean.len();
        let mut cov = DMatrix::zeros(d, d);
        if cov_rows.len() != d {
            return Err(Error::DimensionMismatch("covariance row count".into()));
        }
        for (i, row) in cov_rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch("covariance row length".into()));
            }
            for (j, v) in row.iter().enumerate() {
                cov[(i, j)] = *v;
            }
        }
        Self::new(DVector::from_column_slice(mean), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Density value at `x`, or `None` for a singular covariance.
    pub fn pdf(&self, x: &[f64]) -> Option<f64> {
        let chol = self.cov.clone().cholesky()?;
        let d = self.dim();
        let diff = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = chol.l().solve_lower_triangular(&diff)?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let q = z.norm_squared();
        Some((-0.5 * (q + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())).exp())
    }
}

/// Symmetrizes `s` and clamps eigenvalues in `(-1e-10 * trace, 0)` to zero.
pub(crate) fn repair_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    let tol = PSD_REPAIR_TOLERANCE * sym.trace().abs().max(f64::MIN_POSITIVE);
    if min < -tol {
        return Err(Error::NonPsdInput { min_eigenvalue: min });
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Draws `n` equally weighted samples from `g` with a ChaCha8 stream seeded
/// from `seed`. Density values are attached when the covariance is
/// nonsingular.
pub fn sample_gaussian(g: &GaussianDensity, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    let d = g.dim();
    let eig = SymmetricEigen::new(g.cov.clone());
    if eig.eigenvalues.min() < -PSD_REPAIR_TOLERANCE * g.cov.trace().abs() {
        return Err(Error::NonPsdCovariance {
            min_eigenvalue: eig.eigenvalues.min(),
        });
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * d);
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        for k in 0..d {
            z[k] = StandardNormal.sample(&mut rng);
        }
        let x = &g.mean + &root * &z;
        points.extend(x.iter());
    }
    let density_values = if g.cov.clone().cholesky().is_some() {
        let dv: Vec<f64> = points.chunks(d).filter_map(|p| g.pdf(p)).collect();
        (dv.len() == n && dv.iter().all(|v| *v > 0.0)).then_some(dv)
    } else {
        None
    };
    ParticleEnsemble::uniform(d, points, density_values)
}

/// Parameters of the scattered-data interpolation behind [`grid_from_particles`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdwParams {
    /// Nearest particles blended per grid node.
    pub neighbors: usize,
    /// Inverse-distance exponent.
    pub power: f64,
    /// Nodes farther than this multiple of the median nearest-neighbour
    /// spacing from every particle are outside the support and get zero.
    pub support_factor: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        Self {
            neighbors: 8,
            power: 2.0,
            support_factor: 2.0,
        }
    }
}

/// Interpolates particle density values onto a grid and normalizes it.
pub fn grid_from_particles(
    p: &ParticleEnsemble,
    lo: &[f64],
    hi: &[f64],
    shape: &[usize],
) -> Result<GridDensity> {
    grid_from_particles_with(p, lo, hi, shape, IdwParams::default())
}

pub fn grid_from_particles_with(
    p: &ParticleEnsemble,
    lo: &[f64],
    hi: &[f64],
    shape: &[usize],
    params: IdwParams,
) -> Result<GridDensity> {
    let dim = p.dim();
    let template = GridDensity::new(
        lo.to_vec(),
        hi.to_vec(),
        shape.to_vec(),
        vec![0.0; shape.iter().product()],
    )?;
    if template.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "grid is {}-dimensional, particles are {dim}-dimensional",
            template.dim()
        )));
    }
    let dv = p.density_values().ok_or(Error::MissingDensityValues)?;
    if p.len() < dim + 1 {
        return Err(Error::DegenerateEnsemble { n: p.len(), dim });
    }
    for i in 0..p.len() {
        let x = p.point(i);
        if (0..dim).any(|k| x[k] < lo[k] || x[k] > hi[k]) {
            return Err(Error::PointOutOfBounds { index: i });
        }
    }
    let index = BucketIndex::new(p.points(), dim, lo, hi);

    let mut nn: Vec<f64> = (0..p.len())
        .map(|i| {
            index
                .nearest(p.point(i), 2)
                .into_iter()
                .find(|&(j, _)| j != i)
                .map(|(_, d2)| d2.sqrt())
                .unwrap_or(0.0)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let support_radius = params.support_factor * nn[nn.len() / 2];

    let k = params.neighbors.max(1).min(p.len());
    let mut values = vec![0.0; template.num_cells()];
    let mut center = vec![0.0; dim];
    for (c, out) in values.iter_mut().enumerate() {
        template.cell_center_into(c, &mut center);
        let near = index.nearest(&center, k);
        let (j0, d0) = near[0];
        if d0.sqrt() > support_radius {
            continue;
        }
        if d0 == 0.0 {
            *out = dv[j0];
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(j, d2) in &near {
            let w = d2.sqrt().powf(-params.power);
            num += w * dv[j];
            den += w;
        }
        *out = (num / den).max(0.0);
    }
    normalize(&template.with_values(values)?)
}

/// Uniform bucket grid over the particle box for k-nearest-neighbour queries.
struct BucketIndex<'a> {
    points: &'a [f64],
    dim: usize,
    lo: Vec<f64>,
    width: Vec<f64>,
    counts: Vec<usize>,
    buckets: Vec<Vec<usize>>,
}

impl<'a> BucketIndex<'a> {
    fn new(points: &'a [f64], dim: usize, lo: &[f64], hi: &[f64]) -> Self {
        let n = points.len() / dim;
        // About two particles per bucket.
        let per_axis = ((n as f64 / 2.0).powf(1.0 / dim as f64).ceil() as usize).max(1);
        let counts = vec![per_axis; dim];
        let width: Vec<f64> = (0..dim)
            .map(|k| (hi[k] - lo[k]) / per_axis as f64)
            .collect();
        let total: usize = counts.iter().product();
        let mut idx = Self {
            points,
            dim,
            lo: lo.to_vec(),
            width,
            counts,
            buckets: vec![Vec::new(); total],
        };
        for i in 0..n {
            let b = idx.bucket_of(&points[i * dim..(i + 1) * dim]);
            let flat = idx.flatten(&b);
            idx.buckets[flat].push(i);
        }
        idx
    }

    fn bucket_of(&self, x: &[f64]) -> Vec<isize> {
        (0..self.dim)
            .map(|k| {
                let b = ((x[k] - self.lo[k]) / self.width[k]).floor() as isize;
                b.clamp(0, self.counts[k] as isize - 1)
            })
            .collect()
    }

    fn flatten(&self, b: &[isize]) -> usize {
        b.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &c)| acc * c + i as usize)
    }

    /// The `k` nearest particles to `x` as `(index, squared distance)`,
    /// closest first.
    fn nearest(&self, x: &[f64], k: usize) -> Vec<(usize, f64)> {
        let home = self.bucket_of(x);
        let mut found: Vec<(usize, f64)> = Vec::new();
        let max_ring = *self.counts.iter().max().unwrap_or(&1) as isize;
        let min_width = self.width.iter().cloned().fold(f64::INFINITY, f64::min);
        for ring in 0..=max_ring {
            self.visit_ring(&home, ring, &mut |i| {
                let p = &self.points[i * self.dim..(i + 1) * self.dim];
                let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                found.push((i, d2));
            });
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.truncate(k);
                // Anything in later rings is at least `ring * min_width` away.
                let reach = ring as f64 * min_width;
                if found[k - 1].1 <= reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }

    fn visit_ring(&self, home: &[isize], ring: isize, f: &mut impl FnMut(usize)) {
        let dim = self.dim;
        let mut offset = vec![-ring; dim];
        loop {
            if offset.iter().any(|o| o.abs() == ring) {
                let cell: Vec<isize> = home.iter().zip(&offset).map(|(h, o)| h + o).collect();
                if cell
                    .iter()
                    .zip(&self.counts)
                    .all(|(&c, &n)| c >= 0 && c < n as isize)
                {
                    for &i in &self.buckets[self.flatten(&cell)] {
                        f(i);
                    }
                }
            }
            let mut k = 0;
            loop {
                if k == dim {
                    return;
                }
                offset[k] += 1;
                if offset[k] <= ring {
                    break;
                }
                offset[k] = -ring;
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_box(n: usize) -> GridDensity {
        GridDensity::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![n, n], vec![1.0; n * n]).unwrap()
    }

    #[test]
    fn normalize_uniform_box() {
        let g = normalize(&uniform_box(16)).unwrap();
        assert!(g.values().iter().all(|v| (v - 0.0625).abs() < 1e-15));
    }

    #[test]
    fn normalize_two_cells() {
        let g = GridDensity::new(vec![0.0], vec![2.0], vec![2], vec![2.0, 0.0]).unwrap();
        assert_eq!(normalize(&g).unwrap().values(), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_bad_values() {
        let g = GridDensity::new(vec![0.0], vec![1.0], vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(normalize(&g), Err(Error::AllZeroDensity)));
        let g = GridDensity::new(vec![0.0], vec![1.0], vec![2], vec![1.0, -0.1]).unwrap();
        assert!(matches!(
            normalize(&g),
            Err(Error::NegativeDensity { index: 1, .. })
        ));
    }

    #[test]
    fn normalize_is_idempotent() {
        let g = GridDensity::from_fn(vec![-1.0, 0.0], vec![2.0, 0.7], vec![13, 7], |x| {
            1.0 + x[0].sin() * x[1]
        })
        .unwrap();
        let once = normalize(&g).unwrap();
        let twice = normalize(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn geometry_validation() {
        assert!(GridDensity::new(vec![1.0], vec![1.0], vec![2], vec![1.0, 1.0]).is_err());
        assert!(GridDensity::new(vec![0.0], vec![1.0], vec![0], vec![]).is_err());
        assert!(GridDensity::new(vec![0.0; 4], vec![1.0; 4], vec![1; 4], vec![1.0]).is_err());
    }

    #[test]
    fn moments_of_symmetric_uniform() {
        let g = normalize(&uniform_box(16)).unwrap();
        let (mean, cov) = moments(&g).unwrap();
        assert!(mean.amax() < 1e-14);
        // Uniform on [-2, 2]: variance 16/12.
        assert!((cov[(0, 0)] - 16.0 / 12.0).abs() < 1e-12);
        assert!(cov[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn moments_of_rasterized_standard_normal() {
        let g = GridDensity::from_fn(vec![-6.0, -6.0], vec![6.0, 6.0], vec![120, 120], |x| {
            (-0.5 * (x[0] * x[0] + x[1] * x[1])).exp()
        })
        .unwrap();
        let (mean, cov) = moments(&normalize(&g).unwrap()).unwrap();
        assert!(mean.amax() < 1e-12);
        let id = DMatrix::<f64>::identity(2, 2);
        assert!((cov - id).amax() < 0.02);
    }

    #[test]
    fn moments_of_single_cell() {
        let mut v = vec![0.0; 10];
        v[3] = 1.0;
        let g = normalize(&GridDensity::new(vec![0.0], vec![1.0], vec![10], v).unwrap()).unwrap();
        let (mean, cov) = moments(&g).unwrap();
        assert!((mean[0] - 0.35).abs() < 1e-14);
        assert!((cov[(0, 0)] - 0.01 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn moments_rejects_unnormalized() {
        assert!(matches!(
            moments(&uniform_box(4)),
            Err(Error::UnnormalizedInput { .. })
        ));
    }

    #[test]
    fn particles_on_centers_give_uniform_grid() {
        let g = uniform_box(4);
        let pts: Vec<f64> = (0..16).flat_map(|i| g.cell_center(i)).collect();
        let p = ParticleEnsemble::uniform(2, pts, Some(vec![3.0; 16])).unwrap();
        let out = grid_from_particles(&p, &[-2.0, -2.0], &[2.0, 2.0], &[4, 4]).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.0625).abs() < 1e-14));
    }

    #[test]
    fn grid_from_particles_errors() {
        let p = ParticleEnsemble::uniform(2, vec![0.0, 0.0], Some(vec![1.0])).unwrap();
        assert!(matches!(
            grid_from_particles(&p, &[-1.0, -1.0], &[1.0, 1.0], &[4, 4]),
            Err(Error::DegenerateEnsemble { n: 1, dim: 2 })
        ));
        let p = ParticleEnsemble::uniform(1, vec![0.0, 0.5, 3.0], Some(vec![1.0; 3])).unwrap();
        assert!(matches!(
            grid_from_particles(&p, &[-1.0], &[1.0], &[4]),
            Err(Error::PointOutOfBounds { index: 2 })
        ));
        let p = ParticleEnsemble::uniform(1, vec![0.0, 0.5], None).unwrap();
        assert!(matches!(
            grid_from_particles(&p, &[-1.0], &[1.0], &[4]),
            Err(Error::MissingDensityValues)
        ));
    }

    #[test]
    fn bucket_index_matches_brute_force() {
        let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.3], &[0.3, 0.5]]).unwrap();
        let p = sample_gaussian(&g, 300, 5).unwrap();
        let idx = BucketIndex::new(p.points(), 2, &[-5.0, -5.0], &[5.0, 5.0]);
        for q in [[0.0, 0.0], [3.0, -4.0], [-4.9, 4.9], [0.7, 0.1]] {
            let fast = idx.nearest(&q, 8);
            let mut brute: Vec<(usize, f64)> = (0..p.len())
                .map(|i| {
                    let x = p.point(i);
                    (i, (x[0] - q[0]).powi(2) + (x[1] - q[1]).powi(2))
                })
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(fast, brute[..8].to_vec());
        }
    }

    #[test]
    fn sample_gaussian_law_of_large_numbers() {
        let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = sample_gaussian(&g, 100_000, 11).unwrap();
        let (mean, cov) = p.sample_moments();
        assert!(mean.amax() < 0.02);
        assert!((cov - DMatrix::<f64>::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn sample_gaussian_degenerate_and_deterministic() {
        let g = GaussianDensity::from_slices(&[1.0, -2.0], &[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        let p = sample_gaussian(&g, 10, 1).unwrap();
        assert!(p.points().chunks(2).all(|x| x == [1.0, -2.0]));
        assert!(p.density_values().is_none());

        let g = GaussianDensity::from_slices(&[0.0], &[&[2.0]]).unwrap();
        assert_eq!(sample_gaussian(&g, 50, 9).unwrap(), sample_gaussian(&g, 50, 9).unwrap());
        assert_ne!(sample_gaussian(&g, 50, 9).unwrap(), sample_gaussian(&g, 50, 10).unwrap());
    }

    #[test]
    fn gaussian_psd_repair_and_rejection() {
        // Tiny negative eigenvalue from rounding is repaired.
        let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 1.0], &[1.0, 1.0 - 1e-13]]);
        assert!(g.is_ok());
        let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, -0.5]]);
        assert!(matches!(g, Err(Error::NonPsdCovariance { .. })));
        let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.2], &[0.1, 1.0]]);
        assert!(g.is_err());
    }

    #[test]
    fn gaussian_pdf_normalization() {
        let g = GaussianDensity::from_slices(&[0.5], &[&[0.25]]).unwrap();
        let peak = g.pdf(&[0.5]).unwrap();
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI * 0.25).sqrt()).abs() < 1e-14);
    }
}
