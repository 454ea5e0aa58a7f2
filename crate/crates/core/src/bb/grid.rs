//! Space-time grids, the staggered-to-centered interpolation and the two
//! affine projections used by the splitting.
//!
//! Arrays are indexed `[time, x_1, …, x_d]`. On the staggered grid the
//! density has `T + 1` slices and the axis-`k` momentum has `T` time layers
//! with `n_k + 1` faces along axis `k`. The centered grid has `T` layers of
//! cell-centered values for every component.

use std::f64::consts::PI;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayViewMutD, Axis, IxDyn, Slice, Zip};

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub steps: usize,
    pub shape: Vec<usize>,
    pub widths: Vec<f64>,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn ds(&self) -> f64 {
        1.0 / self.steps as f64
    }

    fn dims(&self, time: usize, face_axis: Option<usize>) -> IxDyn {
        let mut d = Vec::with_capacity(self.dim() + 1);
        d.push(time);
        for (k, &n) in self.shape.iter().enumerate() {
            d.push(if face_axis == Some(k) { n + 1 } else { n });
        }
        IxDyn(&d)
    }

    pub fn zeros_staggered(&self) -> Fields {
        Fields {
            phi: ArrayD::zeros(self.dims(self.steps + 1, None)),
            m: (0..self.dim())
                .map(|k| ArrayD::zeros(self.dims(self.steps, Some(k))))
                .collect(),
        }
    }

    #[cfg(test)]
    pub fn zeros_centered(&self) -> Fields {
        Fields {
            phi: ArrayD::zeros(self.dims(self.steps, None)),
            m: (0..self.dim())
                .map(|_| ArrayD::zeros(self.dims(self.steps, None)))
                .collect(),
        }
    }

    /// Staggered to centered: averages of neighbouring slices and faces.
    pub fn interpolate(&self, v: &Fields) -> Fields {
        let t = self.steps;
        let phi = average_pairs(&v.phi, 0, t);
        let m = v
            .m
            .iter()
            .enumerate()
            .map(|(k, mk)| average_pairs(mk, k + 1, self.shape[k]))
            .collect();
        Fields { phi, m }
    }

    /// Adjoint of [`Layout::interpolate`].
    pub fn interpolate_adjoint(&self, u: &Fields) -> Fields {
        let mut out = self.zeros_staggered();
        spread_pairs(&mut out.phi, &u.phi, 0, self.steps);
        for (k, (mk, uk)) in out.m.iter_mut().zip(&u.m).enumerate() {
            spread_pairs(mk, uk, k + 1, self.shape[k]);
        }
        out
    }

    /// `∂_s φ + ∇·m` on the centered grid.
    pub fn divergence(&self, v: &Fields) -> ArrayD<f64> {
        let t = self.steps;
        let mut r = difference(&v.phi, 0, t, 1.0 / self.ds());
        for (k, mk) in v.m.iter().enumerate() {
            r += &difference(mk, k + 1, self.shape[k], 1.0 / self.widths[k]);
        }
        r
    }
}

fn average_pairs(a: &ArrayD<f64>, axis: usize, n: usize) -> ArrayD<f64> {
    let lo = a.slice_axis(Axis(axis), Slice::from(0..n));
    let hi = a.slice_axis(Axis(axis), Slice::from(1..n + 1));
    let mut out = lo.to_owned();
    Zip::from(&mut out).and(&hi).for_each(|o, &h| *o = 0.5 * (*o + h));
    out
}

fn spread_pairs(out: &mut ArrayD<f64>, u: &ArrayD<f64>, axis: usize, n: usize) {
    Zip::from(out.slice_axis_mut(Axis(axis), Slice::from(0..n)))
        .and(u)
        .for_each(|o, &x| *o += 0.5 * x);
    Zip::from(out.slice_axis_mut(Axis(axis), Slice::from(1..n + 1)))
        .and(u)
        .for_each(|o, &x| *o += 0.5 * x);
}

fn difference(a: &ArrayD<f64>, axis: usize, n: usize, scale: f64) -> ArrayD<f64> {
    let lo = a.slice_axis(Axis(axis), Slice::from(0..n));
    let hi = a.slice_axis(Axis(axis), Slice::from(1..n + 1));
    let mut out = hi.to_owned();
    Zip::from(&mut out).and(&lo).for_each(|o, &l| *o = (*o - l) * scale);
    out
}

/// One density array and one momentum array per spatial axis.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Fields {
    pub phi: ArrayD<f64>,
    pub m: Vec<ArrayD<f64>>,
}

impl Fields {
    fn arrays(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        std::iter::once(&self.phi).chain(self.m.iter())
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        std::iter::once(&mut self.phi).chain(self.m.iter_mut())
    }

    /// `self ← f(self, other)` elementwise.
    pub fn zip_with(&mut self, other: &Fields, f: impl Fn(f64, f64) -> f64 + Copy) {
        for (a, b) in self.arrays_mut().zip(other.arrays()) {
            Zip::from(a).and(b).for_each(|x, &y| *x = f(*x, y));
        }
    }

    pub fn max_abs_momentum(&self) -> f64 {
        self.m
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// Constant-coefficient tridiagonal solver for `1.5 x_i + 0.25 (x_{i−1} + x_{i+1})`.
struct Thomas {
    upper: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl Thomas {
    const DIAG: f64 = 1.5;
    const OFF: f64 = 0.25;

    fn new(n: usize) -> Self {
        let mut upper = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            let pivot = Self::DIAG - Self::OFF * prev;
            inv_pivot[i] = 1.0 / pivot;
            upper[i] = Self::OFF / pivot;
            prev = upper[i];
        }
        Self { upper, inv_pivot }
    }

    /// Solves for the interior of `lane`, whose two end entries are fixed.
    fn solve_interior(&self, lane: &mut [f64]) {
        let n = lane.len() - 2;
        if n == 0 {
            return;
        }
        lane[1] -= Self::OFF * lane[0];
        lane[n] -= Self::OFF * lane[n + 1];
        let mut prev = 0.0;
        for i in 0..n {
            let v = (lane[i + 1] - Self::OFF * prev) * self.inv_pivot[i];
            lane[i + 1] = v;
            prev = v;
        }
        for i in (0..n - 1).rev() {
            lane[i + 1] -= self.upper[i] * lane[i + 2];
        }
    }
}

fn for_each_lane(a: &mut ArrayD<f64>, axis: usize, buf: &mut Vec<f64>, mut f: impl FnMut(&mut [f64])) {
    for mut lane in a.lanes_mut(Axis(axis)) {
        buf.clear();
        buf.extend(lane.iter().copied());
        f(buf);
        for (l, b) in lane.iter_mut().zip(buf.iter()) {
            *l = *b;
        }
    }
}

/// Boundary data shared by both projections.
pub(crate) struct Boundary {
    pub src: ArrayD<f64>,
    pub tgt: ArrayD<f64>,
}

impl Boundary {
    /// Writes the endpoint slices and zero boundary fluxes into `v`.
    pub fn impose(&self, layout: &Layout, v: &mut Fields) {
        v.phi.index_axis_mut(Axis(0), 0).assign(&self.src);
        v.phi.index_axis_mut(Axis(0), layout.steps).assign(&self.tgt);
        for (k, mk) in v.m.iter_mut().enumerate() {
            let n = layout.shape[k];
            mk.index_axis_mut(Axis(k + 1), 0).fill(0.0);
            mk.index_axis_mut(Axis(k + 1), n).fill(0.0);
        }
    }
}

/// Orthogonal projection onto `{U = I(V)}` with the boundary data fixed.
pub(crate) struct InterpolationProjector {
    time: Thomas,
    space: Vec<Thomas>,
}

impl InterpolationProjector {
    pub fn new(layout: &Layout) -> Self {
        Self {
            time: Thomas::new(layout.steps - 1),
            space: layout.shape.iter().map(|&n| Thomas::new(n - 1)).collect(),
        }
    }

    /// `(Id + IᵀI) V = V₀ + IᵀU₀` per lane, then `U = I(V)`.
    pub fn project(&self, layout: &Layout, bc: &Boundary, u0: &Fields, v0: &Fields) -> (Fields, Fields) {
        let mut v = layout.interpolate_adjoint(u0);
        v.zip_with(v0, |a, b| a + b);
        bc.impose(layout, &mut v);
        let mut buf = Vec::new();
        for_each_lane(&mut v.phi, 0, &mut buf, |lane| self.time.solve_interior(lane));
        for (k, mk) in v.m.iter_mut().enumerate() {
            let solver = &self.space[k];
            for_each_lane(mk, k + 1, &mut buf, |lane| solver.solve_interior(lane));
        }
        (layout.interpolate(&v), v)
    }
}

/// Orthogonal projection onto the discrete continuity constraint with the
/// boundary data fixed. The normal matrix `AAᵀ` is a sum of one-dimensional
/// Neumann Laplacians, diagonalized by the orthonormal cosine basis.
pub(crate) struct ContinuityProjector {
    bases: Vec<Array2<f64>>,
    inv_eig: ArrayD<f64>,
}

impl ContinuityProjector {
    pub fn new(layout: &Layout) -> Self {
        let mut sizes = vec![(layout.steps, layout.ds())];
        sizes.extend(layout.shape.iter().copied().zip(layout.widths.iter().copied()));
        let bases = sizes.iter().map(|&(n, _)| cosine_basis(n)).collect();
        let eigs: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&(n, h)| {
                (0..n)
                    .map(|j| (2.0 - 2.0 * (PI * j as f64 / n as f64).cos()) / (h * h))
                    .collect()
            })
            .collect();
        let dims: Vec<usize> = sizes.iter().map(|&(n, _)| n).collect();
        let inv_eig = ArrayD::from_shape_fn(IxDyn(&dims), |idx| {
            let total: f64 = (0..dims.len()).map(|a| eigs[a][idx[a]]).sum();
            if (0..dims.len()).all(|a| idx[a] == 0) {
                0.0
            } else {
                1.0 / total
            }
        });
        Self { bases, inv_eig }
    }

    pub fn project(&self, layout: &Layout, bc: &Boundary, v0: &Fields) -> Fields {
        let mut v = v0.clone();
        bc.impose(layout, &mut v);
        let mut lambda = layout.divergence(&v);
        for (a, q) in self.bases.iter().enumerate() {
            apply_along(&mut lambda, a, q, false);
        }
        lambda *= &self.inv_eig;
        for (a, q) in self.bases.iter().enumerate() {
            apply_along(&mut lambda, a, q, true);
        }
        // V ← V − Aᵀλ; the fixed entries are restored afterwards.
        let inv_ds = 1.0 / layout.ds();
        subtract_gradient(&mut v.phi, &lambda, 0, layout.steps, inv_ds);
        for (k, mk) in v.m.iter_mut().enumerate() {
            subtract_gradient(mk, &lambda, k + 1, layout.shape[k], 1.0 / layout.widths[k]);
        }
        bc.impose(layout, &mut v);
        v
    }
}

/// `out[j] −= (λ[j−1] − λ[j]) · scale` for the staggered index `j`.
fn subtract_gradient(out: &mut ArrayD<f64>, lambda: &ArrayD<f64>, axis: usize, n: usize, scale: f64) {
    Zip::from(out.slice_axis_mut(Axis(axis), Slice::from(1..n + 1)))
        .and(lambda)
        .for_each(|o, &l| *o -= l * scale);
    Zip::from(out.slice_axis_mut(Axis(axis), Slice::from(0..n)))
        .and(lambda)
        .for_each(|o, &l| *o += l * scale);
}

/// Rows are the orthonormal DCT-II basis vectors.
fn cosine_basis(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(j, i)| {
        let c = if j == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        c * (PI * j as f64 * (i as f64 + 0.5) / n as f64).cos()
    })
}

/// Multiplies every lane along `axis` by `q` (or `qᵀ`).
fn apply_along(a: &mut ArrayD<f64>, axis: usize, q: &Array2<f64>, transpose: bool) {
    let shape = a.shape().to_vec();
    let pre: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    let view: ArrayViewMutD<f64> = a.view_mut();
    let mut blocks = view
        .into_shape_with_order((pre, n, post))
        .expect("standard layout");
    let q = if transpose { q.t() } else { q.view() };
    if post == 1 {
        let mut rows = blocks.into_shape_with_order((pre, n)).expect("standard layout");
        let mut out = Array2::<f64>::zeros((pre, n));
        general_mat_mul(1.0, &rows, &q.t(), 0.0, &mut out);
        rows.assign(&out);
        return;
    }
    let mut out = Array2::<f64>::zeros((n, post));
    for mut block in blocks.outer_iter_mut() {
        general_mat_mul(1.0, &q, &block, 0.0, &mut out);
        block.assign(&out);
    }
}
