//! Exact optimal transport between finitely supported measures under the
//! squared Euclidean cost.
//!
//! [`solve_plan`] runs the transportation simplex: north-west-corner start,
//! block-search pricing for the entering cell, and a symbolic lexicographic
//! perturbation of the marginals (supplies `a_i + ε`, last demand
//! `b_n + N_s ε`) so that no pivot is degenerate. Flows carry their
//! ε-coefficient alongside the real part; the reported plan and cost use the
//! real part only.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::measures::{GridDensity, ParticleEnsemble};
use crate::{Error, Result};

/// Marginal mismatch tolerated before a problem is declared infeasible.
pub const MARGINAL_TOLERANCE: f64 = 1e-8;

/// Dense cost matrices are used up to this many entries; larger problems
/// evaluate costs on demand.
pub const DENSE_COST_LIMIT: usize = 10_000_000;

/// Optimality certificate: every reduced cost is at least
/// `-OPTIMALITY_TOLERANCE * max_cost`.
pub const OPTIMALITY_TOLERANCE: f64 = 1e-9;

/// Pivot budget per cell of the cost matrix.
pub const PIVOTS_PER_CELL: usize = 50;

/// Atoms with strictly positive masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() {
            return Err(Error::InvalidInput("empty discrete measure".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite atom coordinate".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("atom weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("weights sum to {total}")));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    /// Equal masses `1/n` on the given points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = points.len() / dim.max(1);
        Self::new(dim, points, vec![1.0 / n.max(1) as f64; n])
    }

    /// Particles as atoms; zero-weight particles are dropped and the rest
    /// renormalized.
    pub fn from_ensemble(p: &ParticleEnsemble) -> Result<Self> {
        let (points, weights) = positive_atoms(
            p.dim(),
            (0..p.len()).map(|i| (p.point(i).to_vec(), p.weights()[i])),
        );
        Self::new(p.dim(), points, weights)
    }

    /// Grid cells as atoms at their centers with mass `value * cell_volume`;
    /// empty cells are dropped.
    pub fn from_grid(g: &GridDensity) -> Result<Self> {
        let vol = g.cell_volume();
        let (points, weights) = positive_atoms(
            g.dim(),
            g.values()
                .iter()
                .enumerate()
                .map(|(i, v)| (g.cell_center(i), v * vol)),
        );
        Self::new(g.dim(), points, weights)
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
}

fn positive_atoms(
    dim: usize,
    atoms: impl Iterator<Item = (Vec<f64>, f64)>,
) -> (Vec<f64>, Vec<f64>) {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (x, w) in atoms {
        if w > 0.0 {
            debug_assert_eq!(x.len(), dim);
            points.extend(x);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (points, weights)
}

/// Sparse optimal coupling: only cells with positive mass are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub n_source: usize,
    pub n_target: usize,
    /// `(source index, target index, mass)`.
    pub entries: Vec<(usize, usize, f64)>,
    /// `Σ mass · ‖x_i − y_j‖²`.
    pub cost: f64,
    /// Simplex pivots performed (zero for the brute-force oracle).
    pub pivots: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.n_source];
        for &(i, _, m) in &self.entries {
            r[i] += m;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_target];
        for &(_, j, m) in &self.entries {
            c[j] += m;
        }
        c
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_target]; self.n_source];
        for &(i, j, v) in &self.entries {
            m[i][j] += v;
        }
        m
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

enum CostMatrix<'a> {
    Dense { cols: usize, data: Vec<f64> },
    OnDemand { src: &'a DiscreteMeasure, tgt: &'a DiscreteMeasure },
}

impl<'a> CostMatrix<'a> {
    fn new(src: &'a DiscreteMeasure, tgt: &'a DiscreteMeasure) -> Self {
        let (ns, nt) = (src.len(), tgt.len());
        if ns.saturating_mul(nt) > DENSE_COST_LIMIT {
            return CostMatrix::OnDemand { src, tgt };
        }
        let mut data = vec![0.0; ns * nt];
        {
            use rayon::prelude::*;
            data.par_chunks_mut(nt).enumerate().for_each(|(i, row)| {
                let x = src.point(i);
                for (j, c) in row.iter_mut().enumerate() {
                    *c = squared_distance(x, tgt.point(j));
                }
            });
        }
        CostMatrix::Dense { cols: nt, data }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            CostMatrix::Dense { cols, data } => data[i * cols + j],
            CostMatrix::OnDemand { src, tgt } => squared_distance(src.point(i), tgt.point(j)),
        }
    }

    fn max(&self, ns: usize, nt: usize) -> f64 {
        match self {
            CostMatrix::Dense { data, .. } => data.iter().cloned().fold(0.0, f64::max),
            CostMatrix::OnDemand { .. } => {
                let mut m: f64 = 0.0;
                for i in 0..ns {
                    for j in 0..nt {
                        m = m.max(self.get(i, j));
                    }
                }
                m
            }
        }
    }
}

/// Flow value `real + eps·ε` for an infinitesimal ε > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex {
    real: f64,
    eps: i64,
}

/// Real parts closer than this are compared by their ε-coefficients.
const LEX_TIE: f64 = 1e-14;

impl Lex {
    fn cmp(&self, other: &Lex) -> Ordering {
        if (self.real - other.real).abs() <= LEX_TIE {
            self.eps.cmp(&other.eps)
        } else {
            self.real.total_cmp(&other.real)
        }
    }

    fn sub(self, o: Lex) -> Lex {
        Lex {
            real: self.real - o.real,
            eps: self.eps - o.eps,
        }
    }

    fn add(self, o: Lex) -> Lex {
        Lex {
            real: self.real + o.real,
            eps: self.eps + o.eps,
        }
    }
}

struct BasicCell {
    row: usize,
    col: usize,
    flow: Lex,
}

/// Spanning tree of basic cells over `ns` row nodes followed by `nt` column
/// nodes.
struct Basis {
    ns: usize,
    cells: Vec<BasicCell>,
    adjacency: Vec<Vec<usize>>,
}

impl Basis {
    fn other_end(&self, cell: usize, node: usize) -> usize {
        let c = &self.cells[cell];
        if node < self.ns {
            self.ns + c.col
        } else {
            c.row
        }
    }

    fn push(&mut self, row: usize, col: usize, flow: Lex) -> usize {
        let id = self.cells.len();
        self.cells.push(BasicCell { row, col, flow });
        self.adjacency[row].push(id);
        self.adjacency[self.ns + col].push(id);
        id
    }

    /// Reuses slot `id` for a new cell.
    fn replace(&mut self, id: usize, row: usize, col: usize, flow: Lex) {
        let (old_r, old_c) = (self.cells[id].row, self.ns + self.cells[id].col);
        for node in [old_r, old_c] {
            let adj = &mut self.adjacency[node];
            let pos = adj.iter().position(|&x| x == id).expect("cell in adjacency");
            adj.swap_remove(pos);
        }
        self.cells[id] = BasicCell { row, col, flow };
        self.adjacency[row].push(id);
        self.adjacency[self.ns + col].push(id);
    }

    fn potentials(&self, cost: &CostMatrix, u: &mut [f64], v: &mut [f64], queue: &mut VecDeque<usize>, seen: &mut [bool]) {
        seen.iter_mut().for_each(|s| *s = false);
        u[0] = 0.0;
        seen[0] = true;
        queue.clear();
        queue.push_back(0);
        while let Some(node) = queue.pop_front() {
            for &cid in &self.adjacency[node] {
                let next = self.other_end(cid, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let c = &self.cells[cid];
                let cij = cost.get(c.row, c.col);
                if next < self.ns {
                    u[next] = cij - v[c.col];
                } else {
                    v[next - self.ns] = cij - u[c.row];
                }
                queue.push_back(next);
            }
        }
    }

    /// Cells on the tree path from row node `row` to column `col`, starting
    /// at the row end.
    fn path(&self, row: usize, col: usize, parent: &mut [usize], queue: &mut VecDeque<usize>) -> Vec<usize> {
        const NONE: usize = usize::MAX;
        parent.iter_mut().for_each(|p| *p = NONE);
        let target = self.ns + col;
        queue.clear();
        queue.push_back(row);
        parent[row] = NONE - 1;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &cid in &self.adjacency[node] {
                let next = self.other_end(cid, node);
                if parent[next] == NONE {
                    parent[next] = cid;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != row {
            let cid = parent[node];
            cells.push(cid);
            node = self.other_end(cid, node);
        }
        cells.reverse();
        cells
    }
}

fn check_same_dim(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<()> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "measures of dimension {} and {}",
            src.dim(),
            tgt.dim()
        )));
    }
    Ok(())
}

/// Optimal coupling between `src` and `tgt` for the squared Euclidean cost.
pub fn solve_plan(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<TransportPlan> {
    check_same_dim(src, tgt)?;
    let (ns, nt) = (src.len(), tgt.len());
    let (sa, sb): (f64, f64) = (src.weights().iter().sum(), tgt.weights().iter().sum());
    if (sa - sb).abs() > MARGINAL_TOLERANCE {
        return Err(Error::InfeasibleMarginals {
            source_mass: sa,
            target_mass: sb,
        });
    }
    let cost = CostMatrix::new(src, tgt);
    let max_cost = cost.max(ns, nt);

    // Perturbed marginals; the last demand absorbs both the ε terms and the
    // (sub-tolerance) rounding mismatch of the real parts.
    let mut supply: Vec<Lex> = src.weights().iter().map(|&a| Lex { real: a, eps: 1 }).collect();
    let mut demand: Vec<Lex> = tgt.weights().iter().map(|&b| Lex { real: b, eps: 0 }).collect();
    demand[nt - 1].real += sa - sb;
    demand[nt - 1].eps += ns as i64;

    let mut basis = Basis {
        ns,
        cells: Vec::with_capacity(ns + nt - 1),
        adjacency: vec![Vec::new(); ns + nt],
    };
    let (mut i, mut j) = (0, 0);
    loop {
        let take = if supply[i].cmp(&demand[j]) == Ordering::Greater {
            demand[j]
        } else {
            supply[i]
        };
        basis.push(i, j, take);
        supply[i] = supply[i].sub(take);
        demand[j] = demand[j].sub(take);
        if i == ns - 1 && j == nt - 1 {
            break;
        }
        if i == ns - 1 {
            j += 1;
        } else if j == nt - 1 {
            i += 1;
        } else if supply[i].cmp(&demand[j]) == Ordering::Greater {
            j += 1;
        } else {
            i += 1;
        }
    }
    debug_assert_eq!(basis.cells.len(), ns + nt - 1);

    let entering_tol = 1e-12 * max_cost;
    let cap = PIVOTS_PER_CELL.saturating_mul(ns).saturating_mul(nt);
    let mut u = vec![0.0; ns];
    let mut v = vec![0.0; nt];
    let mut queue = VecDeque::with_capacity(ns + nt);
    let mut seen = vec![false; ns + nt];
    let mut parent = vec![0usize; ns + nt];
    let mut pivots = 0usize;
    let total_cells = ns * nt;
    let block = ((total_cells as f64).sqrt().ceil() as usize).max(10).min(total_cells);
    let mut cursor = 0usize;
    loop {
        basis.potentials(&cost, &mut u, &mut v, &mut queue, &mut seen);
        // Block search: most negative reduced cost within the first block
        // that has one, resuming where the previous scan stopped.
        let mut entering = None;
        let mut best = -entering_tol;
        let mut scanned_in_block = 0;
        for _ in 0..total_cells {
            let (r, c) = (cursor / nt, cursor % nt);
            let rc = cost.get(r, c) - u[r] - v[c];
            if rc < best {
                best = rc;
                entering = Some((r, c));
            }
            cursor += 1;
            if cursor == total_cells {
                cursor = 0;
            }
            scanned_in_block += 1;
            if scanned_in_block == block {
                if entering.is_some() {
                    break;
                }
                scanned_in_block = 0;
            }
        }
        let Some((er, ec)) = entering else { break };
        if pivots >= cap {
            return Err(Error::SolverStall { pivots });
        }
        pivots += 1;

        let path = basis.path(er, ec, &mut parent, &mut queue);
        // Path cells alternate −, +, −, … starting at the row end; the path
        // has odd length so it also ends on a − cell.
        let mut leave = path[0];
        for &cid in path.iter().step_by(2) {
            let ord = basis.cells[cid].flow.cmp(&basis.cells[leave].flow);
            if ord == Ordering::Less || (ord == Ordering::Equal && cid < leave) {
                leave = cid;
            }
        }
        let theta = basis.cells[leave].flow;
        for (k, &cid) in path.iter().enumerate() {
            let f = basis.cells[cid].flow;
            basis.cells[cid].flow = if k % 2 == 0 { f.sub(theta) } else { f.add(theta) };
        }
        basis.replace(leave, er, ec, theta);
    }

    // Certification against the published tolerance.
    let cert_tol = OPTIMALITY_TOLERANCE * max_cost;
    for (r, ur) in u.iter().enumerate() {
        for (c, vc) in v.iter().enumerate() {
            debug_assert!(cost.get(r, c) - ur - vc >= -cert_tol);
        }
    }

    let mut entries = Vec::with_capacity(ns + nt - 1);
    let mut total = 0.0;
    for c in &basis.cells {
        let m = c.flow.real.max(0.0);
        if m > 0.0 {
            total += m * cost.get(c.row, c.col);
            entries.push((c.row, c.col, m));
        }
    }
    entries.sort_by_key(|e| (e.0, e.1));
    Ok(TransportPlan {
        n_source: ns,
        n_target: nt,
        entries,
        cost: total,
        pivots,
    })
}

/// 2-Wasserstein distance between two discrete measures.
pub fn wasserstein(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<f64> {
    Ok(solve_plan(src, tgt)?.cost.max(0.0).sqrt())
}

/// Reference optimum by enumerating all matchings of two equal-weight
/// measures with at most 8 atoms each.
pub fn brute_force_plan(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<TransportPlan> {
    check_same_dim(src, tgt)?;
    let n = src.len();
    if n > 8 || tgt.len() > 8 {
        return Err(Error::TooLarge { n: n.max(tgt.len()) });
    }
    let w = 1.0 / n as f64;
    let uniform = |m: &DiscreteMeasure| m.weights().iter().all(|x| (x - w).abs() <= 1e-12);
    if tgt.len() != n || !uniform(src) || !uniform(tgt) {
        return Err(Error::UnequalWeights);
    }
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| squared_distance(src.point(i), tgt.point(j)))
            .sum::<f64>()
            * w
    };
    // Heap's algorithm.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = cost(&perm);
    let mut counters = vec![0usize; n];
    let mut k = 1;
    while k < n {
        if counters[k] < k {
            if k % 2 == 0 {
                perm.swap(0, k);
            } else {
                perm.swap(counters[k], k);
            }
            let c = cost(&perm);
            if c < best_cost {
                best_cost = c;
                best.clone_from(&perm);
            }
            counters[k] += 1;
            k = 1;
        } else {
            counters[k] = 0;
            k += 1;
        }
    }
    Ok(TransportPlan {
        n_source: n,
        n_target: n,
        entries: best.iter().enumerate().map(|(i, &j)| (i, j, w)).collect(),
        cost: best_cost,
        pivots: 0,
    })
}
