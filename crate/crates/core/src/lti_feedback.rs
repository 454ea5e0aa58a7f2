//! Affine state feedback that steers the Gaussian state density of a
//! discrete-time LTI system `x⁺ = A x + B u` along the optimal transport
//! map between consecutive prescribed densities.
//!
//! Over one horizon the Brenier map `x ↦ Γx + γ` is fixed by the two
//! densities, so the feedback `u = Kx + κ` must solve `A + BK = Γ`,
//! `Bκ = γ`. Solutions exist iff `(I − BB†)(Γ − A) = 0` and
//! `(I − BB†)γ = 0`; all of them are
//!
//! ```text
//! K = B†(Γ − A) − (I − B†B) R,    κ = B†γ − (I − B†B) r
//! ```
//!
//! for an arbitrary free pair `(R, r)`, which only moves `(K, κ)` inside the
//! null space of `B` and leaves the closed loop unchanged.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::gaussian_ot::gaussian_brenier_map;
use crate::measures::GaussianDensity;
use crate::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Relative residual below which the kernel conditions count as satisfied.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-8;

/// Moore-Penrose pseudo-inverse via the SVD.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let smax = svd.singular_values.max();
    let cutoff = PINV_CUTOFF * smax;
    let inv = svd
        .singular_values
        .map(|s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 });
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let cutoff = PINV_CUTOFF * sv.max();
    sv.iter().filter(|&&s| s > cutoff && s > 0.0).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a_mat: DMatrix<f64>,
    b_mat: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a_mat: DMatrix<f64>, b_mat: DMatrix<f64>) -> Result<Self> {
        if !a_mat.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}",
                a_mat.nrows(),
                a_mat.ncols()
            )));
        }
        if b_mat.nrows() != a_mat.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, A has {}",
                b_mat.nrows(),
                a_mat.nrows()
            )));
        }
        if a_mat.iter().chain(b_mat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite system matrix".into()));
        }
        Ok(Self { a_mat, b_mat })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a_mat
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b_mat
    }

    pub fn state_dim(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_mat.ncols()
    }
}

/// Free pair `(R, r)` selecting one member of the feedback family.
#[derive(Debug, Clone, PartialEq)]
pub struct FreePair {
    pub r_mat: DMatrix<f64>,
    pub r_vec: DVector<f64>,
}

/// `u = K x + κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub k_mat: DMatrix<f64>,
    pub kappa: DVector<f64>,
    pub free_pair_used: Option<FreePair>,
}

impl FeedbackLaw {
    /// The closed-loop affine state map `(A + BK, Bκ)`.
    pub fn closed_loop(&self, sys: &LtiSystem) -> (DMatrix<f64>, DVector<f64>) {
        (
            sys.a() + sys.b() * &self.k_mat,
            sys.b() * &self.kappa,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `‖(I − BB†)(Γ − A)‖_F`
    pub residual_mat: f64,
    /// `‖(I − BB†)γ‖₂`
    pub residual_vec: f64,
    /// `rank(B) = d`, i.e. every horizon is feasible.
    pub b_full_rank: bool,
}

fn check_dims(sys: &LtiSystem, g: &GaussianDensity) -> Result<()> {
    if g.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "Gaussian of dimension {} for a system with {} states",
            g.dim(),
            sys.state_dim()
        )));
    }
    Ok(())
}

struct Steering {
    report: FeasibilityReport,
    b_pinv: DMatrix<f64>,
    gamma_minus_a: DMatrix<f64>,
    gamma_vec: DVector<f64>,
}

fn analyse(sys: &LtiSystem, src: &GaussianDensity, tgt: &GaussianDensity) -> Result<Steering> {
    check_dims(sys, src)?;
    check_dims(sys, tgt)?;
    let map = gaussian_brenier_map(src, tgt)?;
    let d = sys.state_dim();
    let b_pinv = pinv(sys.b());
    let proj = DMatrix::<f64>::identity(d, d) - sys.b() * &b_pinv;
    let gamma_minus_a = &map.gamma_mat - sys.a();
    let residual_mat = (&proj * &gamma_minus_a).norm();
    let residual_vec = (&proj * &map.gamma_vec).norm();
    let scale = 1.0 + gamma_minus_a.norm() + map.gamma_vec.norm();
    let feasible = residual_mat <= FEASIBILITY_TOLERANCE * scale
        && residual_vec <= FEASIBILITY_TOLERANCE * scale;
    Ok(Steering {
        report: FeasibilityReport {
            feasible,
            residual_mat,
            residual_vec,
            b_full_rank: rank(sys.b()) == d,
        },
        b_pinv,
        gamma_minus_a,
        gamma_vec: map.gamma_vec,
    })
}

/// Whether some affine feedback realizes the optimal transport from `src`
/// to `tgt` in one step of `sys`.
pub fn check_feasibility(
    sys: &LtiSystem,
    src: &GaussianDensity,
    tgt: &GaussianDensity,
) -> Result<FeasibilityReport> {
    Ok(analyse(sys, src, tgt)?.report)
}

/// Feedback law for one horizon. `free_pair = None` selects `(R, r) = (0, 0)`,
/// the minimum-norm gain and offset.
pub fn synthesize(
    sys: &LtiSystem,
    src: &GaussianDensity,
    tgt: &GaussianDensity,
    free_pair: Option<&FreePair>,
) -> Result<FeedbackLaw> {
    let st = analyse(sys, src, tgt)?;
    if !st.report.feasible {
        return Err(Error::InfeasibleSteering {
            horizon: None,
            report: st.report,
        });
    }
    let mut k_mat = &st.b_pinv * &st.gamma_minus_a;
    let mut kappa = &st.b_pinv * &st.gamma_vec;
    if let Some(fp) = free_pair {
        let (m, d) = (sys.input_dim(), sys.state_dim());
        if fp.r_mat.shape() != (m, d) || fp.r_vec.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "free pair must be {m}x{d} and length {m}"
            )));
        }
        let null_proj = DMatrix::<f64>::identity(m, m) - &st.b_pinv * sys.b();
        k_mat -= &null_proj * &fp.r_mat;
        kappa -= &null_proj * &fp.r_vec;
    }
    Ok(FeedbackLaw {
        k_mat,
        kappa,
        free_pair_used: free_pair.cloned(),
    })
}

/// Density after one closed-loop step: `N((A+BK)μ + Bκ, (A+BK)Σ(A+BK)ᵀ)`.
pub fn closed_loop_push(
    sys: &LtiSystem,
    law: &FeedbackLaw,
    src: &GaussianDensity,
) -> Result<GaussianDensity> {
    check_dims(sys, src)?;
    if law.k_mat.shape() != (sys.input_dim(), sys.state_dim()) || law.kappa.len() != sys.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "law is {}x{} with offset of length {}, system has {} inputs and {} states",
            law.k_mat.nrows(),
            law.k_mat.ncols(),
            law.kappa.len(),
            sys.input_dim(),
            sys.state_dim()
        )));
    }
    let (closed, offset) = law.closed_loop(sys);
    let cov = &closed * src.cov() * closed.transpose();
    GaussianDensity::new(&closed * src.mean() + offset, (&cov + cov.transpose()) * 0.5)
}

/// One law per horizon, `systems[j]` steering `pdfs[j]` to `pdfs[j + 1]`.
pub fn plan_sequence(systems: &[LtiSystem], pdfs: &[GaussianDensity]) -> Result<Vec<FeedbackLaw>> {
    if pdfs.len() < 2 || systems.len() != pdfs.len() - 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} systems for {} densities",
            systems.len(),
            pdfs.len()
        )));
    }
    systems
        .par_iter()
        .enumerate()
        .map(|(j, sys)| {
            synthesize(sys, &pdfs[j], &pdfs[j + 1], None).map_err(|e| match e {
                Error::InfeasibleSteering { report, .. } => Error::InfeasibleSteering {
                    horizon: Some(j),
                    report,
                },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_ot::{gaussian_wasserstein_sq, map_transport_cost, AffineMap};
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.concat())
    }

    fn gauss(mean: &[f64], cov: &[&[f64]]) -> GaussianDensity {
        GaussianDensity::from_slices(mean, cov).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / (1.0 + b.norm())
    }

    fn penrose_ok(m: &DMatrix<f64>) {
        let p = pinv(m);
        let tol = 1e-9 * (1.0 + m.norm() * p.norm());
        assert!((m * &p * m - m).norm() <= tol);
        assert!((&p * m * &p - &p).norm() <= tol);
        let mp = m * &p;
        assert!((&mp - mp.transpose()).norm() <= tol);
        let pm = &p * m;
        assert!((&pm - pm.transpose()).norm() <= tol);
    }

    #[test]
    fn pinv_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!(rel(&pinv(&i), &i) < 1e-15);
        let d = mat(&[&[2.0, 0.0], &[0.0, 0.0]]);
        assert!(rel(&pinv(&d), &mat(&[&[0.5, 0.0], &[0.0, 0.0]])) < 1e-15);
        let m = mat(&[&[1.0, 2.0, 0.0], &[0.5, -1.0, 3.0], &[2.0, 0.0, 1.0]]);
        assert!((&m * pinv(&m) - DMatrix::<f64>::identity(3, 3)).amax() < 1e-9);
        for m in [
            m.clone(),
            mat(&[&[1.0], &[2.0]]),
            mat(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]),
            DMatrix::zeros(2, 3),
        ] {
            penrose_ok(&m);
        }
    }

    #[test]
    fn full_actuation_is_always_feasible() {
        let sys = LtiSystem::new(mat(&[&[0.9, 0.2], &[-0.1, 1.1]]), DMatrix::identity(2, 2)).unwrap();
        let src = gauss(&[1.0, 0.0], &[&[2.0, 0.3], &[0.3, 1.0]]);
        let tgt = gauss(&[-1.0, 2.0], &[&[0.5, -0.1], &[-0.1, 0.8]]);
        let r = check_feasibility(&sys, &src, &tgt).unwrap();
        assert!(r.feasible && r.b_full_rank);
        assert!(r.residual_mat <= 1e-12 && r.residual_vec <= 1e-12);

        let law = synthesize(&sys, &src, &tgt, None).unwrap();
        let map = gaussian_brenier_map(&src, &tgt).unwrap();
        assert!(rel(&law.k_mat, &(&map.gamma_mat - sys.a())) < 1e-12);
        assert!((&law.kappa - &map.gamma_vec).amax() < 1e-12);
    }

    #[test]
    fn single_input_cannot_move_second_coordinate() {
        let sys = LtiSystem::new(DMatrix::identity(2, 2), mat(&[&[1.0], &[0.0]])).unwrap();
        let src = gauss(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let tgt = gauss(&[0.0, 1.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = check_feasibility(&sys, &src, &tgt).unwrap();
        assert!(!r.feasible && !r.b_full_rank);
        assert!((r.residual_vec - 1.0).abs() <= 1e-12);
        assert!(r.residual_mat <= 1e-12);
        assert!(matches!(
            synthesize(&sys, &src, &tgt, None),
            Err(Error::InfeasibleSteering { horizon: None, .. })
        ));
    }

    #[test]
    fn no_actuation_is_infeasible() {
        let sys = LtiSystem::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let src = gauss(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let tgt = gauss(&[0.0, 0.0], &[&[4.0, 0.0], &[0.0, 1.0]]);
        assert!(!check_feasibility(&sys, &src, &tgt).unwrap().feasible);
    }

    #[test]
    fn identity_transport_holds_density() {
        let sys = LtiSystem::new(mat(&[&[0.3, 1.0], &[-2.0, 0.5]]), DMatrix::identity(2, 2)).unwrap();
        let g = gauss(&[1.0, -1.0], &[&[1.5, 0.4], &[0.4, 0.9]]);
        let law = synthesize(&sys, &g, &g, None).unwrap();
        let (closed, offset) = law.closed_loop(&sys);
        assert!((closed - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert!(offset.amax() < 1e-12);
        let out = closed_loop_push(&sys, &law, &g).unwrap();
        assert!(rel(out.cov(), g.cov()) < 1e-12);
    }

    #[test]
    fn open_loop_push() {
        let a = mat(&[&[0.5, 1.0], &[0.0, 2.0]]);
        let sys = LtiSystem::new(a.clone(), DMatrix::identity(2, 2)).unwrap();
        let g = gauss(&[1.0, 1.0], &[&[1.0, 0.0], &[0.0, 2.0]]);
        let law = FeedbackLaw {
            k_mat: DMatrix::zeros(2, 2),
            kappa: DVector::zeros(2),
            free_pair_used: None,
        };
        let out = closed_loop_push(&sys, &law, &g).unwrap();
        assert!((out.mean() - &a * g.mean()).amax() < 1e-15);
        assert!(rel(out.cov(), &(&a * g.cov() * a.transpose())) < 1e-15);
        let bad = FeedbackLaw {
            k_mat: DMatrix::zeros(1, 2),
            ..law
        };
        assert!(matches!(
            closed_loop_push(&sys, &bad, &g),
            Err(Error::DimensionMismatch(_))
        ));
    }

    /// Rank-deficient but feasible: `B = [[1, 1], [0, 0]]` has a nontrivial
    /// null space, `A` shares the Brenier matrix's second row and the target
    /// mean is placed so the offset has no second component.
    fn rank_deficient_instance() -> (LtiSystem, GaussianDensity, GaussianDensity) {
        let src = gauss(&[1.0, -0.5], &[&[2.0, 0.5], &[0.5, 1.0]]);
        let tgt_cov = mat(&[&[1.0, -0.2], &[-0.2, 0.7]]);
        let centered = GaussianDensity::new(DVector::zeros(2), tgt_cov.clone()).unwrap();
        let gamma = gaussian_brenier_map(&src, &centered).unwrap().gamma_mat;
        let tgt_mean = &gamma * src.mean() + DVector::from_vec(vec![1.5, 0.0]);
        let tgt = GaussianDensity::new(tgt_mean, tgt_cov).unwrap();
        let a = mat(&[&[0.4, -1.0], &[gamma[(1, 0)], gamma[(1, 1)]]]);
        let b = mat(&[&[1.0, 1.0], &[0.0, 0.0]]);
        (LtiSystem::new(a, b).unwrap(), src, tgt)
    }

    #[test]
    fn free_pair_changes_gain_not_closed_loop() {
        let (sys, src, tgt) = rank_deficient_instance();
        let report = check_feasibility(&sys, &src, &tgt).unwrap();
        assert!(report.feasible && !report.b_full_rank);

        let fp1 = FreePair {
            r_mat: mat(&[&[1.0, 2.0], &[-3.0, 0.5]]),
            r_vec: DVector::from_vec(vec![0.7, -0.2]),
        };
        let fp2 = FreePair {
            r_mat: mat(&[&[-4.0, 0.0], &[1.0, 1.0]]),
            r_vec: DVector::from_vec(vec![-1.0, 3.0]),
        };
        let l0 = synthesize(&sys, &src, &tgt, None).unwrap();
        let l1 = synthesize(&sys, &src, &tgt, Some(&fp1)).unwrap();
        let l2 = synthesize(&sys, &src, &tgt, Some(&fp2)).unwrap();
        assert!((&l1.k_mat - &l2.k_mat).amax() > 0.1);
        assert!((&l1.kappa - &l2.kappa).amax() > 0.1);
        assert_eq!(l1.free_pair_used, Some(fp1));

        let map = gaussian_brenier_map(&src, &tgt).unwrap();
        for law in [&l0, &l1, &l2] {
            let (closed, offset) = law.closed_loop(&sys);
            assert!(rel(&closed, &map.gamma_mat) <= 1e-8);
            assert!((offset - &map.gamma_vec).norm() <= 1e-8 * (1.0 + map.gamma_vec.norm()));
        }
        // Default pair gives the minimum-norm gain.
        assert!(l0.k_mat.norm() <= l1.k_mat.norm() && l0.k_mat.norm() <= l2.k_mat.norm());

        let bad = FreePair {
            r_mat: DMatrix::zeros(1, 2),
            r_vec: DVector::zeros(1),
        };
        assert!(matches!(
            synthesize(&sys, &src, &tgt, Some(&bad)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn wide_input_matrix() {
        let sys = LtiSystem::new(
            mat(&[&[1.0, 0.1], &[0.0, 0.9]]),
            mat(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]),
        )
        .unwrap();
        let src = gauss(&[0.0, 1.0], &[&[1.0, 0.1], &[0.1, 0.5]]);
        let tgt = gauss(&[2.0, 0.0], &[&[0.6, 0.0], &[0.0, 0.6]]);
        let law = synthesize(&sys, &src, &tgt, None).unwrap();
        let out = closed_loop_push(&sys, &law, &src).unwrap();
        assert!(rel(out.cov(), tgt.cov()) < 1e-9);
        assert!((out.mean() - tgt.mean()).amax() < 1e-9);
    }

    #[test]
    fn sequence_reports_failing_horizon() {
        let sys = LtiSystem::new(DMatrix::identity(2, 2), mat(&[&[1.0], &[0.0]])).unwrap();
        let g0 = gauss(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let g1 = gauss(&[3.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let g2 = gauss(&[3.0, 1.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = plan_sequence(&[sys.clone(), sys.clone()], &[g0.clone(), g1.clone(), g2]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSteering { horizon: Some(1), .. }));
        assert!(plan_sequence(&[sys.clone()], &[g0.clone(), g1.clone(), g0.clone()]).is_err());

        let laws = plan_sequence(&[sys.clone()], &[g0.clone(), g1]).unwrap();
        assert_eq!(laws.len(), 1);
        assert_eq!(laws[0], synthesize(&sys, &g0, &gauss(&[3.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]), None).unwrap());
    }

    proptest! {
        #[test]
        fn full_rank_b_matches_direct_solve(
            a in prop::collection::vec(-2.0..2.0f64, 4),
            b in prop::collection::vec(-2.0..2.0f64, 4),
            m1 in prop::collection::vec(-2.0..2.0f64, 2),
            m2 in prop::collection::vec(-2.0..2.0f64, 2),
            l1 in prop::collection::vec(-1.0..1.0f64, 4),
            l2 in prop::collection::vec(-1.0..1.0f64, 4),
        ) {
            let bm = DMatrix::from_row_slice(2, 2, &b);
            prop_assume!(bm.determinant().abs() > 0.1);
            let sys = LtiSystem::new(DMatrix::from_row_slice(2, 2, &a), bm.clone()).unwrap();
            let spd = |l: &[f64]| {
                let m = DMatrix::from_row_slice(2, 2, l);
                m.transpose() * &m + DMatrix::<f64>::identity(2, 2) * 0.2
            };
            let src = GaussianDensity::new(DVector::from_vec(m1), spd(&l1)).unwrap();
            let tgt = GaussianDensity::new(DVector::from_vec(m2), spd(&l2)).unwrap();
            let law = synthesize(&sys, &src, &tgt, None).unwrap();
            let map = gaussian_brenier_map(&src, &tgt).unwrap();
            let inv = bm.clone().try_inverse().unwrap();
            let k = &inv * (&map.gamma_mat - sys.a());
            let kappa = &inv * &map.gamma_vec;
            prop_assert!((&law.k_mat - &k).amax() <= 1e-9 * (1.0 + k.amax()));
            prop_assert!((&law.kappa - &kappa).amax() <= 1e-9 * (1.0 + kappa.amax()));

            // Closed loop realizes the map and its cost is the squared distance.
            let (closed, offset) = law.closed_loop(&sys);
            let realized = AffineMap { gamma_mat: closed, gamma_vec: offset };
            let w2 = gaussian_wasserstein_sq(&src, &tgt).unwrap();
            prop_assert!((map_transport_cost(&realized, &src) - w2).abs() <= 1e-6 * w2.max(1e-9));
            let out = closed_loop_push(&sys, &law, &src).unwrap();
            prop_assert!(rel(out.cov(), tgt.cov()) <= 1e-7);
            prop_assert!((out.mean() - tgt.mean()).amax() <= 1e-7 * (1.0 + tgt.mean().amax()));
        }
    }
}
