//! Closed-form optimal transport between Gaussian densities.
//!
//! Between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)` with nonsingular covariances the
//! optimal map for the squared Euclidean cost is affine, `x ↦ Γx + γ`, with
//!
//! ```text
//! Γ = √Σ₂ (√Σ₂ Σ₁ √Σ₂)^{-1/2} √Σ₂,    γ = μ₂ − Γμ₁
//! ```
//!
//! The offset `γ` reduces to the mean shift `μ₂ − μ₁` whenever
//! `Γμ₁ = μ₁` (for instance a centered source). Geodesics between the two
//! densities are push-forwards under `(1−s) Id + s (Γ·+γ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::measures::{repair_psd, GaussianDensity};
use crate::{Error, Result};

/// Covariances whose smallest eigenvalue is at most this fraction of the
/// trace are treated as singular.
pub const SINGULARITY_TOLERANCE: f64 = 1e-12;

/// Symmetric PSD square root via the symmetric eigendecomposition.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "square root of a {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * s.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::NonPsdInput {
            min_eigenvalue: f64::NAN,
        });
    }
    let s = repair_psd(s)?;
    Ok(spectral_map(&s, |l| l.max(0.0).sqrt()))
}

/// `Q f(Λ) Qᵀ` for symmetric `s`, symmetrized.
fn spectral_map(s: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&eig.eigenvalues.map(f)) * q.transpose();
    (&r + r.transpose()) * 0.5
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// An affine map `x ↦ Γ x + γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub gamma_mat: DMatrix<f64>,
    pub gamma_vec: DVector<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma_mat: DMatrix::identity(d, d),
            gamma_vec: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma_vec.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gamma_mat * x + &self.gamma_vec
    }

    /// Push-forward of a Gaussian: `N(Γμ + γ, Γ Σ Γᵀ)`.
    pub fn push(&self, g: &GaussianDensity) -> Result<GaussianDensity> {
        if g.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "map of dimension {} applied to Gaussian of dimension {}",
                self.dim(),
                g.dim()
            )));
        }
        let cov = symmetrize(&(&self.gamma_mat * g.cov() * self.gamma_mat.transpose()));
        GaussianDensity::new(self.apply(g.mean()), cov)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        AffineMap {
            gamma_mat: &self.gamma_mat * &inner.gamma_mat,
            gamma_vec: &self.gamma_mat * &inner.gamma_vec + &self.gamma_vec,
        }
    }
}

fn require_nonsingular(g: &GaussianDensity) -> Result<()> {
    let eig = SymmetricEigen::new(g.cov().clone());
    let min = eig.eigenvalues.min();
    let trace = g.cov().trace();
    if min <= SINGULARITY_TOLERANCE * trace {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min,
            trace,
        });
    }
    Ok(())
}

fn require_same_dim(a: &GaussianDensity, b: &GaussianDensity) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Gaussians of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// The optimal (Brenier) map pushing `src` onto `tgt`. Both covariances must
/// be nonsingular.
pub fn gaussian_brenier_map(src: &GaussianDensity, tgt: &GaussianDensity) -> Result<AffineMap> {
    require_same_dim(src, tgt)?;
    require_nonsingular(src)?;
    require_nonsingular(tgt)?;
    let root_t = spectral_map(tgt.cov(), |l| l.max(0.0).sqrt());
    let inner = symmetrize(&(&root_t * src.cov() * &root_t));
    let inv_root_inner = spectral_map(&inner, |l| 1.0 / l.sqrt());
    let gamma_mat = symmetrize(&(&root_t * inv_root_inner * &root_t));
    let gamma_vec = tgt.mean() - &gamma_mat * src.mean();
    Ok(AffineMap {
        gamma_mat,
        gamma_vec,
    })
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn gaussian_wasserstein_sq(a: &GaussianDensity, b: &GaussianDensity) -> Result<f64> {
    require_same_dim(a, b)?;
    let root_b = sqrtm_psd(b.cov()).map_err(psd_to_cov)?;
    let cross = sqrtm_psd(&symmetrize(&(&root_b * a.cov() * &root_b))).map_err(psd_to_cov)?;
    let bures = a.cov().trace() + b.cov().trace() - 2.0 * cross.trace();
    let shift = (a.mean() - b.mean()).norm_squared();
    Ok((shift + bures).max(0.0))
}

/// 2-Wasserstein distance between two Gaussians.
pub fn gaussian_wasserstein(a: &GaussianDensity, b: &GaussianDensity) -> Result<f64> {
    Ok(gaussian_wasserstein_sq(a, b)?.sqrt())
}

fn psd_to_cov(e: Error) -> Error {
    match e {
        Error::NonPsdInput { min_eigenvalue } => Error::NonPsdCovariance { min_eigenvalue },
        other => other,
    }
}

/// Expected squared displacement `E‖Γx + γ − x‖²` for `x ~ src`, in closed
/// form: `‖(Γ − I)μ + γ‖² + tr((Γ − I) Σ (Γ − I)ᵀ)`.
pub fn map_transport_cost(m: &AffineMap, src: &GaussianDensity) -> f64 {
    let d = m.dim();
    let delta = &m.gamma_mat - DMatrix::<f64>::identity(d, d);
    (&delta * src.mean() + &m.gamma_vec).norm_squared()
        + (&delta * src.cov() * delta.transpose()).trace()
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::SOutOfRange(s));
    }
    Ok(())
}

/// `(1−s) Id + s·m`.
pub fn interpolate_map(m: &AffineMap, s: f64) -> Result<AffineMap> {
    check_s(s)?;
    let d = m.dim();
    Ok(AffineMap {
        gamma_mat: DMatrix::<f64>::identity(d, d) * (1.0 - s) + &m.gamma_mat * s,
        gamma_vec: &m.gamma_vec * s,
    })
}

/// Point `s` on the Wasserstein geodesic from `src` to `tgt`.
pub fn displacement_interpolate(
    src: &GaussianDensity,
    tgt: &GaussianDensity,
    s: f64,
) -> Result<GaussianDensity> {
    check_s(s)?;
    let m = gaussian_brenier_map(src, tgt)?;
    interpolate_map(&m, s)?.push(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn random_spd(d: usize, entries: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_iterator(d, d, entries.iter().cloned());
        m.transpose() * &m + DMatrix::<f64>::identity(d, d) * 0.1
    }

    #[test]
    fn sqrtm_simple_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!(rel_err(&sqrtm_psd(&i).unwrap(), &i) < 1e-15);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&s).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!(rel_err(&r, &expected) < 1e-15);
    }

    #[test]
    fn sqrtm_reconstructs_gram_matrix() {
        let m = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let s = m.transpose() * &m;
        let r = sqrtm_psd(&s).unwrap();
        assert!((&r * &r - &s).norm() <= 1e-10 * (1.0 + s.norm()));
        assert!((&r - r.transpose()).amax() == 0.0);
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(sqrtm_psd(&s), Err(Error::NonPsdInput { .. })));
    }

    #[test]
    fn brenier_identity_and_scalar() {
        let g = GaussianDensity::from_slices(&[1.0, 2.0], &[&[2.0, 0.5], &[0.5, 1.0]]).unwrap();
        let m = gaussian_brenier_map(&g, &g).unwrap();
        assert!(rel_err(&m.gamma_mat, &DMatrix::identity(2, 2)) < 1e-12);
        assert!(m.gamma_vec.amax() < 1e-12);

        let a = GaussianDensity::from_slices(&[0.0], &[&[1.0]]).unwrap();
        let b = GaussianDensity::from_slices(&[0.0], &[&[4.0]]).unwrap();
        let m = gaussian_brenier_map(&a, &b).unwrap();
        assert!((m.gamma_mat[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(m.gamma_vec[0].abs() < 1e-15);
    }

    #[test]
    fn brenier_rejects_singular() {
        let a = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let b = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(
            gaussian_brenier_map(&a, &b),
            Err(Error::SingularCovariance { .. })
        ));
        assert!(matches!(
            gaussian_brenier_map(&b, &a),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn wasserstein_translation_and_scale() {
        let a = GaussianDensity::from_slices(&[0.0], &[&[1.0]]).unwrap();
        let b = GaussianDensity::from_slices(&[3.0], &[&[1.0]]).unwrap();
        assert!((gaussian_wasserstein(&a, &b).unwrap() - 3.0).abs() < 1e-14);
        let c = GaussianDensity::from_slices(&[3.0], &[&[4.0]]).unwrap();
        assert!((gaussian_wasserstein(&a, &c).unwrap() - 10f64.sqrt()).abs() < 1e-13);
    }

    /// 1-D oracle: W² = ∫₀¹ (F⁻¹_a(u) − F⁻¹_b(u))² du by midpoint quadrature
    /// of the quantile functions, with the normal quantile inverted by
    /// bisection on an erf series.
    #[test]
    fn wasserstein_matches_quantile_integral_in_1d() {
        fn erf(x: f64) -> f64 {
            // Power series below |x| = 3, continued fraction above.
            let t = x.abs();
            let v = if t < 3.0 {
                let mut sum: f64 = 0.0;
                let mut term = t;
                let mut n = 0.0;
                while term.abs() > 1e-17 * sum.abs().max(1e-300) || n < 2.0 {
                    sum += term / (2.0 * n + 1.0);
                    n += 1.0;
                    term *= -t * t / n;
                }
                2.0 / std::f64::consts::PI.sqrt() * sum
            } else {
                let mut cf = 0.0;
                for k in (1..60).rev() {
                    cf = k as f64 / 2.0 / (t + cf);
                }
                1.0 - (-t * t).exp() / std::f64::consts::PI.sqrt() / (t + cf)
            };
            v.copysign(x)
        }
        fn quantile(u: f64) -> f64 {
            let (mut lo, mut hi) = (-40.0, 40.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if 0.5 * (1.0 + erf(mid / 2f64.sqrt())) < u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
        let n = 100_000;
        let mut w2 = 0.0;
        for i in 0..n {
            let z = quantile((i as f64 + 0.5) / n as f64);
            // N(0,1) vs N(3,4): quantiles z and 3 + 2z.
            let d = 3.0 + 2.0 * z - z;
            w2 += d * d / n as f64;
        }
        let a = GaussianDensity::from_slices(&[0.0], &[&[1.0]]).unwrap();
        let b = GaussianDensity::from_slices(&[3.0], &[&[4.0]]).unwrap();
        let w = gaussian_wasserstein(&a, &b).unwrap();
        assert!((w - w2.sqrt()).abs() < 1e-4, "{w} vs {}", w2.sqrt());
        assert!((w - 3.16227766).abs() < 1e-8);
    }

    #[test]
    fn interpolate_map_arithmetic() {
        let m = AffineMap {
            gamma_mat: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0])),
            gamma_vec: DVector::from_vec(vec![1.0, 0.0]),
        };
        assert_eq!(interpolate_map(&m, 0.0).unwrap(), AffineMap::identity(2));
        assert_eq!(interpolate_map(&m, 1.0).unwrap(), m);
        let h = interpolate_map(&m, 0.5).unwrap();
        assert_eq!(h.gamma_mat, DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.5])));
        assert_eq!(h.gamma_vec, DVector::from_vec(vec![0.5, 0.0]));
        assert!(matches!(interpolate_map(&m, 1.5), Err(Error::SOutOfRange(_))));
        assert!(matches!(interpolate_map(&m, -0.1), Err(Error::SOutOfRange(_))));
    }

    #[test]
    fn displacement_endpoints_and_translation() {
        let a = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.2], &[0.2, 0.5]]).unwrap();
        let b = GaussianDensity::from_slices(&[2.0, 0.0], &[&[1.0, 0.2], &[0.2, 0.5]]).unwrap();
        let mid = displacement_interpolate(&a, &b, 0.5).unwrap();
        assert!((mid.mean() - DVector::from_vec(vec![1.0, 0.0])).amax() < 1e-14);
        assert!(rel_err(mid.cov(), a.cov()) < 1e-12);

        let c = GaussianDensity::from_slices(&[1.0, -1.0], &[&[3.0, -0.4], &[-0.4, 0.7]]).unwrap();
        let s0 = displacement_interpolate(&a, &c, 0.0).unwrap();
        let s1 = displacement_interpolate(&a, &c, 1.0).unwrap();
        assert!(rel_err(s0.cov(), a.cov()) < 1e-14);
        assert!(rel_err(s1.cov(), c.cov()) < 1e-12);
        assert!((s1.mean() - c.mean()).amax() < 1e-14);
    }

    #[test]
    fn geodesic_distances_are_linear() {
        let a = GaussianDensity::from_slices(&[0.0, 1.0], &[&[2.0, 0.3], &[0.3, 0.4]]).unwrap();
        let b = GaussianDensity::from_slices(&[1.0, -2.0], &[&[0.5, -0.2], &[-0.2, 1.5]]).unwrap();
        let w = gaussian_wasserstein(&a, &b).unwrap();
        for s in [0.25, 0.5, 0.75] {
            let p = displacement_interpolate(&a, &b, s).unwrap();
            let w_from = gaussian_wasserstein(&a, &p).unwrap();
            let w_to = gaussian_wasserstein(&p, &b).unwrap();
            assert!((w_from - s * w).abs() <= 1e-8 * w);
            assert!((w_to - (1.0 - s) * w).abs() <= 1e-8 * w);
        }
    }

    fn gaussian_strategy(d: usize) -> impl Strategy<Value = GaussianDensity> {
        (
            prop::collection::vec(-3.0..3.0f64, d),
            prop::collection::vec(-1.5..1.5f64, d * d),
        )
            .prop_map(move |(mu, e)| {
                GaussianDensity::new(DVector::from_vec(mu), random_spd(d, &e)).unwrap()
            })
    }

    fn pair_strategy() -> impl Strategy<Value = (GaussianDensity, GaussianDensity)> {
        (1usize..=4).prop_flat_map(|d| (gaussian_strategy(d), gaussian_strategy(d)))
    }

    proptest! {
        #[test]
        fn push_forward_is_exact((a, b) in pair_strategy()) {
            let m = gaussian_brenier_map(&a, &b).unwrap();
            let pushed = &m.gamma_mat * a.cov() * m.gamma_mat.transpose();
            prop_assert!(rel_err(&pushed, b.cov()) <= 1e-8);
            prop_assert!((&m.gamma_mat - m.gamma_mat.transpose()).amax() == 0.0);
            prop_assert!(SymmetricEigen::new(m.gamma_mat.clone()).eigenvalues.min() >= 0.0);
        }

        #[test]
        fn maps_invert_each_other((a, b) in pair_strategy()) {
            let ab = gaussian_brenier_map(&a, &b).unwrap();
            let ba = gaussian_brenier_map(&b, &a).unwrap();
            let d = a.dim();
            prop_assert!((&ba.gamma_mat * &ab.gamma_mat - DMatrix::<f64>::identity(d, d)).amax() <= 1e-7);
            prop_assert!(ba.compose(&ab).gamma_vec.amax() <= 1e-7);
        }

        #[test]
        fn distance_equals_map_cost((a, b) in pair_strategy()) {
            let w2 = gaussian_wasserstein_sq(&a, &b).unwrap();
            let cost = map_transport_cost(&gaussian_brenier_map(&a, &b).unwrap(), &a);
            prop_assert!((w2 - cost).abs() <= 1e-8 * w2.max(1e-12));
        }

        #[test]
        fn interpolants_stay_positive_definite((a, b) in pair_strategy(), s in 0.01..0.99f64) {
            let p = displacement_interpolate(&a, &b, s).unwrap();
            prop_assert!(SymmetricEigen::new(p.cov().clone()).eigenvalues.min() > 0.0);
        }
    }
}
