//! Output-map refinement: a baseline model's predicted output density is
//! corrected by composing the model's output map with the optimal transport
//! map onto the measured output density. The model's state equation is
//! never touched, and refinement at instant `j` does not advance `j`.

use nalgebra::{DMatrix, DVector};

use crate::discrete_ot::{solve_plan, squared_distance, wasserstein, DiscreteMeasure};
use crate::gaussian_ot::{gaussian_brenier_map, sqrtm_psd, AffineMap};
use crate::measures::{GaussianDensity, ParticleEnsemble};
use crate::{Error, Result};

/// Largest ensembles accepted by [`refine_empirical`].
pub const MAX_EMPIRICAL_SIZE: usize = 4096;

/// `x⁺ = A x`, `y = C x`, `x₀ ~ N(μ₀, P₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    a_mat: DMatrix<f64>,
    c_mat: DMatrix<f64>,
    initial: GaussianDensity,
}

impl LinearGaussianModel {
    pub fn new(a_mat: DMatrix<f64>, c_mat: DMatrix<f64>, initial: GaussianDensity) -> Result<Self> {
        let d = initial.dim();
        if a_mat.shape() != (d, d) || c_mat.ncols() != d || c_mat.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "A {}x{}, C {}x{}, state dimension {d}",
                a_mat.nrows(),
                a_mat.ncols(),
                c_mat.nrows(),
                c_mat.ncols()
            )));
        }
        Ok(Self { a_mat, c_mat, initial })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a_mat
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c_mat
    }

    pub fn initial(&self) -> &GaussianDensity {
        &self.initial
    }

    pub fn output_dim(&self) -> usize {
        self.c_mat.nrows()
    }

    /// `C A^j`.
    pub fn output_operator(&self, j: usize) -> DMatrix<f64> {
        let mut m = self.c_mat.clone();
        for _ in 0..j {
            m = &m * &self.a_mat;
        }
        m
    }
}

/// `N(C A^j μ₀, (C A^j) P₀ (C A^j)ᵀ)`; may be singular.
pub fn predict_output_gaussian(m: &LinearGaussianModel, j: usize) -> Result<GaussianDensity> {
    let op = m.output_operator(j);
    let cov = &op * m.initial.cov() * op.transpose();
    GaussianDensity::new(&op * m.initial.mean(), (&cov + cov.transpose()) * 0.5)
}

/// Transport-plan based point map on the predicted support points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMap {
    dim: usize,
    sources: Vec<f64>,
    images: Vec<f64>,
}

impl EmpiricalMap {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sources.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn source(&self, i: usize) -> &[f64] {
        &self.sources[i * self.dim..(i + 1) * self.dim]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// Out-of-sample extension: the displacement of the nearest predicted
    /// support point is applied to `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let nearest = (0..self.len())
            .min_by(|&a, &b| {
                squared_distance(self.source(a), x).total_cmp(&squared_distance(self.source(b), x))
            })
            .expect("non-empty map");
        x.iter()
            .zip(self.source(nearest).iter().zip(self.image(nearest)))
            .map(|(xi, (s, t))| xi + t - s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Correction {
    Affine(AffineMap),
    Empirical(EmpiricalMap),
}

/// `ŷ ↦ β(ĥ(x̂))` at measurement instant `instant`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedOutputMap {
    pub correction: Correction,
    pub instant: usize,
}

impl RefinedOutputMap {
    /// Refined output for a model output sample.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        match &self.correction {
            Correction::Affine(m) => m.apply(&DVector::from_column_slice(y)).iter().copied().collect(),
            Correction::Empirical(e) => e.apply(y),
        }
    }
}

/// Brenier correction sending the model's output density at instant `j` to
/// the true output density.
pub fn refine_gaussian(
    truth: &LinearGaussianModel,
    model: &LinearGaussianModel,
    j: usize,
) -> Result<RefinedOutputMap> {
    check_pair(truth, model)?;
    let predicted = predict_output_gaussian(model, j)?;
    let measured = predict_output_gaussian(truth, j)?;
    Ok(RefinedOutputMap {
        correction: Correction::Affine(gaussian_brenier_map(&predicted, &measured)?),
        instant: j,
    })
}

/// Corrections for several instants. With `chained`, each instant's
/// prediction is first pushed through the previous correction and the
/// stored correction is the composed map; by default every instant gets an
/// independent correction.
pub fn refine_sequence(
    truth: &LinearGaussianModel,
    model: &LinearGaussianModel,
    instants: &[usize],
    chained: bool,
) -> Result<Vec<RefinedOutputMap>> {
    if !chained {
        return instants.iter().map(|&j| refine_gaussian(truth, model, j)).collect();
    }
    check_pair(truth, model)?;
    let mut previous: Option<AffineMap> = None;
    let mut out = Vec::with_capacity(instants.len());
    for &j in instants {
        let raw = predict_output_gaussian(model, j)?;
        let predicted = match &previous {
            Some(p) => p.push(&raw)?,
            None => raw,
        };
        let measured = predict_output_gaussian(truth, j)?;
        let step = gaussian_brenier_map(&predicted, &measured)?;
        let total = match &previous {
            Some(p) => step.compose(p),
            None => step,
        };
        previous = Some(total.clone());
        out.push(RefinedOutputMap {
            correction: Correction::Affine(total),
            instant: j,
        });
    }
    Ok(out)
}

fn check_pair(truth: &LinearGaussianModel, model: &LinearGaussianModel) -> Result<()> {
    if truth.output_dim() != model.output_dim() || truth.initial != model.initial {
        return Err(Error::DimensionMismatch(
            "truth and model need the same output dimension and initial density".into(),
        ));
    }
    Ok(())
}

/// Intermediate output density at synthetic time `s` while refining the
/// model at instant `j`, written directly in terms of the system matrices:
///
/// ```text
/// μ(s) = [(1−s) Ĉ Â^j + s C A^j] μ₀
/// Σ(s) = [(1−s) I + s Γ(j)] Σ̂ [(1−s) I + s Γ(j)],   Σ̂ = (Ĉ Â^j) P₀ (Ĉ Â^j)ᵀ
/// Γ(j) = √Σ (√Σ Σ̂ √Σ)^{-1/2} √Σ,                       Σ = (C A^j) P₀ (C A^j)ᵀ
/// ```
pub fn refinement_path(
    truth: &LinearGaussianModel,
    model: &LinearGaussianModel,
    j: usize,
    s: f64,
) -> Result<GaussianDensity> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::SOutOfRange(s));
    }
    check_pair(truth, model)?;
    let p0 = truth.initial.cov();
    let mu0 = truth.initial.mean();
    let op_true = truth.output_operator(j);
    let op_model = model.output_operator(j);
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let cov_true = sym(&op_true * p0 * op_true.transpose());
    let cov_model = sym(&op_model * p0 * op_model.transpose());
    for c in [&cov_true, &cov_model] {
        let min = c.clone().symmetric_eigenvalues().min();
        if min <= crate::gaussian_ot::SINGULARITY_TOLERANCE * c.trace() {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min,
                trace: c.trace(),
            });
        }
    }
    let root = sqrtm_psd(&cov_true)?;
    let inner = sqrtm_psd(&sym(&root * &cov_model * &root))?;
    let inner_inv = inner
        .try_inverse()
        .ok_or(Error::SingularCovariance { min_eigenvalue: 0.0, trace: cov_model.trace() })?;
    let gamma = sym(&root * inner_inv * &root);
    let p = cov_true.nrows();
    let blend = DMatrix::<f64>::identity(p, p) * (1.0 - s) + gamma * s;
    let mean = (&op_model * (1.0 - s) + &op_true * s) * mu0;
    let cov = sym(&blend * cov_model * &blend);
    GaussianDensity::new(mean, cov)
}

/// Empirical correction: optimal plan between equally weighted predicted
/// and measured samples, barycentrically projected to a point map.
pub fn refine_empirical(predicted: &ParticleEnsemble, measured: &ParticleEnsemble) -> Result<RefinedOutputMap> {
    if predicted.dim() != measured.dim() {
        return Err(Error::DimensionMismatch("ensemble dimensions differ".into()));
    }
    for e in [predicted, measured] {
        if e.len() > MAX_EMPIRICAL_SIZE {
            return Err(Error::TooLarge { n: e.len() });
        }
        let w = 1.0 / e.len() as f64;
        if e.weights().iter().any(|x| (x - w).abs() > 1e-12) {
            return Err(Error::UnequalWeights);
        }
    }
    let src = DiscreteMeasure::from_ensemble(predicted)?;
    let tgt = DiscreteMeasure::from_ensemble(measured)?;
    let plan = solve_plan(&src, &tgt)?;
    let dim = predicted.dim();
    let mut images = vec![0.0; predicted.len() * dim];
    let mut mass = vec![0.0; predicted.len()];
    for &(i, j, m) in &plan.entries {
        mass[i] += m;
        for k in 0..dim {
            images[i * dim + k] += m * tgt.point(j)[k];
        }
    }
    for (i, m) in mass.iter().enumerate() {
        for k in 0..dim {
            images[i * dim + k] /= m;
        }
    }
    Ok(RefinedOutputMap {
        correction: Correction::Empirical(EmpiricalMap {
            dim,
            sources: predicted.points().to_vec(),
            images,
        }),
        instant: 0,
    })
}

/// Predicted samples pushed through an empirical correction.
pub fn push_ensemble(map: &RefinedOutputMap, ens: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    let points: Vec<f64> = (0..ens.len()).flat_map(|i| map.apply(ens.point(i))).collect();
    ParticleEnsemble::new(ens.dim(), points, ens.weights().to_vec(), None)
}

/// `W(pushed, measured) / W(predicted, measured)`.
pub fn residual_ratio(map: &RefinedOutputMap, predicted: &ParticleEnsemble, measured: &ParticleEnsemble) -> Result<f64> {
    let pushed = push_ensemble(map, predicted)?;
    let m = DiscreteMeasure::from_ensemble(measured)?;
    let before = wasserstein(&DiscreteMeasure::from_ensemble(predicted)?, &m)?;
    let after = wasserstein(&DiscreteMeasure::from_ensemble(&pushed)?, &m)?;
    Ok(if before == 0.0 { 0.0 } else { after / before })
}

/// The linear models of the worked refinement example: `(truth, model)`.
pub fn example_linear_models() -> (LinearGaussianModel, LinearGaussianModel) {
    let initial = GaussianDensity::from_slices(&[1.0, 3.0], &[&[10.0, 6.0], &[6.0, 7.0]])
        .expect("valid initial density");
    let m = |v: [f64; 4]| DMatrix::from_row_slice(2, 2, &v);
    let truth = LinearGaussianModel::new(m([0.4, -0.1, 2.0, 0.6]), m([-1.0, 0.03, -0.2, 0.8]), initial.clone())
        .expect("valid truth model");
    let model = LinearGaussianModel::new(m([0.2, -0.7, -0.7, 0.1]), m([1.0, 0.0, 0.0, 1.0]), initial)
        .expect("valid baseline model");
    (truth, model)
}
