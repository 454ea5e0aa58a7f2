//! File formats. Grids, Gaussians, systems and models are JSON documents;
//! particle ensembles and tables are CSV. Reals are written in shortest
//! round-trip form, so reading a written file reproduces every bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gaussian_ot::AffineMap;
use crate::lti_feedback::{FeedbackLaw, FreePair, LtiSystem};
use crate::measures::{GaussianDensity, GridDensity, ParticleEnsemble};
use crate::refine::LinearGaussianModel;
use crate::{Error, Result};

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("matrix rows must be non-empty and of equal length".into()));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn grid_from_reader(r: impl Read) -> Result<GridDensity> {
    let f: GridFile = serde_json::from_reader(r)?;
    if f.dim != f.shape.len() {
        return Err(Error::Parse(format!("dim {} but shape has {} axes", f.dim, f.shape.len())));
    }
    GridDensity::new(f.lo, f.hi, f.shape, f.data)
}

pub fn read_grid(path: &Path) -> Result<GridDensity> {
    grid_from_reader(open(path)?)
}

pub fn write_grid(path: &Path, g: &GridDensity) -> Result<()> {
    write_json(
        path,
        &GridFile {
            dim: g.dim(),
            lo: g.lo().to_vec(),
            hi: g.hi().to_vec(),
            shape: g.shape().to_vec(),
            data: g.values().to_vec(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct GaussianFile {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

pub fn gaussian_json(g: &GaussianDensity) -> serde_json::Value {
    serde_json::json!({
        "mean": g.mean().iter().collect::<Vec<_>>(),
        "cov": matrix_rows(g.cov()),
    })
}

pub fn gaussian_from_reader(r: impl Read) -> Result<GaussianDensity> {
    let f: GaussianFile = serde_json::from_reader(r)?;
    GaussianDensity::new(DVector::from_vec(f.mean), matrix_from_rows(&f.cov)?)
}

pub fn read_gaussian(path: &Path) -> Result<GaussianDensity> {
    gaussian_from_reader(open(path)?)
}

pub fn write_gaussian(path: &Path, g: &GaussianDensity) -> Result<()> {
    write_json(path, &gaussian_json(g))
}

pub fn affine_map_json(m: &AffineMap) -> serde_json::Value {
    serde_json::json!({
        "Gamma": matrix_rows(&m.gamma_mat),
        "gamma": m.gamma_vec.iter().collect::<Vec<_>>(),
    })
}

pub fn feedback_law_json(law: &FeedbackLaw) -> serde_json::Value {
    serde_json::json!({
        "K": matrix_rows(&law.k_mat),
        "kappa": law.kappa.iter().collect::<Vec<_>>(),
    })
}

#[derive(Debug, Deserialize)]
struct SystemFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SystemsFile {
    One(SystemFile),
    Many(Vec<SystemFile>),
}

/// One system, or a list of them for time-varying pairs.
pub fn systems_from_reader(r: impl Read) -> Result<Vec<LtiSystem>> {
    let files = match serde_json::from_reader(r)? {
        SystemsFile::One(s) => vec![s],
        SystemsFile::Many(v) => v,
    };
    files
        .iter()
        .map(|s| LtiSystem::new(matrix_from_rows(&s.a)?, matrix_from_rows(&s.b)?))
        .collect()
}

pub fn read_systems(path: &Path) -> Result<Vec<LtiSystem>> {
    systems_from_reader(open(path)?)
}

#[derive(Debug, Deserialize)]
struct FreePairFile {
    #[serde(rename = "R")]
    r_mat: Vec<Vec<f64>>,
    r: Vec<f64>,
}

pub fn read_free_pair(path: &Path) -> Result<FreePair> {
    let f: FreePairFile = serde_json::from_reader(open(path)?)?;
    Ok(FreePair {
        r_mat: matrix_from_rows(&f.r_mat)?,
        r_vec: DVector::from_vec(f.r),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    mean0: Vec<f64>,
    #[serde(rename = "P0")]
    p0: Vec<Vec<f64>>,
}

pub fn model_from_reader(r: impl Read) -> Result<LinearGaussianModel> {
    let f: ModelFile = serde_json::from_reader(r)?;
    let initial = GaussianDensity::new(DVector::from_vec(f.mean0), matrix_from_rows(&f.p0)?)?;
    LinearGaussianModel::new(matrix_from_rows(&f.a)?, matrix_from_rows(&f.c)?, initial)
}

pub fn read_model(path: &Path) -> Result<LinearGaussianModel> {
    model_from_reader(open(path)?)
}

pub fn write_model(path: &Path, m: &LinearGaussianModel) -> Result<()> {
    write_json(
        path,
        &ModelFile {
            a: matrix_rows(m.a()),
            c: matrix_rows(m.c()),
            mean0: m.initial().mean().iter().copied().collect(),
            p0: matrix_rows(m.initial().cov()),
        },
    )
}

/// Header `x1,…,xd,weight[,density]`.
pub fn ensemble_from_reader(r: impl Read) -> Result<ParticleEnsemble> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let dim = names.iter().take_while(|h| h.starts_with('x')).count();
    let weight_col = names.iter().position(|h| *h == "weight");
    let density_col = names.iter().position(|h| *h == "density");
    if dim == 0 || weight_col != Some(dim) {
        return Err(Error::Parse(format!("expected header x1..xd,weight[,density], got {names:?}")));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut densities = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("row {} too short", line + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))
        };
        for k in 0..dim {
            points.push(field(k)?);
        }
        weights.push(field(dim)?);
        if let Some(c) = density_col {
            densities.push(field(c)?);
        }
    }
    ParticleEnsemble::new(dim, points, weights, density_col.map(|_| densities))
}

pub fn read_ensemble(path: &Path) -> Result<ParticleEnsemble> {
    ensemble_from_reader(open(path)?)
}

pub fn ensemble_to_writer(w: impl Write, e: &ParticleEnsemble) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=e.dim()).map(|k| format!("x{k}")).collect();
    header.push("weight".into());
    if e.density_values().is_some() {
        header.push("density".into());
    }
    wtr.write_record(&header)?;
    for i in 0..e.len() {
        let mut row: Vec<String> = e.point(i).iter().map(f64::to_string).collect();
        row.push(e.weights()[i].to_string());
        if let Some(d) = e.density_values() {
            row.push(d[i].to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_ensemble(path: &Path, e: &ParticleEnsemble) -> Result<()> {
    ensemble_to_writer(BufWriter::new(File::create(path)?), e)
}

/// Writes a CSV table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `x` rounded to `digits` significant digits, in plain or scientific
/// notation whichever is shorter to read.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::sample_gaussian;

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridDensity::from_fn(vec![-1.0, 0.0], vec![1.0, 2.0], vec![3, 4], |x| 0.1 + x[0] * x[0] + x[1] / 3.0).unwrap();
        let p = dir.path().join("g.json");
        write_grid(&p, &g).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"dim\": 2") && text.contains("\"data\""));
    }

    #[test]
    fn grid_dim_must_match_shape() {
        let doc = r#"{"dim": 2, "lo": [0], "hi": [1], "shape": [2], "data": [1, 1]}"#;
        assert!(matches!(grid_from_reader(doc.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn ensemble_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GaussianDensity::from_slices(&[0.5, -1.0], &[&[1.0, 0.3], &[0.3, 2.0]]).unwrap();
        let e = sample_gaussian(&g, 25, 9).unwrap();
        let p = dir.path().join("e.csv");
        write_ensemble(&p, &e).unwrap();
        assert_eq!(read_ensemble(&p).unwrap(), e);
        let plain = ParticleEnsemble::uniform(1, vec![0.1, 0.2, 0.7], None).unwrap();
        write_ensemble(&p, &plain).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("x1,weight\n"));
        assert_eq!(read_ensemble(&p).unwrap(), plain);
    }

    #[test]
    fn ensemble_header_is_checked() {
        assert!(matches!(ensemble_from_reader("a,b\n1,2\n".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(ensemble_from_reader("x1,weight\n1,oops\n".as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn gaussian_and_model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (truth, _) = crate::refine::example_linear_models();
        let p = dir.path().join("m.json");
        write_model(&p, &truth).unwrap();
        assert_eq!(read_model(&p).unwrap(), truth);
        let p = dir.path().join("g.json");
        write_gaussian(&p, truth.initial()).unwrap();
        assert_eq!(&read_gaussian(&p).unwrap(), truth.initial());
    }

    #[test]
    fn systems_single_or_list() {
        let one = r#"{"A": [[1, 0], [0, 1]], "B": [[1], [0]]}"#;
        assert_eq!(systems_from_reader(one.as_bytes()).unwrap().len(), 1);
        let many = format!("[{one}, {one}, {one}]");
        assert_eq!(systems_from_reader(many.as_bytes()).unwrap().len(), 3);
        assert!(systems_from_reader(r#"{"A": [[1]], "B": [[1], [2]]}"#.as_bytes()).is_err());
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(2.0, 12), "2.00000000000");
        assert_eq!(format_significant(0.0123456789012345, 12), "0.0123456789012");
        assert_eq!(format_significant(1.5e-9, 3), "1.50e-9");
        assert_eq!(format_significant(0.0, 12), "0");
    }
}
