use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

use distrack::bb::{bb_solve, extract_velocity, geodesic_w_profile, intermediate_density, SolverParams};
use distrack::discrete_ot::{wasserstein, DiscreteMeasure};
use distrack::gaussian_ot::{displacement_interpolate, gaussian_wasserstein};
use distrack::io;
use distrack::liouville::{propagate, uniform_square, VectorFieldSpec};
use distrack::lti_feedback::{closed_loop_push, synthesize, FreePair, LtiSystem};
use distrack::measures::{grid_from_particles, moments, normalize, sample_gaussian, GaussianDensity, GridDensity};
use distrack::refine::{push_ensemble, refine_empirical, residual_ratio};

fn gaussian_grid(mean: [f64; 2], var: f64, n: usize) -> GridDensity {
    let g = GridDensity::from_fn(vec![-3.0, -3.0], vec![3.0, 3.0], vec![n, n], |x| {
        let d0 = x[0] - mean[0];
        let d1 = x[1] - mean[1];
        (-(d0 * d0 + d1 * d1) / (2.0 * var)).exp()
    })
    .unwrap();
    normalize(&g).unwrap()
}

#[test]
fn files_round_trip_through_disk() {
    let dir = TempDir::new().unwrap();
    let g = GaussianDensity::from_slices(&[1.0, -2.0], &[&[2.0, 0.4], &[0.4, 1.0]]).unwrap();
    let path = dir.path().join("g.json");
    io::write_gaussian(&path, &g).unwrap();
    assert_eq!(io::read_gaussian(&path).unwrap(), g);

    let grid = gaussian_grid([0.0, 0.0], 0.5, 16);
    let path = dir.path().join("grid.json");
    io::write_grid(&path, &grid).unwrap();
    assert_eq!(io::read_grid(&path).unwrap(), grid);

    let ens = sample_gaussian(&g, 25, 3).unwrap();
    let path = dir.path().join("e.csv");
    io::write_ensemble(&path, &ens).unwrap();
    assert_eq!(io::read_ensemble(&path).unwrap(), ens);
}

#[test]
fn sampled_moments_track_the_gaussian() {
    let g = GaussianDensity::from_slices(&[0.5, -0.5], &[&[0.4, 0.1], &[0.1, 0.3]]).unwrap();
    let ens = sample_gaussian(&g, 4000, 11).unwrap();
    let (mean, cov) = ens.sample_moments();
    assert!((mean - g.mean()).amax() < 0.05);
    assert!((cov - g.cov()).amax() < 0.05);

    let grid = grid_from_particles(&ens, &[-3.0, -3.0], &[3.0, 3.0], &[40, 40]).unwrap();
    let (gm, _) = moments(&grid).unwrap();
    assert!((gm - g.mean()).amax() < 0.1);
}

#[test]
fn free_pair_keeps_the_closed_loop() {
    let sys = LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]),
    )
    .unwrap();
    let a = GaussianDensity::from_slices(&[0.0, 1.0], &[&[1.0, 0.2], &[0.2, 0.8]]).unwrap();
    let b = GaussianDensity::from_slices(&[2.0, -1.0], &[&[0.5, 0.0], &[0.0, 1.5]]).unwrap();
    let base = synthesize(&sys, &a, &b, None).unwrap();
    let fp = FreePair {
        r_mat: DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.5),
        r_vec: DVector::from_vec(vec![0.3, -2.0, 1.0]),
    };
    let other = synthesize(&sys, &a, &b, Some(&fp)).unwrap();
    assert!((&base.k_mat - &other.k_mat).amax() > 1e-3);
    let (c1, o1) = base.closed_loop(&sys);
    let (c2, o2) = other.closed_loop(&sys);
    assert!((c1 - c2).amax() < 1e-10);
    assert!((o1 - o2).amax() < 1e-10);
    let pushed = closed_loop_push(&sys, &other, &a).unwrap();
    assert!((pushed.mean() - b.mean()).amax() < 1e-9);
    assert!((pushed.cov() - b.cov()).amax() < 1e-9);
}

#[test]
fn affine_flow_matches_closed_form() {
    let m = DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.0, -0.3]);
    let field = VectorFieldSpec::affine(m, DVector::from_vec(vec![0.2, 0.0])).unwrap();
    let start = uniform_square(20, -1.0, 1.0, 5).unwrap();
    let end = propagate(&field, &start, 0.0, 2.0, 400).unwrap();
    // Constant divergence −0.6 scales densities by e^{1.2} over two time units.
    for (a, b) in start.density_values().unwrap().iter().zip(end.density_values().unwrap()) {
        assert!((b / a - (1.2f64).exp()).abs() < 1e-9);
    }
}

#[test]
fn empirical_refinement_recovers_a_shift() {
    let g = GaussianDensity::from_slices(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    let pred = sample_gaussian(&g, 60, 1).unwrap();
    let shifted: Vec<f64> = pred.points().chunks(2).flat_map(|p| [p[0] + 0.5, p[1] - 1.0]).collect();
    let meas = distrack::measures::ParticleEnsemble::uniform(2, shifted, None).unwrap();
    let map = refine_empirical(&pred, &meas).unwrap();
    assert!(residual_ratio(&map, &pred, &meas).unwrap() < 1e-10);
    let pushed = push_ensemble(&map, &pred).unwrap();
    let w = wasserstein(&DiscreteMeasure::from_ensemble(&pushed).unwrap(), &DiscreteMeasure::from_ensemble(&meas).unwrap()).unwrap();
    assert!(w < 1e-9);
}

#[test]
fn dynamic_transport_between_gaussian_blobs() {
    let src = gaussian_grid([-0.8, 0.0], 0.3, 24);
    let tgt = gaussian_grid([0.8, 0.4], 0.3, 24);
    let sol = bb_solve(&src, &tgt, 8, &SolverParams::default()).unwrap();
    let a = GaussianDensity::from_slices(&[-0.8, 0.0], &[&[0.3, 0.0], &[0.0, 0.3]]).unwrap();
    let b = GaussianDensity::from_slices(&[0.8, 0.4], &[&[0.3, 0.0], &[0.0, 0.3]]).unwrap();
    let w2 = gaussian_wasserstein(&a, &b).unwrap().powi(2);
    assert!((sol.energy - w2).abs() < 0.05 * w2, "energy {} vs {w2}", sol.energy);

    let mid = intermediate_density(&sol, 0.5).unwrap();
    let (mean, _) = moments(&mid).unwrap();
    let expect = displacement_interpolate(&a, &b, 0.5).unwrap();
    assert!((mean - expect.mean()).amax() < 0.05);

    let v = extract_velocity(&sol, 0.5).unwrap();
    let peak = v.density.iter().copied().fold(0.0, f64::max);
    let (mut sum, mut count) = ([0.0; 2], 0.0);
    for i in 0..v.len() {
        if v.density[i] > 0.2 * peak {
            let vi = v.at(i);
            sum[0] += vi[0];
            sum[1] += vi[1];
            count += 1.0;
        }
    }
    assert!((sum[0] / count - 1.6).abs() < 0.15);
    assert!((sum[1] / count - 0.4).abs() < 0.15);

    let profile = geodesic_w_profile(&sol, &src, 5).unwrap();
    let total = profile.last().unwrap().1;
    for (s, w) in profile {
        assert!((w - s * total).abs() <= 0.05 * total + 1e-9);
    }
}
