use obstacle_ldp::spde::{condition_i_distance, solve_spde};
use obstacle_ldp::noise::substream_seed;
use obstacle_ldp::skeleton::{solve_penalized, Control};
use obstacle_ldp::{sample_noise, Family, ProblemSpec, TimeMesh};

// With a spatially constant noise coefficient the centre of the domain
// only feels the boundary through the heat kernel, so u(0, 0) is the
// skeleton value plus √ε σ B_T.
#[test]
fn additive_noise_variance_matches_brownian_endpoint() {
    let p = ProblemSpec::default_for(Family::LinearAdditive);
    let mesh = TimeMesh::new(1.0, 20).unwrap();
    let eps = 0.2;
    let mid = p.grid.n_nodes / 2;
    let det = solve_penalized(&p, &Control::zeros(mesh, 1), 1000, &mesh).unwrap().traj.fields[0][mid];
    let n = 10_000;
    let samples: Vec<f64> = (0..n)
        .map(|s| {
            let noise = sample_noise(mesh.n_steps, 1, mesh.dt(), substream_seed(5, s));
            solve_spde(&p, eps, 1000, &mesh, &noise, None).unwrap().traj.fields[0][mid]
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expected = eps * 0.3 * 0.3 * mesh.t_final;
    assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    assert!((mean - det).abs() < 4.0 * (expected / n as f64).sqrt(), "mean {mean} vs {det}");
}

#[test]
fn condition_i_is_independent_of_thread_count() {
    let p = ProblemSpec::default_for(Family::QuasilinearFull);
    let mesh = TimeMesh::new(1.0, 40).unwrap();
    let ks = vec![Control::zeros(mesh, 4), Control::from_fn(mesh, 4, |t, j| if j == 0 { t } else { 0.0 })];
    let go = || condition_i_distance(&p, &[0.1, 0.01], &ks, 4.0, 10_000, &mesh, 16, 7, &[0.1]).unwrap();
    let many = go();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(go);
    assert_eq!(many.distances, one.distances);
    assert_eq!(many.slope.to_bits(), one.slope.to_bits());
}

#[test]
fn distances_scale_like_square_root_of_epsilon() {
    let p = ProblemSpec::default_for(Family::LinearAdditive);
    let mesh = TimeMesh::new(1.0, 50).unwrap();
    let ks = vec![Control::zeros(mesh, 1)];
    let r = condition_i_distance(&p, &[0.04, 0.01], &ks, 4.0, 100_000, &mesh, 50, 3, &[]).unwrap();
    // same noise paths for both ε and a linear problem: the ratio is exact
    for (a, b) in r.distances[0].iter().zip(&r.distances[1]) {
        assert!((a / b - 2.0).abs() < 1e-9, "{a} / {b}");
    }
}
