//! Invariants checked on generated inputs: mixing, exchange-correlation
//! derivatives, field transfer, point location, metrics, mesh moving and
//! the augmented solver.

use std::f64::consts::PI;
use std::sync::Arc;

use ksfem_core::adapt::{
    adaptive_driver, metric_edge_lengths, metric_from_hessian, move_mesh, recover_hessian, sym_to_matrix, AdaptConfig,
    DriverConfig, MetricField, SolverMode, SymTensor,
};
use ksfem_core::augmented::{augmented_solve, coarse_mesh_for, AugmentedConfig};
use ksfem_core::eigensolve::orthonormality_error;
use ksfem_core::locate::{interpolate_field, Locator};
use ksfem_core::medit::{read_sol, write_sol, SolData};
use ksfem_core::mesh::{build_box_mesh, build_box_mesh_dims, BoxDomain, Mesh};
use ksfem_core::potentials::{
    correlation_energy_density, correlation_potential, exchange_energy_density, exchange_potential, Atom,
    MolecularSystem,
};
use ksfem_core::scf::{scf_solve, AndersonMixer, Discretization, InnerProduct, ScfConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_box() -> BoxDomain {
    BoxDomain::new([0.0; 3], [1.0; 3]).unwrap()
}

/// Structured mesh with interior nodes displaced by up to `jitter` of a cell.
fn jittered(dims: [usize; 3], jitter: f64, seed: u64) -> Mesh {
    let mesh = build_box_mesh_dims(unit_box(), dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = mesh.nodes.clone();
    for (i, p) in nodes.iter_mut().enumerate() {
        if mesh.boundary[i] {
            continue;
        }
        for k in 0..3 {
            p[k] += jitter * (rng.random::<f64>() - 0.5) / dims[k] as f64;
        }
    }
    Mesh::from_parts(nodes, mesh.tets.clone(), unit_box()).unwrap()
}

fn helium() -> MolecularSystem {
    MolecularSystem::neutral(vec![Atom::new("He", [0.0; 3], 2.0)], BoxDomain::cube(10.0).unwrap()).unwrap()
}

// Mixing

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anderson_coefficients_sum_to_one(depth in 1usize..7, steps in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mixer = AndersonMixer::new(depth, 0.7, InnerProduct::Plain).unwrap();
        let mut rho = random_vec(&mut rng, 12);
        for _ in 0..steps {
            let out = random_vec(&mut rng, 12);
            let (next, step) = mixer.mix(&rho, &out);
            let total: f64 = step.alphas.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "Σα = {total}");
            prop_assert!(mixer.history_len() < depth.max(2));
            rho = next;
        }
    }

    #[test]
    fn depth_one_is_simple_mixing(beta in 0.05f64..=1.0, steps in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mixer = AndersonMixer::new(1, beta, InnerProduct::Plain).unwrap();
        for _ in 0..steps {
            let rho_in = random_vec(&mut rng, 9);
            let rho_out = random_vec(&mut rng, 9);
            let (next, _) = mixer.mix(&rho_in, &rho_out);
            for i in 0..9 {
                prop_assert_eq!(next[i].to_bits(), (beta * rho_out[i] + (1.0 - beta) * rho_in[i]).to_bits());
            }
        }
    }
}

/// Iterations needed to bring the residual of `ρ ↦ c + Kρ` below 1e-10.
fn mixing_iterations(depth: usize, k: &DMatrix<f64>, c: &[f64]) -> usize {
    let n = c.len();
    let mut mixer = AndersonMixer::new(depth, 0.5, InnerProduct::Plain).unwrap();
    let mut rho = vec![0.0; n];
    for it in 1..=5000 {
        let out: Vec<f64> = (0..n)
            .map(|i| c[i] + (0..n).map(|j| k[(i, j)] * rho[j]).sum::<f64>())
            .collect();
        let res = out.iter().zip(&rho).map(|(o, r)| (o - r) * (o - r)).sum::<f64>().sqrt();
        if res <= 1e-10 {
            return it;
        }
        rho = mixer.mix(&rho, &out).0;
    }
    usize::MAX
}

#[test]
fn anderson_outpaces_simple_mixing_on_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let q = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5).qr().q();
    let spectrum = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| {
        -0.9 + 1.85 * i as f64 / (n - 1) as f64
    }));
    let k = &q * spectrum * q.transpose();
    let c = random_vec(&mut rng, n);
    let anderson = mixing_iterations(5, &k, &c);
    let simple = mixing_iterations(1, &k, &c);
    assert!(anderson < simple, "Anderson {anderson} iterations, simple {simple}");
}

// Exchange and correlation

fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[test]
fn exchange_potential_is_energy_derivative() {
    for rho in [0.1, 1.0, 10.0] {
        let d = central_difference(|r| r * exchange_energy_density(r).unwrap(), rho);
        let v = exchange_potential(rho).unwrap();
        assert!(((d - v) / v).abs() < 1e-6, "ρ = {rho}: {d} vs {v}");
    }
}

#[test]
fn correlation_potential_is_energy_derivative_on_each_branch() {
    for rs in [0.3, 0.7, 2.0, 5.0] {
        let rho = 3.0 / (4.0 * PI * rs * rs * rs);
        let d = central_difference(|r| r * correlation_energy_density(r).unwrap(), rho);
        let v = correlation_potential(rho).unwrap();
        assert!(((d - v) / v).abs() < 1e-5, "r_s = {rs}: {d} vs {v}");
    }
}

// Field transfer and location

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_fields_transfer_exactly(
        src in prop::array::uniform3(2usize..8),
        dst in prop::array::uniform3(2usize..8),
        coef in prop::array::uniform4(-3.0f64..3.0),
        seed in any::<u64>(),
    ) {
        let source = jittered(src, 0.4, seed);
        let target = jittered(dst, 0.4, seed.wrapping_add(1));
        let f = |p: &[f64; 3]| coef[0] + coef[1] * p[0] + coef[2] * p[1] + coef[3] * p[2];
        let values: Vec<f64> = source.nodes.iter().map(f).collect();
        let out = interpolate_field(&Locator::new(&source), &values, &target, seed).unwrap();
        for (p, v) in target.nodes.iter().zip(&out.values) {
            prop_assert!((v - f(p)).abs() <= 1e-12, "{v} vs {} at {p:?}", f(p));
        }
    }

    #[test]
    fn metric_is_spd_within_clamps(
        raw in prop::collection::vec(prop::array::uniform6(-1e4f64..1e4), 1..40),
        scale in prop::sample::select(vec![0.0, 1e-12, 1.0, 1e12]),
        eps in 1e-4f64..1.0,
    ) {
        let hessians: Vec<SymTensor> = raw.iter().map(|t| t.map(|x| x * scale)).collect();
        let cfg = AdaptConfig { epsilon: eps, ..AdaptConfig::default() };
        let metric = metric_from_hessian(&hessians, &cfg);
        prop_assert!(metric.is_spd());
        let (lo, hi) = (1.0 / (cfg.h_max * cfg.h_max), 1.0 / (cfg.h_min * cfg.h_min));
        for t in &metric.tensors {
            for l in SymmetricEigen::new(sym_to_matrix(t)).eigenvalues.iter() {
                prop_assert!(*l >= lo * (1.0 - 1e-9) && *l <= hi * (1.0 + 1e-9), "{l} outside [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn quadratic_transfer_stays_within_interpolation_bound() {
    let source = build_box_mesh(unit_box(), 8).unwrap();
    let target = build_box_mesh(unit_box(), 11).unwrap();
    let values: Vec<f64> = source.nodes.iter().map(|p| p[0] * p[0]).collect();
    let out = interpolate_field(&Locator::new(&source), &values, &target, 0).unwrap();
    let h = source.max_edge_length();
    let err = target
        .nodes
        .iter()
        .zip(&out.values)
        .map(|(p, v)| (v - p[0] * p[0]).abs())
        .fold(0.0f64, f64::max);
    assert!(err > 0.0 && err <= h * h, "error {err}, bound {}", h * h);
}

#[test]
fn walk_agrees_with_exhaustive_scan() {
    let mesh = jittered([7, 9, 8], 0.5, 11);
    let loc = Locator::new(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let queries: Vec<[f64; 3]> = (0..10_000)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let found = loc.locate_all(&queries, 9);
    for (q, l) in queries.iter().zip(&found) {
        let brute = loc.exhaustive(q);
        assert!(!l.clamped);
        let min_bary = l.bary.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_bary >= -1e-10, "walk returned a tet not containing {q:?}");
        if l.tet != brute.tet {
            // Queries on a shared face may land in either neighbour.
            let brute_min = brute.bary.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                min_bary.abs() < 1e-9 && brute_min.abs() < 1e-9,
                "{q:?}: tets {} and {}",
                l.tet,
                brute.tet
            );
        }
        let pts = mesh.tet_points(l.tet);
        for k in 0..3 {
            let x: f64 = (0..4).map(|a| l.bary[a] * pts[a][k]).sum();
            assert!((x - q[k]).abs() < 1e-10);
        }
    }
}

// Metrics and mesh moving

fn interior_hessians(n: usize, f: impl Fn(&[f64; 3]) -> f64) -> Vec<SymTensor> {
    let mesh = build_box_mesh(unit_box(), n).unwrap();
    let u: Vec<f64> = mesh.nodes.iter().map(&f).collect();
    let hess = recover_hessian(&mesh, &u);
    let h = 1.0 / n as f64;
    mesh.nodes
        .iter()
        .zip(hess)
        .filter(|(p, _)| p.iter().all(|&x| x > 2.5 * h && x < 1.0 - 2.5 * h))
        .map(|(_, t)| t)
        .collect()
}

#[test]
fn recovered_hessians_match_analytic_ones() {
    let quad = interior_hessians(16, |p| p[0] * p[0] + 2.0 * p[1] * p[1] + 3.0 * p[2] * p[2]);
    for t in &quad {
        for (got, want) in [(t[0], 2.0), (t[2], 4.0), (t[5], 6.0)] {
            assert!((got - want).abs() <= 0.1 * want, "diagonal {got} vs {want}");
        }
        assert!(t[1].abs() < 0.2 && t[3].abs() < 0.2 && t[4].abs() < 0.2, "{t:?}");
    }
    for t in interior_hessians(16, |p| 1.0 + p[0] - 2.0 * p[1] + 0.5 * p[2]) {
        assert!(t.iter().all(|x| x.abs() < 1e-8), "{t:?}");
    }
    for t in interior_hessians(16, |p| p[0] * p[1]) {
        assert!(
            (t[1] - 1.0).abs() < 0.1 && t[0].abs() < 0.1 && t[2].abs() < 0.1 && t[5].abs() < 0.1,
            "{t:?}"
        );
    }
}

#[test]
fn metric_scales_inversely_with_target() {
    let hessians: Vec<SymTensor> = vec![[3.0, 0.5, 2.0, -0.2, 0.1, 1.0], [0.4, 0.0, 0.9, 0.0, 0.0, 0.6]];
    let wide = AdaptConfig {
        h_min: 1e-3,
        h_max: 1e3,
        ..AdaptConfig::default()
    };
    let a = metric_from_hessian(
        &hessians,
        &AdaptConfig {
            epsilon: 0.1,
            ..wide.clone()
        },
    );
    let b = metric_from_hessian(&hessians, &AdaptConfig { epsilon: 0.05, ..wide });
    for (x, y) in a.tensors.iter().zip(&b.tensors) {
        for k in 0..6 {
            assert!((2.0 * x[k] - y[k]).abs() <= 1e-12 * y[k].abs().max(1.0));
        }
    }
}

fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

fn mean_central_edge(mesh: &Mesh) -> f64 {
    let edges: Vec<f64> = mesh
        .edges()
        .iter()
        .filter(|&&(a, b)| {
            let mid: Vec<f64> = (0..3)
                .map(|k| 0.5 * (mesh.nodes[a][k] + mesh.nodes[b][k]) - 0.5)
                .collect();
            mid.iter().map(|x| x * x).sum::<f64>() < 0.01
        })
        .map(|&(a, b)| ksfem_core::mesh::distance(&mesh.nodes[a], &mesh.nodes[b]))
        .collect();
    edges.iter().sum::<f64>() / edges.len() as f64
}

#[test]
fn moved_mesh_keeps_volume_boundary_and_orientation() {
    let mesh = build_box_mesh(unit_box(), 10).unwrap();
    let metric = gaussian_metric(&mesh, 400.0, 0.02);
    let moved = move_mesh(&mesh, &metric, 20).unwrap();
    moved.validate().unwrap();
    assert!(moved.min_volume() > 0.0);
    assert!((moved.total_volume() - 1.0).abs() < 1e-9);
    for (i, (a, b)) in mesh.nodes.iter().zip(&moved.nodes).enumerate() {
        if mesh.boundary[i] {
            assert_eq!(a, b, "boundary node {i} moved");
        }
    }
    assert_eq!(mesh.tets, moved.tets);
    let (before, after) = (mean_central_edge(&mesh), mean_central_edge(&moved));
    assert!(after < before, "central edges {before} -> {after}");
}

/// Isotropic metric peaked at the box centre.
fn gaussian_metric(mesh: &Mesh, amp: f64, width: f64) -> MetricField {
    let tensors = mesh
        .nodes
        .iter()
        .map(|p| {
            let r2: f64 = p.iter().map(|x| (x - 0.5) * (x - 0.5)).sum();
            let v = 1.0 + amp * (-r2 / width).exp();
            [v, 0.0, v, 0.0, 0.0, v]
        })
        .collect();
    MetricField { tensors }
}

/// (variance, coefficient of variation, maximum) of the metric edge lengths.
fn spread(mesh: &Mesh, amp: f64, width: f64) -> (f64, f64, f64) {
    let l = metric_edge_lengths(mesh, &gaussian_metric(mesh, amp, width));
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    let v = variance(&l);
    (v, v.sqrt() / mean, l.iter().cloned().fold(0.0, f64::max))
}

#[test]
fn moving_evens_out_metric_edge_lengths() {
    for (amp, width) in [(400.0, 0.02), (100.0, 0.1), (10.0, 0.1), (3.0, 0.1)] {
        let mut mesh = build_box_mesh(unit_box(), 10).unwrap();
        let first = spread(&mesh, amp, width);
        let mut last = first;
        for _ in 0..8 {
            mesh = move_mesh(&mesh, &gaussian_metric(&mesh, amp, width), 2).unwrap();
            let now = spread(&mesh, amp, width);
            assert!(
                now.1 <= last.1 * (1.0 + 1e-6),
                "peak {amp}: relative spread rose {} -> {}",
                last.1,
                now.1
            );
            assert!(
                now.2 <= last.2 * (1.0 + 1e-6),
                "peak {amp}: longest metric edge rose {} -> {}",
                last.2,
                now.2
            );
            last = now;
        }
        if amp <= 10.0 {
            assert!(last.0 < first.0, "peak {amp}: variance {} -> {}", first.0, last.0);
        }
    }
}

// Files

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tensor_sol_round_trips(raw in prop::collection::vec(prop::array::uniform6(-1.0f64..1.0), 1..30)) {
        let hessians: Vec<SymTensor> = raw;
        let cfg = AdaptConfig { h_min: 1e-3, h_max: 1e3, ..AdaptConfig::default() };
        let metric = metric_from_hessian(&hessians, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metric.sol");
        metric.write_sol(&path).unwrap();
        let back = MetricField::read_sol(&path, metric.len()).unwrap();
        for (a, b) in metric.tensors.iter().zip(&back.tensors) {
            for k in 0..6 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-10 * a[k].abs().max(1.0));
            }
        }
        prop_assert!(read_sol(&path, metric.len() + 1).is_err());
    }
}

#[test]
fn scalar_sol_with_wrong_node_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rho.sol");
    write_sol(&SolData::Scalar(vec![1.0, 2.0, 3.0]), &path).unwrap();
    assert!(read_sol(&path, 4).is_err());
    assert_eq!(read_sol(&path, 3).unwrap(), SolData::Scalar(vec![1.0, 2.0, 3.0]));
}

// Adaptive driver and augmented solver

#[test]
fn adapted_meshes_beat_uniform_ones_for_helium() {
    let sys = helium();
    let run = |mode| {
        let cfg = DriverConfig {
            adapt: AdaptConfig {
                k_max: 2,
                k_asm: 2,
                tol: 0.0,
                ..AdaptConfig::default()
            },
            mode,
            ..DriverConfig::default()
        };
        let out = adaptive_driver(&sys, &cfg);
        assert!(out.error.is_none(), "{:?}", out.error);
        out.levels
    };
    let adapted = run(SolverMode::Direct);
    let uniform = run(SolverMode::Uniform);
    assert_eq!(adapted.len(), uniform.len());
    let (a, u) = (adapted.last().unwrap(), uniform.last().unwrap());
    assert_eq!(a.nodes, u.nodes);
    assert!(a.energy < u.energy, "adapted {} vs uniform {}", a.energy, u.energy);
}

struct HeliumLevel {
    disc: Discretization,
    coarse: Arc<Mesh>,
    init: DMatrix<f64>,
    direct: f64,
}

fn helium_level() -> HeliumLevel {
    let sys = helium();
    let base = build_box_mesh(sys.domain, 12).unwrap();
    let metric = {
        let rho: Vec<f64> = base
            .nodes
            .iter()
            .map(|p| (-2.0 * p.iter().map(|x| x * x).sum::<f64>().sqrt()).exp())
            .collect();
        metric_from_hessian(&recover_hessian(&base, &rho), &AdaptConfig::default())
    };
    let fine = Arc::new(move_mesh(&base, &metric, 20).unwrap());
    let coarse = coarse_mesh_for(&fine, 8).unwrap();
    let mut disc = Discretization::new(fine, &sys).unwrap();
    let tight = ScfConfig {
        tol: 1e-6,
        eig_tol: 1e-9,
        ..ScfConfig::default()
    };
    let direct = scf_solve(&mut disc, &sys, None, &tight).unwrap();
    assert!(direct.converged);
    let init = ksfem_core::scf::initial_waves(&disc, &sys, 1, 0).unwrap();
    HeliumLevel {
        disc,
        coarse,
        init,
        direct: direct.total_energy(),
    }
}

#[test]
fn augmented_solve_matches_direct_and_keeps_orthonormality() {
    let sys = helium();
    let HeliumLevel {
        mut disc,
        coarse,
        init,
        direct,
    } = helium_level();
    let cfg = AugmentedConfig {
        tol: 1e-5,
        ..AugmentedConfig::default()
    };
    let aug = augmented_solve(coarse.clone(), &mut disc, &sys, &init, &cfg).unwrap();
    assert!(aug.converged);
    assert!(orthonormality_error(&aug.waves.coeffs, &disc.mass) < 1e-8);
    let e = aug.total_energy();
    assert!(
        (e - direct).abs() <= 1e-3 * direct.abs(),
        "augmented {e} vs direct {direct}"
    );

    // Restarting from the converged orbitals is already a fixed point.
    let again = augmented_solve(coarse, &mut disc, &sys, &aug.waves.coeffs, &cfg).unwrap();
    assert!(again.converged);
    assert!(
        again.log[0].density_change < cfg.tol,
        "first change {}",
        again.log[0].density_change
    );
}
