use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recon3d::campose::{zero123pp_targets, CameraRig};
use recon3d::dataio::{render_gt, SceneSpec};
use recon3d::error::Error;
use recon3d::flexigrid::{build_grid, extract_mesh, Lattice};
use recon3d::geom::Vec3;
use recon3d::metrics::nearest_distances;
use recon3d::optfit::{fit_stage1, fit_stage2, FitConfig, ViewSet};
use recon3d::raster::shade_vertices;
use recon3d::triplane::{TriplaneConfig, TriplaneField};

fn views(scene: &str, size: u32) -> ViewSet {
    let rig = CameraRig { width: size, height: size, ..CameraRig::default() };
    let poses = zero123pp_targets(0.0, &rig).unwrap().poses;
    let images = render_gt(&SceneSpec::parse(scene).unwrap(), &poses);
    ViewSet::new(poses, images).unwrap()
}

fn small_config() -> FitConfig {
    let mut cfg = FitConfig::desk();
    cfg.triplane = TriplaneConfig {
        resolution: 16,
        channels: 4,
        hidden_width: 8,
        ..cfg.triplane
    };
    cfg.stage1.n_samples = 12;
    cfg.stage1.rays_per_view = Some(16);
    cfg.stage2.grid = 16;
    cfg.stage2.render_size = 16;
    cfg.stage2.deformation_samples = Some(64);
    cfg
}

/// `tau` at the median lattice density, so the level set crosses the grid.
fn median_level(field: &TriplaneField, n: usize) -> f64 {
    let mut d: Vec<f64> = Lattice::new(n).unwrap().points().into_iter().map(|x| field.density_raw(x)).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

#[test]
fn zero_steps_leave_the_field_unchanged() {
    let mut cfg = small_config();
    cfg.stage1.steps = 0;
    let v = views("sphere:0.5", 16);
    let mut field = TriplaneField::new(&cfg.triplane, 1).unwrap();
    let before = field.clone();
    assert!(fit_stage1(&mut field, &v, &cfg, None).unwrap().is_empty());
    assert_eq!(field, before);
}

#[test]
fn fixed_seed_gives_bit_identical_fits() {
    let mut cfg = small_config();
    cfg.stage1.steps = 4;
    let v = views("sphere:0.5#00ff00", 16);
    let run = || {
        let mut f = TriplaneField::new(&cfg.triplane, cfg.seed).unwrap();
        let trace = fit_stage1(&mut f, &v, &cfg, None).unwrap();
        (f, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    cfg.seed += 1;
    let mut c = TriplaneField::new(&cfg.triplane, 0).unwrap();
    fit_stage1(&mut c, &v, &cfg, None).unwrap();
    assert_ne!(a, c);
}

#[test]
fn non_finite_ground_truth_aborts_with_the_step() {
    let mut cfg = small_config();
    cfg.stage1.steps = 3;
    let mut v = views("sphere:0.5", 16);
    for img in v.images.iter_mut() {
        img.rgb.iter_mut().for_each(|x| *x = f64::NAN);
    }
    let mut field = TriplaneField::new(&cfg.triplane, 0).unwrap();
    match fit_stage1(&mut field, &v, &cfg, None) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn stage2_with_zero_steps_returns_the_handoff_mesh() {
    let mut cfg = small_config();
    cfg.stage2.steps = 0;
    let mut field = TriplaneField::new(&cfg.triplane, 3).unwrap();
    cfg.tau = median_level(&field, cfg.stage2.grid);
    let handoff = field.with_sdf_from_density(cfg.tau).unwrap();
    let expected = shade_vertices(&handoff, &extract_mesh(&build_grid(&handoff, cfg.stage2.grid).unwrap()).unwrap());
    let (mesh, trace) = fit_stage2(&mut field, &views("sphere:0.5", 16), &cfg, None).unwrap();
    assert!(trace.is_empty());
    assert!(!mesh.is_empty());
    assert_eq!(mesh, expected);
}

#[test]
fn stage2_reports_a_vanished_surface() {
    let mut cfg = small_config();
    cfg.stage2.steps = 5;
    let mut field = TriplaneField::new(&cfg.triplane, 3).unwrap();
    cfg.tau = 1e6;
    match fit_stage2(&mut field, &views("sphere:0.5", 16), &cfg, None) {
        Err(e @ Error::IsoSurfaceVanished { step: 0 }) => assert!(e.to_string().contains("iso-surface vanished")),
        other => panic!("expected a vanished surface, got {other:?}"),
    }
}

#[test]
fn stage2_steps_run_and_trace() {
    let mut cfg = small_config();
    cfg.stage1.steps = 40;
    cfg.stage2.steps = 3;
    let v = views("sphere:0.5", 16);
    let mut field = TriplaneField::new(&cfg.triplane, 3).unwrap();
    fit_stage1(&mut field, &v, &cfg, None).unwrap();
    cfg.tau = median_level(&field, cfg.stage2.grid);
    let before = field.with_sdf_from_density(cfg.tau).unwrap();
    let (mesh, trace) = fit_stage2(&mut field, &v, &cfg, None).unwrap();
    assert_eq!(trace.len(), 3);
    assert!(trace.iter().all(|r| r.stage == 2 && r.total().is_finite()));
    assert!(mesh.colors.is_some());
    assert_ne!(field, before);
}

/// Mean distance from density level-set points, found by bisection along
/// random rays, to the handoff extraction.
#[test]
fn handoff_extraction_tracks_the_density_level_set() {
    let n = 32;
    let field = TriplaneField::new(&FitConfig::desk().triplane, 8).unwrap();
    let tau = median_level(&field, n);
    let handoff = field.with_sdf_from_density(tau).unwrap();
    let mesh = extract_mesh(&build_grid(&handoff, n).unwrap()).unwrap();
    assert!(!mesh.is_empty());
    // Dense surface samples stand in for the mesh.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut surface = Vec::new();
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        for _ in 0..8 {
            let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            surface.push(a + (b - a) * u + (c - a) * v);
        }
    }
    let f = |p: Vec3| field.density_raw(p) - tau;
    let mut hits = Vec::new();
    while hits.len() < 200 {
        let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if f(a).signum() == f(b).signum() {
            continue;
        }
        let (mut lo, mut hi) = (a, b);
        for _ in 0..60 {
            let m = (lo + hi) * 0.5;
            if f(m).signum() == f(lo).signum() {
                lo = m;
            } else {
                hi = m;
            }
        }
        hits.push((lo + hi) * 0.5);
    }
    let d = nearest_distances(&hits, &surface);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!(mean <= 2.0 * 2.0 / n as f64, "mean distance {mean}");
}

#[test]
fn red_sphere_fit_shades_red() {
    let mut cfg = FitConfig::desk();
    cfg.stage1.steps = 300;
    let v = views("sphere:0.5#ff0000", 64);
    let mut field = TriplaneField::new(&cfg.triplane, cfg.seed).unwrap();
    fit_stage1(&mut field, &v, &cfg, None).unwrap();
    let handoff = field.with_sdf_from_density(cfg.tau).unwrap();
    let mesh = shade_vertices(&handoff, &extract_mesh(&build_grid(&handoff, 32).unwrap()).unwrap());
    let colors = mesh.colors.unwrap();
    let mut mean = [0.0; 3];
    for c in &colors {
        (0..3).for_each(|k| mean[k] += c[k] / colors.len() as f64);
    }
    let err = (0..3).map(|k| (mean[k] - [1.0, 0.0, 0.0][k]).abs()).fold(0.0, f64::max);
    assert!(err <= 0.05, "mean color {mean:?}");
}
