use std::path::Path;

use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recon3d::camera::CameraPose;
use recon3d::dataio::{obj_string, parse_obj, read_pfm, write_pfm, FloatMap};
use recon3d::flexigrid::{extract_mesh, ExtractionGrid};
use recon3d::geom::Vec3;
use recon3d::image::ImageBuffer;
use recon3d::mesh::{box_mesh, Mesh};
use recon3d::metrics::{chamfer, fscore, KdTree};
use recon3d::optfit::{adam_step, cosine_lr, loss_stage1, AdamParams, AdamState, LossWeights};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
    let mut img = ImageBuffer::background(w, h);
    img.rgb.iter_mut().for_each(|v| *v = rng.random());
    img.mask.iter_mut().for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { 0.0 });
    img
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stage1_loss_is_nonnegative_and_zero_on_match(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<_> = (0..3).map(|_| random_image(&mut rng, 8, 6)).collect();
        let pred: Vec<_> = (0..3).map(|_| random_image(&mut rng, 8, 6)).collect();
        let w = LossWeights::default();
        prop_assert_eq!(loss_stage1(&gt, &gt, &w, None).unwrap().total(), 0.0);
        let t = loss_stage1(&pred, &gt, &w, None).unwrap();
        prop_assert!(t.total() > 0.0);
        prop_assert!(t.rgb >= 0.0 && t.mask >= 0.0);
    }

    #[test]
    fn stage1_loss_ignores_view_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<_> = (0..4).map(|_| random_image(&mut rng, 5, 5)).collect();
        let pred: Vec<_> = (0..4).map(|_| random_image(&mut rng, 5, 5)).collect();
        let w = LossWeights::default();
        let a = loss_stage1(&pred, &gt, &w, None).unwrap().total();
        let order = [2, 0, 3, 1];
        let gp: Vec<_> = order.iter().map(|&i| gt[i].clone()).collect();
        let pp: Vec<_> = order.iter().map(|&i| pred[i].clone()).collect();
        let b = loss_stage1(&pp, &gp, &w, None).unwrap().total();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn chamfer_and_fscore_bounds(seed in any::<u64>(), na in 1usize..80, nb in 1usize..80, tau in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (cloud(&mut rng, na), cloud(&mut rng, nb));
        let ab = chamfer(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let f = fscore(&a, &b, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(fscore(&a, &a, tau).unwrap(), 1.0);
    }

    #[test]
    fn kd_tree_matches_brute_force(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, n);
        let tree = KdTree::new(&pts);
        for q in cloud(&mut rng, 20) {
            let brute = pts.iter().map(|&p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(tree.nearest_sq(q), brute);
        }
    }

    #[test]
    fn sign_flip_reverses_every_winding(cx in -0.2f64..0.2, cy in -0.2f64..0.2, r in 0.25f64..0.6) {
        let c = Vec3::new(cx, cy, 0.05);
        let out = extract_mesh(&ExtractionGrid::from_sdf_fn(12, |p| (p - c).norm() - r).unwrap()).unwrap();
        let inv = extract_mesh(&ExtractionGrid::from_sdf_fn(12, |p| r - (p - c).norm()).unwrap()).unwrap();
        prop_assert!(out.is_watertight());
        prop_assert_eq!(&inv.vertices, &out.vertices);
        prop_assert_eq!(inv.triangles, out.flipped().triangles);
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, a in 1e-6f64..1e-1, frac in 0.0f64..1.0) {
        let b = a * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, a, b);
            prop_assert!(lr <= prev && lr >= b - 1e-18 && lr <= a);
            prev = lr;
        }
        prop_assert_eq!(cosine_lr(total + 5, total, a, b), b);
    }

    #[test]
    fn adam_ignores_zero_gradients(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let before = p.clone();
        let mut state = AdamState::new(&[n]);
        adam_step(&mut [&mut p], &[vec![0.0; n]], &mut state, 0.1, &AdamParams::default()).unwrap();
        prop_assert_eq!(p, before);
    }

    #[test]
    fn obj_round_trip(seed in any::<u64>(), colored in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mesh = box_mesh(Vec3::new(-0.3, -0.2, -0.1), Vec3::new(0.4, 0.5, 0.6));
        for v in mesh.vertices.iter_mut() {
            *v = *v + Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0);
        }
        if colored {
            mesh.colors = Some((0..mesh.vertices.len()).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        }
        let back = parse_obj(&obj_string(&mesh), Path::new("mem.obj")).unwrap();
        prop_assert_eq!(&back.triangles, &mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            prop_assert!((*a - *b).norm() <= 1e-8);
        }
        prop_assert_eq!(back.colors.is_some(), colored);
    }

    #[test]
    fn pose_json_round_trip(az in -720.0f64..720.0, el in -89.0f64..89.0, r in 0.5f64..10.0, fov in 5.0f64..120.0) {
        let pose = CameraPose::from_spherical(az, el, r, fov, 31, 17).unwrap();
        let back: CameraPose = serde_json::from_str(&serde_json::to_string(&pose).unwrap()).unwrap();
        prop_assert_eq!(back, pose);
    }
}

#[test]
fn pfm_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for channels in [1, 3] {
        let data: Vec<f32> = (0..7 * 5 * channels).map(|_| rng.random_range(-1e3..1e3)).collect();
        let map = FloatMap::new(7, 5, channels, data).unwrap();
        let path = dir.path().join(format!("m{channels}.pfm"));
        write_pfm(&map, &path).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), map);
    }
}

#[test]
fn box_mesh_is_closed_and_outward() {
    let m: Mesh = box_mesh(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
    assert!(m.is_watertight());
    for t in 0..m.triangles.len() {
        let [a, b, c] = m.corners(t);
        let centroid = (a + b + c) / 3.0;
        assert!(m.face_normal(t).dot(centroid) > 0.0);
    }
}
