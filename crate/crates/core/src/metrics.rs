//! Image and geometry evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::ImageBuffer;
use crate::mesh::Mesh;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_SURFACE_SAMPLES: usize = 16384;
pub const DEFAULT_FSCORE_TAU: f64 = 0.2;
pub const DEFAULT_YAW_STEPS: usize = 72;
pub const YAW_SUBCLOUD: usize = 2048;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio over rgb with peak 1.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    let mse = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.rgb.len().max(1) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean structural similarity, per rgb channel over all window positions
/// that fit inside the image, averaged over channels. Images smaller than
/// the 11-pixel window use the largest odd window that fits.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("ssim of an empty image".into()));
    }
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let px = |img: &ImageBuffer, x: usize, y: usize| img.rgb[3 * (y * w + x) + ch];
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let wt = g[i] * g[j];
                        let (x, y) = (px(a, x0 + i, y0 + j), px(b, x0 + i, y0 + j));
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / 3.0)
}

/// Centers the bounding box at the origin and scales its largest extent
/// to 2.
pub fn normalize_unit_cube(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh.bounds().ok_or(Error::EmptyMesh)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let center = (lo + hi) * 0.5;
    let extent = (hi - lo).max_elem();
    if !(extent > 0.0) {
        return Err(Error::ZeroArea);
    }
    let s = 2.0 / extent;
    let mut out = mesh.clone();
    for v in out.vertices.iter_mut() {
        *v = (*v - center) * s;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub seed: u64,
}

/// `n` points uniform over the surface: triangles by area, then the
/// square-root barycentric warp.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    mesh.validate()?;
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * acc;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let su = r1.sqrt();
        let [a, b, c] = mesh.corners(t);
        points.push(a * (1.0 - su) + b * (su * (1.0 - r2)) + c * (su * r2));
    }
    Ok(PointCloud { points, seed })
}

/// Static 3-d tree answering exact nearest-neighbor distance queries.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree over a permutation of `points`.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    /// Squared distance from `q` to the nearest stored point.
    pub fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), &mut best);
        best
    }

    pub fn nearest(&self, q: Vec3) -> f64 {
        self.nearest_sq(q).sqrt()
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.points[self.order[mid]];
        let d = (q - p).norm_squared();
        if d < *best {
            *best = d;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8]) {
    if order.len() <= 1 {
        return;
    }
    let (lo, hi) = order.iter().fold((Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)), |(lo, hi), &i| {
        (lo.min(points[i]), hi.max(points[i]))
    });
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (al, ar) = axes.split_at_mut(mid);
    build(points, left, al);
    build(points, &mut right[1..], &mut ar[1..]);
}

fn check_clouds(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Nearest distance from every point of `from` into `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter().map(|&p| tree.nearest(p)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of the two directional means of non-squared nearest distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_clouds(a, b)?;
    Ok(mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a)))
}

/// Harmonic mean of precision (`a` within `tau` of `b`) and recall.
pub fn fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    check_clouds(a, b)?;
    let within = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let p = within(nearest_distances(a, b));
    let r = within(nearest_distances(b, a));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn rotate_mesh(mesh: &Mesh, deg: f64) -> Mesh {
    let mut m = mesh.clone();
    for v in m.vertices.iter_mut() {
        *v = v.rotate_z_deg(deg);
    }
    if let Some(n) = m.normals.as_mut() {
        for v in n.iter_mut() {
            *v = v.rotate_z_deg(deg);
        }
    }
    m
}

/// Rotates `pred` about z by the candidate angle (multiples of
/// `360/steps`, in `(-180, 180]`) that minimizes chamfer distance to `gt`
/// on small subclouds. Ties go to the smaller absolute angle.
pub fn align_yaw(pred: &Mesh, gt: &Mesh, steps: usize, seed: u64) -> Result<(Mesh, f64)> {
    let steps = steps.max(1);
    let pc = sample_surface(pred, YAW_SUBCLOUD, seed)?;
    let gc = sample_surface(gt, YAW_SUBCLOUD, seed)?;
    let gtree = KdTree::new(&gc.points);
    let step_deg = 360.0 / steps as f64;
    // Candidates ordered by |angle| so strict improvement breaks ties toward 0.
    let mut ks: Vec<i64> = vec![0];
    for k in 1..=(steps as i64 / 2) {
        ks.push(k);
        if -k * 2 > -(steps as i64) {
            ks.push(-k);
        }
    }
    let mut best = (f64::INFINITY, 0.0);
    for k in ks {
        let deg = k as f64 * step_deg;
        let rotated: Vec<Vec3> = pc.points.iter().map(|p| p.rotate_z_deg(deg)).collect();
        let fwd = mean(&rotated.iter().map(|&p| gtree.nearest(p)).collect::<Vec<_>>());
        let back = mean(&nearest_distances(&gc.points, &rotated));
        let cd = fwd + back;
        if cd < best.0 {
            best = (cd, deg);
        }
    }
    Ok((rotate_mesh(pred, best.1), best.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub cd: f64,
    pub fscore: f64,
    pub n_points: usize,
    pub seed: u64,
    pub aligned_yaw_deg: Option<f64>,
}

/// Normalizes both meshes to the unit cube, optionally aligns yaw, samples
/// `n` surface points from each with the same seed and reports CD and
/// F-Score.
pub fn evaluate_geometry(pred: &Mesh, gt: &Mesh, n: usize, seed: u64, tau: f64, align: bool) -> Result<GeometryReport> {
    let gt_n = normalize_unit_cube(gt)?;
    let mut pred_n = normalize_unit_cube(pred)?;
    let mut yaw = None;
    if align {
        let (m, deg) = align_yaw(&pred_n, &gt_n, DEFAULT_YAW_STEPS, seed)?;
        pred_n = m;
        yaw = Some(deg);
    }
    let a = sample_surface(&pred_n, n, seed)?;
    let b = sample_surface(&gt_n, n, seed)?;
    Ok(GeometryReport {
        cd: chamfer(&a.points, &b.points)?,
        fscore: fscore(&a.points, &b.points, tau)?,
        n_points: n,
        seed,
        aligned_yaw_deg: yaw,
    })
}
