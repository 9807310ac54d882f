//! Emission-absorption volume rendering over the scene box.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradSink, NodeId, Tape, Values};
use crate::camera::CameraPose;
use crate::error::Result;
use crate::geom::Vec3;
use crate::image::{ImageBuffer, Rect};
use crate::triplane::{FieldVars, HeadKind, MlpCache, Points, TriplaneField};

/// Guard for the depth normalization `Σ w t / max(mask, ε)`.
pub const DEPTH_EPS: f64 = 1e-10;

/// Channels per pixel of a differentiable render: r, g, b, mask, depth.
pub const VOLUME_CHANNELS: usize = 5;

/// Anything that yields density and color at a point.
pub trait RadianceField {
    fn density_color(&self, x: Vec3) -> (f64, [f64; 3]);
}

impl RadianceField for TriplaneField {
    fn density_color(&self, x: Vec3) -> (f64, [f64; 3]) {
        thread_local! {
            static SCRATCH: RefCell<(MlpCache, Vec<f64>)> = RefCell::default();
        }
        SCRATCH.with_borrow_mut(|(cache, out)| {
            out.clear();
            self.query_heads(&[HeadKind::Density, HeadKind::Color], x, cache, out);
            (out[0], [out[1], out[2], out[3]])
        })
    }
}

/// Adapter for closures.
pub struct FnField<F>(pub F);

impl<F: Fn(Vec3) -> (f64, [f64; 3])> RadianceField for FnField<F> {
    fn density_color(&self, x: Vec3) -> (f64, [f64; 3]) {
        (self.0)(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeOptions {
    pub n_samples: usize,
    /// Seed for stratified jitter; `None` samples bin midpoints.
    pub jitter: Option<u64>,
}

impl VolumeOptions {
    pub fn new(n_samples: usize) -> Self {
        Self { n_samples, jitter: None }
    }
}

/// Sample layout of one ray.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub points: Vec<Vec3>,
    /// z-depth of each sample.
    pub depths: Vec<f64>,
    pub delta: f64,
}

/// Stratified samples of the ray through pixel `(px, py)`, or `None` when the
/// ray misses the scene box.
pub fn ray_samples(cam: &CameraPose, px: usize, py: usize, opts: &VolumeOptions) -> Option<RaySamples> {
    let ray = cam.pixel_ray(px, py);
    if ray.is_miss() {
        return None;
    }
    let n = opts.n_samples;
    let delta = (ray.t_far - ray.t_near) / n as f64;
    let zscale = ray.direction.dot(cam.forward());
    let mut rng = opts.jitter.map(|seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream((py * cam.width() + px) as u64);
        r
    });
    let mut points = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let u = match rng.as_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let t = ray.t_near + (i as f64 + u) * delta;
        points.push(ray.at(t));
        depths.push(t * zscale);
    }
    Some(RaySamples { points, depths, delta })
}

/// Composited `(rgb, mask, depth)` of one ray over a white background.
pub fn composite(sigma: &[f64], color: &[[f64; 3]], depths: &[f64], delta: f64) -> ([f64; 3], f64, f64) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut mask = 0.0;
    let mut dsum = 0.0;
    for ((&s, c), &t) in sigma.iter().zip(color).zip(depths) {
        let alpha = 1.0 - (-s * delta).exp();
        let w = trans * alpha;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        mask += w;
        dsum += w * t;
        trans *= 1.0 - alpha;
    }
    for v in rgb.iter_mut() {
        *v += 1.0 - mask;
    }
    (rgb, mask, dsum / mask.max(DEPTH_EPS))
}

/// Renders rgb, mask and depth. `patch` restricts rendering to a rectangle;
/// the result then has the patch's size, and each pixel is identical to the
/// same pixel of a full render.
pub fn render_volume(
    field: &impl RadianceField,
    cam: &CameraPose,
    opts: &VolumeOptions,
    patch: Option<Rect>,
) -> Result<ImageBuffer> {
    check_options(opts)?;
    let rect = patch.unwrap_or(Rect::full(cam.width(), cam.height()));
    rect.check(cam.width(), cam.height())?;
    let mut img = ImageBuffer::background(rect.width, rect.height);
    img.normal = None;
    let depth = img.depth.as_mut().expect("background has depth");
    let mut sigma = Vec::with_capacity(opts.n_samples);
    let mut color = Vec::with_capacity(opts.n_samples);
    for (i, (px, py)) in rect.pixels().enumerate() {
        let Some(rs) = ray_samples(cam, px, py, opts) else {
            continue;
        };
        sigma.clear();
        color.clear();
        for &x in &rs.points {
            let (s, c) = field.density_color(x);
            sigma.push(s);
            color.push(c);
        }
        let (rgb, m, d) = composite(&sigma, &color, &rs.depths, rs.delta);
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&rgb);
        img.mask[i] = m;
        depth[i] = d;
    }
    Ok(img)
}

fn check_options(opts: &VolumeOptions) -> Result<()> {
    if opts.n_samples == 0 {
        return Err(crate::Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    Ok(())
}

/// A differentiable render: node of `VOLUME_CHANNELS` values per pixel.
#[derive(Clone, Copy, Debug)]
pub struct VolumeNode {
    pub node: NodeId,
    pub width: usize,
    pub height: usize,
}

impl VolumeNode {
    /// Reads the tape values back into an image buffer.
    pub fn to_image(&self, tape: &Tape<'_>) -> ImageBuffer {
        let v = tape.value(self.node);
        let mut img = ImageBuffer::background(self.width, self.height);
        img.normal = None;
        let depth = img.depth.as_mut().expect("background has depth");
        for (i, px) in v.chunks_exact(VOLUME_CHANNELS).enumerate() {
            img.rgb[3 * i..3 * i + 3].copy_from_slice(&px[..3]);
            img.mask[i] = px[3];
            depth[i] = px[4];
        }
        img
    }
}

/// Records a volume render of `field` on the tape.
pub fn render_volume_on_tape<'a>(
    field: &'a TriplaneField,
    tape: &mut Tape<'a>,
    vars: &FieldVars,
    cam: &CameraPose,
    opts: &VolumeOptions,
    patch: Option<Rect>,
) -> Result<VolumeNode> {
    let rect = patch.unwrap_or(Rect::full(cam.width(), cam.height()));
    rect.check(cam.width(), cam.height())?;
    let pixels: Vec<(usize, usize)> = rect.pixels().collect();
    let node = render_pixels_on_tape(field, tape, vars, cam, opts, &pixels)?;
    Ok(VolumeNode { node, width: rect.width, height: rect.height })
}

/// Records a volume render of the listed pixels as a `pixels.len()` by 1
/// image.
pub fn render_rays_on_tape<'a>(
    field: &'a TriplaneField,
    tape: &mut Tape<'a>,
    vars: &FieldVars,
    cam: &CameraPose,
    opts: &VolumeOptions,
    pixels: &[(usize, usize)],
) -> Result<VolumeNode> {
    if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= cam.width() || y >= cam.height()) {
        return Err(crate::Error::InvalidArgument(format!("pixel ({x}, {y}) outside the image")));
    }
    let node = render_pixels_on_tape(field, tape, vars, cam, opts, pixels)?;
    Ok(VolumeNode { node, width: pixels.len(), height: 1 })
}

fn render_pixels_on_tape<'a>(
    field: &'a TriplaneField,
    tape: &mut Tape<'a>,
    vars: &FieldVars,
    cam: &CameraPose,
    opts: &VolumeOptions,
    pixels: &[(usize, usize)],
) -> Result<NodeId> {
    check_options(opts)?;
    let n = opts.n_samples;
    // (pixel index, sample spacing) per hit ray.
    let mut rays: Vec<(usize, f64)> = Vec::new();
    let mut points = Vec::new();
    let mut depths = Vec::new();
    for (i, &(px, py)) in pixels.iter().enumerate() {
        if let Some(rs) = ray_samples(cam, px, py, opts) {
            rays.push((i, rs.delta));
            points.extend(rs.points);
            depths.extend(rs.depths);
        }
    }
    let n_pix = pixels.len();
    let mut value = vec![0.0; n_pix * VOLUME_CHANNELS];
    for px in value.chunks_exact_mut(VOLUME_CHANNELS) {
        px[..3].fill(1.0);
    }
    if rays.is_empty() {
        return Ok(tape.constant(value));
    }
    let q = field.query_on_tape(tape, vars, &[HeadKind::Density, HeadKind::Color], Points::Fixed(points));
    {
        let qv = tape.value(q);
        let mut sigma = vec![0.0; n];
        let mut color = vec![[0.0; 3]; n];
        for (r, &(i, delta)) in rays.iter().enumerate() {
            for k in 0..n {
                let s = &qv[(r * n + k) * 4..(r * n + k) * 4 + 4];
                sigma[k] = s[0];
                color[k] = [s[1], s[2], s[3]];
            }
            let (rgb, m, d) = composite(&sigma, &color, &depths[r * n..(r + 1) * n], delta);
            let px = &mut value[i * VOLUME_CHANNELS..(i + 1) * VOLUME_CHANNELS];
            px[..3].copy_from_slice(&rgb);
            px[3] = m;
            px[4] = d;
        }
    }
    let node = tape.custom(&[q], value, move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
        let Some(gq) = sink.slot(q) else { return };
        let qv = vals.get(q);
        composite_backward(&rays, n, &depths, qv, g, gq);
    });
    Ok(node)
}

/// Adjoint of [`composite`] for every ray, accumulated into `gq` laid out as
/// `[σ, r, g, b]` per sample.
fn composite_backward(rays: &[(usize, f64)], n: usize, depths: &[f64], qv: &[f64], g: &[f64], gq: &mut [f64]) {
    let mut w = vec![0.0; n];
    let mut t_next = vec![0.0; n];
    let mut e = vec![0.0; n];
    for (r, &(i, delta)) in rays.iter().enumerate() {
        let go = &g[i * VOLUME_CHANNELS..(i + 1) * VOLUME_CHANNELS];
        if go.iter().all(|&v| v == 0.0) {
            continue;
        }
        let base = r * n;
        let ts = &depths[base..base + n];
        let mut trans = 1.0;
        let mut mask = 0.0;
        let mut dsum = 0.0;
        for k in 0..n {
            let s = qv[(base + k) * 4];
            let a = 1.0 - (-s * delta).exp();
            w[k] = trans * a;
            trans *= 1.0 - a;
            t_next[k] = trans;
            mask += w[k];
            dsum += w[k] * ts[k];
        }
        let m = mask.max(DEPTH_EPS);
        let depth = dsum / m;
        let dmask = if mask > DEPTH_EPS { depth } else { 0.0 };
        for k in 0..n {
            let c = &qv[(base + k) * 4 + 1..(base + k) * 4 + 4];
            e[k] = go[0] * (c[0] - 1.0) + go[1] * (c[1] - 1.0) + go[2] * (c[2] - 1.0) + go[3] + go[4] * (ts[k] - dmask) / m;
        }
        let mut suffix = 0.0;
        for k in (0..n).rev() {
            let gs = delta * (e[k] * t_next[k] - suffix);
            suffix += e[k] * w[k];
            let o = (base + k) * 4;
            gq[o] += gs;
            gq[o + 1] += go[0] * w[k];
            gq[o + 2] += go[1] * w[k];
            gq[o + 3] += go[2] * w[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::TriplaneConfig;

    fn cam(size: u32) -> CameraPose {
        CameraPose::from_spherical(30.0, 20.0, 2.5, 50.0, size, size).unwrap()
    }

    #[test]
    fn empty_field_is_white() {
        let f = FnField(|_| (0.0, [0.2, 0.3, 0.4]));
        let img = render_volume(&f, &cam(8), &VolumeOptions::new(16), None).unwrap();
        assert!(img.rgb.iter().all(|&v| v == 1.0));
        assert!(img.mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_sample_compositing() {
        let delta = 0.5;
        let s = [0.7, 1.9];
        let c = [[0.1, 0.5, 0.9], [0.8, 0.2, 0.4]];
        let (rgb, m, _) = composite(&s, &c, &[1.0, 2.0], delta);
        let a1 = 1.0 - (-s[0] * delta).exp();
        let a2 = 1.0 - (-s[1] * delta).exp();
        for k in 0..3 {
            let want = a1 * c[0][k] + (1.0 - a1) * a2 * c[1][k] + (1.0 - a1) * (1.0 - a2);
            assert!((rgb[k] - want).abs() < 1e-15);
        }
        assert!((m - (a1 + (1.0 - a1) * a2)).abs() < 1e-15);
    }

    #[test]
    fn opaque_red_sphere_center_pixel() {
        let f = FnField(|x: Vec3| if x.norm() < 1.0 { (1e3, [1.0, 0.0, 0.0]) } else { (0.0, [0.0; 3]) });
        let c = CameraPose::from_spherical(0.0, 0.0, 2.5, 50.0, 64, 64).unwrap();
        let img = render_volume(&f, &c, &VolumeOptions::new(256), None).unwrap();
        let rgb = img.rgb_at(32, 32);
        assert!((rgb[0] - 1.0).abs() < 0.02 && rgb[1] < 0.02 && rgb[2] < 0.02, "{rgb:?}");
        assert!((img.depth_at(32, 32).unwrap() - 1.5).abs() < 0.02);
    }

    #[test]
    fn samples_behind_opaque_region_do_not_matter() {
        let s = vec![50.0; 8];
        let c = vec![[0.3, 0.6, 0.1]; 8];
        let d: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let (a, _, _) = composite(&s, &c, &d, 0.5);
        let mut s2 = s.clone();
        let mut c2 = c.clone();
        let mut d2 = d.clone();
        s2.extend([3.0, 7.0]);
        c2.extend([[0.9, 0.0, 0.9], [0.0, 1.0, 0.0]]);
        d2.extend([8.0, 9.0]);
        let (b, _, _) = composite(&s2, &c2, &d2, 0.5);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn patches_stitch_bit_exactly() {
        let field = TriplaneField::new(&TriplaneConfig::tiny(), 5).unwrap();
        let c = cam(12);
        let opts = VolumeOptions { n_samples: 8, jitter: Some(77) };
        let full = render_volume(&field, &c, &opts, None).unwrap();
        let mut stitched = ImageBuffer::background(12, 12);
        stitched.normal = None;
        for (x, y) in [(0, 0), (6, 0), (0, 6), (6, 6)] {
            let r = Rect { x, y, width: 6, height: 6 };
            let p = render_volume(&field, &c, &opts, Some(r)).unwrap();
            stitched.paste(r, &p).unwrap();
        }
        assert_eq!(stitched, full);
        let bad = Rect { x: 8, y: 0, width: 6, height: 2 };
        assert!(render_volume(&field, &c, &opts, Some(bad)).is_err());
    }

    #[test]
    fn tape_render_matches_plain_render() {
        let field = TriplaneField::new(&TriplaneConfig::tiny(), 5).unwrap();
        let c = cam(6);
        let opts = VolumeOptions::new(8);
        let plain = render_volume(&field, &c, &opts, None).unwrap();
        let mut tape = Tape::new();
        let vars = FieldVars::bind(&mut tape, &field);
        let v = render_volume_on_tape(&field, &mut tape, &vars, &c, &opts, None).unwrap();
        let img = v.to_image(&tape);
        for (a, b) in img.rgb.iter().zip(&plain.rgb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pixel_gradient_matches_finite_differences() {
        let mut field = TriplaneField::new(&TriplaneConfig::tiny(), 8).unwrap();
        let c = cam(8);
        let opts = VolumeOptions::new(12);
        // Mean of rgb, mask and depth channels keeps every adjoint path live.
        let objective = |f: &TriplaneField| {
            let img = render_volume(f, &c, &opts, None).unwrap();
            let n = img.pixel_count() as f64;
            img.rgb.iter().sum::<f64>() / (3.0 * n)
                + img.mask.iter().sum::<f64>() / n
                + 0.1 * img.depth.as_ref().unwrap().iter().sum::<f64>() / n
        };
        let grads = {
            let mut tape = Tape::new();
            let vars = FieldVars::bind(&mut tape, &field);
            let v = render_volume_on_tape(&field, &mut tape, &vars, &c, &opts, None).unwrap();
            let n = 64;
            let mut w = vec![0.0; n * VOLUME_CHANNELS];
            for px in w.chunks_exact_mut(VOLUME_CHANNELS) {
                px[..3].fill(1.0 / (3.0 * n as f64));
                px[3] = 1.0 / n as f64;
                px[4] = 0.1 / n as f64;
            }
            let wn = tape.constant(w);
            let prod = tape.mul(v.node, wn);
            let loss = tape.sum(prod);
            assert!((tape.scalar(loss) - objective(&field)).abs() < 1e-12);
            let g = tape.backward(loss).unwrap();
            [g.get(vars.plane(0)), g.get(vars.layer(HeadKind::Density, 0).0)]
        };
        let h = 1e-6;
        let mut checked = 0;
        for (t, gt) in grads.iter().enumerate() {
            let idx = if t == 0 { 0 } else { 3 };
            let ranked: Vec<usize> = {
                let mut v: Vec<usize> = (0..gt.len()).collect();
                v.sort_by(|&a, &b| gt[b].abs().total_cmp(&gt[a].abs()));
                v.into_iter().take(4).collect()
            };
            for k in ranked {
                let orig = field.params()[idx][k];
                field.params_mut()[idx][k] = orig + h;
                let fp = objective(&field);
                field.params_mut()[idx][k] = orig - h;
                let fm = objective(&field);
                field.params_mut()[idx][k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - gt[k]).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-3, "param {idx}[{k}]: fd {fd} tape {}", gt[k]);
                checked += 1;
            }
        }
        assert_eq!(checked, 8);
    }
}
