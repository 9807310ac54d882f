//! Z-buffered triangle rasterization with flat world-space normals.
//!
//! Coverage is decided by intersecting each pixel-center ray with the
//! triangle, which gives perspective-correct barycentrics directly.

use crate::autodiff::scalar::v3;
use crate::autodiff::{GradSink, NodeId, Real, ScalarTape, Tape, Values};
use crate::camera::CameraPose;
use crate::geom::Vec3;
use crate::image::ImageBuffer;
use crate::mesh::Mesh;
use crate::triplane::{FieldVars, HeadKind, MlpCache, Points, TriplaneField};

/// Channels per pixel of a differentiable raster: r, g, b, depth, nx, ny, nz,
/// mask.
pub const RASTER_CHANNELS: usize = 8;

/// Vertex color used when a mesh carries none.
pub const DEFAULT_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// Colors every vertex from the field's color head.
pub fn shade_vertices(field: &TriplaneField, mesh: &Mesh) -> Mesh {
    let mut out = mesh.clone();
    let mut cache = MlpCache::default();
    let mut buf = Vec::new();
    out.colors = Some(
        mesh.vertices
            .iter()
            .map(|&v| {
                buf.clear();
                field.query_heads(&[HeadKind::Color], v, &mut cache, &mut buf);
                [buf[0], buf[1], buf[2]]
            })
            .collect(),
    );
    out
}

/// Records vertex shading; `positions` holds three values per vertex.
pub fn shade_on_tape<'a>(field: &'a TriplaneField, tape: &mut Tape<'a>, vars: &FieldVars, positions: NodeId) -> NodeId {
    field.query_on_tape(tape, vars, &[HeadKind::Color], Points::Node(positions))
}

/// Winning triangle and hit parameters of one pixel.
#[derive(Clone, Copy, Debug)]
struct Fragment {
    tri: usize,
    depth: f64,
    b1: f64,
    b2: f64,
}

/// Ray/triangle intersection returning `(t, b1, b2)`; `dir` must have unit
/// component along the camera's forward axis so that `t` is z-depth.
fn intersect<R: Real>(origin: [R; 3], dir: [R; 3], p: [[R; 3]; 3]) -> (R, R, R, R) {
    let e1 = v3::sub(p[1], p[0]);
    let e2 = v3::sub(p[2], p[0]);
    let pvec = v3::cross(dir, e2);
    let det = v3::dot(e1, pvec);
    let inv = R::cst(1.0) / det;
    let tvec = v3::sub(origin, p[0]);
    let b1 = v3::dot(tvec, pvec) * inv;
    let qvec = v3::cross(tvec, e1);
    let b2 = v3::dot(dir, qvec) * inv;
    let t = v3::dot(e2, qvec) * inv;
    (t, b1, b2, det)
}

/// The seven smooth outputs of a covered pixel: rgb, depth, normal.
fn pixel_kernel<R: Real>(origin: [R; 3], dir: [R; 3], p: [[R; 3]; 3], c: [[R; 3]; 3]) -> [R; 7] {
    let (t, b1, b2, _) = intersect(origin, dir, p);
    let b0 = R::cst(1.0) - b1 - b2;
    let mut out = [R::cst(0.0); 7];
    for k in 0..3 {
        out[k] = b0 * c[0][k] + b1 * c[1][k] + b2 * c[2][k];
    }
    out[3] = t;
    let n = v3::cross(v3::sub(p[1], p[0]), v3::sub(p[2], p[0]));
    let len = v3::dot(n, n).sqrt();
    for k in 0..3 {
        out[4 + k] = n[k] / len;
    }
    out
}

fn pixel_dir(cam: &CameraPose, px: usize, py: usize) -> Vec3 {
    cam.direction_at(px as f64 + 0.5, py as f64 + 0.5)
}

/// Visible fragment per pixel, in row-major order.
fn visibility(vertices: &[Vec3], triangles: &[[usize; 3]], cam: &CameraPose) -> Vec<Option<Fragment>> {
    let (w, h) = (cam.width(), cam.height());
    let mut frags: Vec<Option<Fragment>> = vec![None; w * h];
    let origin = cam.position().to_array();
    for (ti, tri) in triangles.iter().enumerate() {
        let p = tri.map(|i| vertices[i]);
        let proj = p.map(|v| cam.project(v));
        if proj.iter().any(|&(_, _, z)| !(z > 1e-9)) {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(u, v, _) in &proj {
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        // Pixel centers sit at integer + 1/2; widen by one pixel for safety.
        let x0 = (u0 - 1.5).floor().max(0.0) as usize;
        let y0 = (v0 - 1.5).floor().max(0.0) as usize;
        let x1 = ((u1 + 0.5).ceil().max(0.0) as usize).min(w);
        let y1 = ((v1 + 0.5).ceil().max(0.0) as usize).min(h);
        let pa = p.map(|v| v.to_array());
        for py in y0..y1 {
            for px in x0..x1 {
                let dir = pixel_dir(cam, px, py).to_array();
                let (t, b1, b2, det) = intersect(origin, dir, pa);
                if det == 0.0 || !(b1 >= 0.0 && b2 >= 0.0 && b1 + b2 <= 1.0 && t > 0.0) {
                    continue;
                }
                let slot = &mut frags[py * w + px];
                // Strict comparison: ties keep the lower triangle index.
                if slot.is_none_or(|f| t < f.depth) {
                    *slot = Some(Fragment { tri: ti, depth: t, b1, b2 });
                }
            }
        }
    }
    frags
}

/// Renders rgb, z-depth, world normal and mask. Background is white with
/// zero depth and normal. Meshes without colors render in [`DEFAULT_GRAY`].
pub fn rasterize(mesh: &Mesh, cam: &CameraPose) -> ImageBuffer {
    let (w, h) = (cam.width(), cam.height());
    let mut img = ImageBuffer::background(w, h);
    let frags = visibility(&mesh.vertices, &mesh.triangles, cam);
    let depth = img.depth.as_mut().expect("background has depth");
    let normal = img.normal.as_mut().expect("background has normals");
    for (i, f) in frags.iter().enumerate() {
        let Some(f) = f else { continue };
        let tri = mesh.triangles[f.tri];
        let b = [1.0 - f.b1 - f.b2, f.b1, f.b2];
        let mut rgb = [0.0; 3];
        for (k, &vi) in tri.iter().enumerate() {
            let c = mesh.colors.as_ref().map_or(DEFAULT_GRAY, |c| c[vi]);
            for ch in 0..3 {
                rgb[ch] += b[k] * c[ch];
            }
        }
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&rgb);
        depth[i] = f.depth;
        let n = mesh.face_normal(f.tri);
        normal[3 * i..3 * i + 3].copy_from_slice(&n.to_array());
        img.mask[i] = 1.0;
    }
    img
}

/// A differentiable raster: [`RASTER_CHANNELS`] values per pixel.
#[derive(Clone, Copy, Debug)]
pub struct RasterNode {
    pub node: NodeId,
    pub width: usize,
    pub height: usize,
}

impl RasterNode {
    pub fn to_image(&self, tape: &Tape<'_>) -> ImageBuffer {
        let v = tape.value(self.node);
        let mut img = ImageBuffer::background(self.width, self.height);
        let depth = img.depth.as_mut().expect("background has depth");
        let normal = img.normal.as_mut().expect("background has normals");
        for (i, px) in v.chunks_exact(RASTER_CHANNELS).enumerate() {
            img.rgb[3 * i..3 * i + 3].copy_from_slice(&px[..3]);
            depth[i] = px[3];
            normal[3 * i..3 * i + 3].copy_from_slice(&px[4..7]);
            img.mask[i] = px[7];
        }
        img
    }
}

/// Records a raster of the triangles over vertex `positions` and `colors`
/// (three values per vertex each). Visibility is fixed in the backward pass.
pub fn rasterize_on_tape(
    tape: &mut Tape<'_>,
    positions: NodeId,
    colors: NodeId,
    triangles: &[[usize; 3]],
    cam: &CameraPose,
) -> RasterNode {
    let (w, h) = (cam.width(), cam.height());
    let verts: Vec<Vec3> = tape
        .value(positions)
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let frags = visibility(&verts, triangles, cam);
    let cols = tape.value(colors);
    let origin = cam.position().to_array();
    let mut value = vec![0.0; w * h * RASTER_CHANNELS];
    // (pixel, triangle, ray direction) of covered pixels.
    let mut covered: Vec<(usize, [usize; 3], [f64; 3])> = Vec::new();
    for (i, f) in frags.iter().enumerate() {
        let px = &mut value[i * RASTER_CHANNELS..(i + 1) * RASTER_CHANNELS];
        let Some(f) = f else {
            px[..3].fill(1.0);
            continue;
        };
        let tri = triangles[f.tri];
        let dir = pixel_dir(cam, i % w, i / w).to_array();
        let p = tri.map(|v| verts[v].to_array());
        let c = tri.map(|v| [cols[3 * v], cols[3 * v + 1], cols[3 * v + 2]]);
        let out = pixel_kernel(origin, dir, p, c);
        px[..7].copy_from_slice(&out);
        px[7] = 1.0;
        covered.push((i, tri, dir));
    }
    let node = tape.custom(&[positions, colors], value, move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
        let pos = vals.get(positions);
        let col = vals.get(colors);
        let mut gp = sink.take(positions);
        let mut gc = sink.take(colors);
        for &(i, tri, dir) in &covered {
            let go = &g[i * RASTER_CHANNELS..i * RASTER_CHANNELS + 7];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            let st = ScalarTape::new();
            let p = tri.map(|v| [0, 1, 2].map(|k| st.var(pos[3 * v + k])));
            let c = tri.map(|v| [0, 1, 2].map(|k| st.var(col[3 * v + k])));
            let out = pixel_kernel(v3::lift(origin), v3::lift(dir), p, c);
            let mut obj = crate::autodiff::Var::constant(0.0);
            for (o, &gk) in out.iter().zip(go) {
                if gk != 0.0 {
                    obj = obj + *o * crate::autodiff::Var::constant(gk);
                }
            }
            let adj = st.gradient(obj);
            for (corner, &v) in tri.iter().enumerate() {
                for k in 0..3 {
                    if let Some(gp) = gp.as_mut() {
                        gp[3 * v + k] += adj.wrt(p[corner][k]);
                    }
                    if let Some(gc) = gc.as_mut() {
                        gc[3 * v + k] += adj.wrt(c[corner][k]);
                    }
                }
            }
        }
        if let Some(gp) = gp {
            sink.put(positions, gp);
        }
        if let Some(gc) = gc {
            sink.put(colors, gc);
        }
    });
    RasterNode { node, width: w, height: h }
}
