//! Analytic scenes and their sphere-traced ground-truth renders.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::ImageBuffer;

/// Sphere tracing stops once `|s|` drops below this.
pub const TRACE_EPS: f64 = 1e-6;
pub const TRACE_MAX_STEPS: usize = 256;
pub const DEFAULT_ALBEDO: [f64; 3] = [0.8, 0.8, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Lies in the xy-plane around the z axis.
    Torus { major: f64, minor: f64 },
}

impl Shape {
    /// Distance from the center to the farthest surface point.
    fn extent(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => Vec3::from_array(h).norm(),
            Shape::Torus { major, minor } => major + minor,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents: h } => h.iter().all(|&v| v > 0.0),
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
        };
        if !ok || !self.extent().is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate primitive {self:?}")));
        }
        Ok(())
    }

    /// Signed distance at `p` relative to the primitive center.
    fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents: h } => {
                let q = p.abs() - Vec3::from_array(h);
                q.max(Vec3::ZERO).norm() + q.max_elem().min(0.0)
            }
            Shape::Torus { major, minor } => {
                let d = (p.x * p.x + p.y * p.y).sqrt() - major;
                (d * d + p.z * p.z).sqrt() - minor
            }
        }
    }

    /// Analytic unit gradient of [`Shape::sdf`].
    fn gradient(&self, p: Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { .. } => p.normalize(),
            Shape::Box { half_extents: h } => {
                let q = p.abs() - Vec3::from_array(h);
                let sign = Vec3::new(p.x.signum(), p.y.signum(), p.z.signum());
                if q.max_elem() > 0.0 {
                    q.max(Vec3::ZERO).normalize().mul_elem(sign)
                } else {
                    let a = (0..3).fold(0, |best, k| if q[k] > q[best] { k } else { best });
                    let mut g = Vec3::ZERO;
                    g[a] = sign[a];
                    g
                }
            }
            Shape::Torus { major, .. } => {
                let r = (p.x * p.x + p.y * p.y).sqrt();
                let d = r - major;
                let n = (d * d + p.z * p.z).sqrt();
                if r == 0.0 || n == 0.0 {
                    return Vec3::Z;
                }
                Vec3::new(d / n * p.x / r, d / n * p.y / r, p.z / n)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default)]
    pub center: [f64; 3],
    #[serde(default = "default_albedo")]
    pub albedo: [f64; 3],
}

fn default_albedo() -> [f64; 3] {
    DEFAULT_ALBEDO
}

impl Primitive {
    pub fn new(shape: Shape, center: Vec3, albedo: [f64; 3]) -> Self {
        Self {
            shape,
            center: center.to_array(),
            albedo,
        }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.shape.sdf(p - Vec3::from_array(self.center))
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        self.shape.gradient(p - Vec3::from_array(self.center))
    }
}

/// Union of primitives, all inside the unit sphere.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self { primitives };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        for p in &self.primitives {
            p.shape.check()?;
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument(format!("albedo {:?} outside [0, 1]", p.albedo)));
            }
            let reach = Vec3::from_array(p.center).norm() + p.shape.extent();
            if !(reach <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "primitive {:?} reaches {reach:.4} from the origin, outside the unit sphere",
                    p.shape
                )));
            }
        }
        Ok(())
    }

    /// Union SDF and the index of the closest primitive.
    pub fn closest(&self, p: Vec3) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| (prim.sdf(p), i))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |(s, _)| s)
    }

    /// Parses `kind:params[@cx,cy,cz][#rrggbb]` terms joined by `+`, e.g.
    /// `sphere:0.5#ff0000+box:0.25@0.5,0,0#0000ff`. Box takes one or three
    /// half-extents and torus takes `major,minor`.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |term: &str, msg: &str| Error::InvalidArgument(format!("scene term '{term}': {msg}"));
        let mut prims = Vec::new();
        for term in text.split('+').map(str::trim).filter(|t| !t.is_empty()) {
            let (body, albedo) = match term.split_once('#') {
                Some((b, hex)) => (b, parse_hex(hex).ok_or_else(|| err(term, "bad #rrggbb color"))?),
                None => (term, DEFAULT_ALBEDO),
            };
            let (body, center) = match body.split_once('@') {
                Some((b, c)) => {
                    let v = parse_list(c).ok_or_else(|| err(term, "bad center"))?;
                    let [x, y, z] = v[..] else {
                        return Err(err(term, "center needs three values"));
                    };
                    (b, Vec3::new(x, y, z))
                }
                None => (body, Vec3::ZERO),
            };
            let (kind, params) = body.split_once(':').ok_or_else(|| err(term, "expected kind:params"))?;
            let v = parse_list(params).ok_or_else(|| err(term, "bad parameters"))?;
            let shape = match (kind.trim().to_ascii_lowercase().as_str(), &v[..]) {
                ("sphere", &[r]) => Shape::Sphere { radius: r },
                ("box", &[h]) => Shape::Box { half_extents: [h; 3] },
                ("box", &[a, b, c]) => Shape::Box { half_extents: [a, b, c] },
                ("torus", &[major, minor]) => Shape::Torus { major, minor },
                _ => return Err(err(term, "unknown kind or wrong parameter count")),
            };
            prims.push(Primitive::new(shape, center, albedo));
        }
        Self::new(prims)
    }

    /// Reads a JSON scene file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SceneSpec =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("line {}", e.line()), e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    /// A scene argument: a JSON file if the path exists, else inline syntax.
    pub fn from_arg(arg: &str) -> Result<Self> {
        let p = Path::new(arg);
        if p.is_file() {
            Self::load(p)
        } else {
            Self::parse(arg)
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect()
}

fn parse_hex(s: &str) -> Option<[f64; 3]> {
    let s = s.trim();
    if s.len() != 6 || !s.is_ascii() {
        return None;
    }
    let c = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok().map(|v| v as f64 / 255.0);
    Some([c(0)?, c(2)?, c(4)?])
}

/// Sphere-traces one camera ray; returns the hit point and primitive.
fn trace(scene: &SceneSpec, cam: &CameraPose, px: usize, py: usize) -> Option<(Vec3, usize)> {
    let ray = cam.pixel_ray(px, py);
    if ray.is_miss() {
        return None;
    }
    let mut t = ray.t_near;
    for _ in 0..TRACE_MAX_STEPS {
        let p = ray.at(t);
        let (s, i) = scene.closest(p)?;
        if s.abs() < TRACE_EPS {
            return Some((p, i));
        }
        t += s;
        if t > ray.t_far {
            return None;
        }
    }
    None
}

/// Unlit albedo, z-depth, analytic normals and a binary mask per pose.
pub fn render_gt(scene: &SceneSpec, poses: &[CameraPose]) -> Vec<ImageBuffer> {
    poses.iter().map(|cam| render_view(scene, cam)).collect()
}

fn render_view(scene: &SceneSpec, cam: &CameraPose) -> ImageBuffer {
    let (w, h) = (cam.width(), cam.height());
    let mut img = ImageBuffer::background(w, h);
    let mut depth = img.depth.take().expect("background has depth");
    let mut normal = img.normal.take().expect("background has normals");
    for py in 0..h {
        for px in 0..w {
            let Some((p, i)) = trace(scene, cam, px, py) else { continue };
            let k = py * w + px;
            let prim = &scene.primitives[i];
            img.rgb[3 * k..3 * k + 3].copy_from_slice(&prim.albedo);
            img.mask[k] = 1.0;
            depth[k] = cam.z_depth(p);
            normal[3 * k..3 * k + 3].copy_from_slice(&prim.normal(p).to_array());
        }
    }
    img.depth = Some(depth);
    img.normal = Some(normal);
    img
}
