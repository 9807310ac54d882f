//! Wavefront OBJ with optional per-vertex colors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::Mesh;

/// `v` with 9 significant digits, as `%.9g` would print it.
pub(crate) fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(out, "v {} {} {}", fmt_sig(v.x), fmt_sig(v.y), fmt_sig(v.z));
        if let Some(c) = &mesh.colors {
            let _ = write!(out, " {} {} {}", fmt_sig(c[i][0]), fmt_sig(c[i][1]), fmt_sig(c[i][2]));
        }
        out.push('\n');
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            let _ = writeln!(out, "vn {} {} {}", fmt_sig(n.x), fmt_sig(n.y), fmt_sig(n.z));
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if mesh.normals.is_some() {
            let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(out, "f {a} {b} {c}");
        }
    }
    out
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// Parses `v`, `vn` and `f` records; polygons are fan-triangulated and
/// other records ignored. Normals are kept only when every face corner
/// references the normal of the same index as its vertex.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    let mut normals_aligned = true;
    let mut has_color: Option<bool> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let err = |msg: String| Error::parse(path, format!("line {}", ln + 1), msg);
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let nums = |it: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            it.map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number '{s}'"))))
                .collect()
        };
        match tag {
            "v" => {
                let v = nums(it)?;
                let colored = match v.len() {
                    3 | 4 => false,
                    6 => true,
                    n => return Err(err(format!("vertex with {n} values"))),
                };
                if *has_color.get_or_insert(colored) != colored {
                    return Err(err("vertex colors must be given for all vertices or none".into()));
                }
                if colored {
                    colors.push([v[3], v[4], v[5]]);
                }
                vertices.push(Vec3::new(v[0], v[1], v[2]));
            }
            "vn" => {
                let v = nums(it)?;
                if v.len() != 3 {
                    return Err(err(format!("normal with {} values", v.len())));
                }
                normals.push(Vec3::new(v[0], v[1], v[2]));
            }
            "f" => {
                let mut idx = Vec::new();
                for corner in it {
                    let mut parts = corner.split('/');
                    let resolve = |s: &str, count: usize| -> Result<usize> {
                        let i: i64 = s.parse().map_err(|_| err(format!("bad index '{s}'")))?;
                        let r = if i < 0 { count as i64 + i } else { i - 1 };
                        if r < 0 || r >= count as i64 {
                            return Err(err(format!("index {i} out of range")));
                        }
                        Ok(r as usize)
                    };
                    let v = resolve(parts.next().unwrap_or(""), vertices.len())?;
                    let _tex = parts.next();
                    match parts.next().filter(|s| !s.is_empty()) {
                        Some(n) => normals_aligned &= resolve(n, normals.len())? == v,
                        None => normals_aligned = false,
                    }
                    idx.push(v);
                }
                if idx.len() < 3 {
                    return Err(err(format!("face with {} corners", idx.len())));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = Mesh::new(vertices, triangles);
    if !colors.is_empty() {
        mesh.colors = Some(colors);
    }
    if !normals.is_empty() && normals_aligned && normals.len() == mesh.vertices.len() {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}
