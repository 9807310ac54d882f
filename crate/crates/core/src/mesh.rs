//! Indexed triangle meshes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Triangles below this area count as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            colors: None,
            normals: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized normal (twice the area vector).
    pub fn face_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(c - a)
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        self.face_cross(t).normalize()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_cross(t).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Checks index ranges and attribute lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if self.colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("per-vertex colors".into()));
        }
        if self.normals.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("per-vertex normals".into()));
        }
        Ok(())
    }

    /// `(min, max)` corners of the vertex bounding box.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_use(&self) -> HashMap<(usize, usize), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_use().values().all(|&c| c == 2)
    }

    /// Reverses every triangle's winding.
    pub fn flipped(&self) -> Mesh {
        let mut m = self.clone();
        for t in m.triangles.iter_mut() {
            t.swap(1, 2);
        }
        m
    }

    /// Removes triangles of area at most [`DEGENERATE_AREA`] and unused
    /// vertices. Returns the kept old-vertex index for each new vertex.
    pub fn drop_degenerate(&mut self) -> Vec<usize> {
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|t| self.triangle_area(t) > DEGENERATE_AREA)
            .collect();
        let mut tris: Vec<[usize; 3]> = self
            .triangles
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(t, _)| *t)
            .collect();
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut order = Vec::new();
        for t in tris.iter_mut() {
            for i in t.iter_mut() {
                if remap[*i] == usize::MAX {
                    remap[*i] = order.len();
                    order.push(*i);
                }
                *i = remap[*i];
            }
        }
        // Keep the original vertex order among survivors.
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let mut final_map = vec![usize::MAX; self.vertices.len()];
        for (new, &old) in sorted.iter().enumerate() {
            final_map[old] = new;
        }
        for t in tris.iter_mut() {
            for i in t.iter_mut() {
                *i = final_map[order[*i]];
            }
        }
        self.vertices = sorted.iter().map(|&i| self.vertices[i]).collect();
        if let Some(c) = self.colors.as_mut() {
            *c = sorted.iter().map(|&i| c[i]).collect();
        }
        if let Some(n) = self.normals.as_mut() {
            *n = sorted.iter().map(|&i| n[i]).collect();
        }
        self.triangles = tris;
        sorted
    }
}

/// Axis-aligned box `[lo, hi]` as a closed 12-triangle mesh, outward wound.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> Mesh {
    let v = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let tris = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh::new(v, tris)
}
