//! Dual iso-surface extraction with learnable edge weights, dual-vertex
//! weights and bounded lattice deformations.
//!
//! The lattice has `n` vertices per axis spanning `[-1, 1]`, so the cell size
//! is `h = 2 / (n - 1)`. Vertex `(i, j, k)` has index `i + n (j + n k)` and
//! cell `(i, j, k)` has index `i + (n - 1) (j + (n - 1) k)`. Inside means
//! `s < 0`.
//!
//! Within a cell, the edge along axis `a` at offsets `(o1, o2)` in the two
//! remaining axes (taken in increasing order) has local id `4 a + o1 + 2 o2`.

use std::rc::Rc;

use crate::autodiff::{GradSink, NodeId, Tape, Values};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::Mesh;
use crate::triplane::{HeadKind, MlpCache, TriplaneField, CELL_EDGES};

/// Lattice indexing helpers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub n: usize,
}

impl Lattice {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("grid resolution must be at least 2, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn vertex_count(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn cell_count(&self) -> usize {
        let m = self.n - 1;
        m * m * m
    }

    pub fn vertex(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    pub fn vertex_coords(&self, v: usize) -> [usize; 3] {
        [v % self.n, (v / self.n) % self.n, v / (self.n * self.n)]
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        let m = self.n - 1;
        i + m * (j + m * k)
    }

    pub fn cell_coords(&self, c: usize) -> [usize; 3] {
        let m = self.n - 1;
        [c % m, (c / m) % m, c / (m * m)]
    }

    /// Undeformed position of lattice vertex `v`.
    pub fn point(&self, v: usize) -> Vec3 {
        let h = self.cell_size();
        let [i, j, k] = self.vertex_coords(v);
        Vec3::new(-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h)
    }

    pub fn cell_center(&self, c: usize) -> Vec3 {
        let h = self.cell_size();
        let [i, j, k] = self.cell_coords(c);
        Vec3::new(
            -1.0 + (i as f64 + 0.5) * h,
            -1.0 + (j as f64 + 0.5) * h,
            -1.0 + (k as f64 + 0.5) * h,
        )
    }

    /// All lattice vertex positions in index order.
    pub fn points(&self) -> Vec<Vec3> {
        (0..self.vertex_count()).map(|v| self.point(v)).collect()
    }
}

/// The two axes other than `a`, in increasing order.
fn other_axes(a: usize) -> [usize; 2] {
    match a {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionGrid {
    pub lattice: Lattice,
    /// Per lattice vertex.
    pub sdf: Vec<f64>,
    /// Per lattice vertex, in cell units; each component in `(-1/2, 1/2)`.
    pub deformation: Vec<Vec3>,
    /// Per lattice vertex edge-interpolation weight.
    pub alpha: Vec<f64>,
    /// Per cell dual-vertex weights, indexed by local edge id.
    pub beta: Vec<[f64; CELL_EDGES]>,
}

impl ExtractionGrid {
    /// Given SDF values with neutral weights and no deformation.
    pub fn neutral(n: usize, sdf: Vec<f64>) -> Result<Self> {
        let lattice = Lattice::new(n)?;
        if sdf.len() != lattice.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} sdf values for a {n}^3 lattice",
                sdf.len()
            )));
        }
        Ok(Self {
            lattice,
            deformation: vec![Vec3::ZERO; sdf.len()],
            alpha: vec![1.0; sdf.len()],
            beta: vec![[1.0; CELL_EDGES]; lattice.cell_count()],
            sdf,
        })
    }

    /// Neutral grid sampling `f` at the lattice vertices.
    pub fn from_sdf_fn(n: usize, f: impl Fn(Vec3) -> f64) -> Result<Self> {
        let lattice = Lattice::new(n)?;
        let sdf = (0..lattice.vertex_count()).map(|v| f(lattice.point(v))).collect();
        Self::neutral(n, sdf)
    }

    pub fn n(&self) -> usize {
        self.lattice.n
    }

    pub fn cell_size(&self) -> f64 {
        self.lattice.cell_size()
    }

    /// Deformed position of lattice vertex `v`.
    pub fn position(&self, v: usize) -> Vec3 {
        self.lattice.point(v) + self.deformation[v] * self.cell_size()
    }

    pub fn check(&self) -> Result<()> {
        let nv = self.lattice.vertex_count();
        if self.sdf.len() != nv
            || self.deformation.len() != nv
            || self.alpha.len() != nv
            || self.beta.len() != self.lattice.cell_count()
        {
            return Err(Error::DimensionMismatch("extraction grid arrays".into()));
        }
        Ok(())
    }
}

/// Queries every grid quantity from the field's SDF, deformation and
/// weights heads. Weight slot 0 is α at lattice vertices; slots `1..=12`
/// are β at cell centers.
pub fn build_grid(field: &TriplaneField, n: usize) -> Result<ExtractionGrid> {
    let lattice = Lattice::new(n)?;
    let nv = lattice.vertex_count();
    let mut sdf = Vec::with_capacity(nv);
    let mut deformation = Vec::with_capacity(nv);
    let mut alpha = Vec::with_capacity(nv);
    let mut cache = MlpCache::default();
    let mut out = Vec::new();
    let heads = [HeadKind::Sdf, HeadKind::Deformation, HeadKind::Weights];
    for v in 0..nv {
        out.clear();
        field.query_heads(&heads, lattice.point(v), &mut cache, &mut out);
        sdf.push(out[0]);
        deformation.push(Vec3::new(out[1], out[2], out[3]));
        alpha.push(out[4]);
    }
    let mut beta = Vec::with_capacity(lattice.cell_count());
    for c in 0..lattice.cell_count() {
        out.clear();
        field.query_heads(&[HeadKind::Weights], lattice.cell_center(c), &mut cache, &mut out);
        let mut b = [0.0; CELL_EDGES];
        b.copy_from_slice(&out[1..=CELL_EDGES]);
        beta.push(b);
    }
    Ok(ExtractionGrid {
        lattice,
        sdf,
        deformation,
        alpha,
        beta,
    })
}

/// Sign-crossing structure of a lattice: which vertices, edges and cells
/// take part in the surface, and how dual vertices connect.
#[derive(Clone, Debug)]
pub struct Topology {
    pub lattice: Lattice,
    /// Lattice vertices that end a crossing edge, ascending.
    pub active: Vec<usize>,
    /// Crossing edges as `(low, high)` slots into `active`.
    pub edges: Vec<[usize; 2]>,
    /// Cells with at least one crossing edge, ascending.
    pub cells: Vec<usize>,
    /// Per surface cell, `(local edge id, edge index)` of its crossing edges.
    pub cell_edges: Vec<Vec<(usize, usize)>>,
    /// Triangles over surface-cell slots, two per crossing-edge quad, wound
    /// so the normal points toward positive SDF.
    pub triangles: Vec<[usize; 3]>,
}

impl Topology {
    /// Builds the topology from SDF values at every lattice vertex.
    pub fn new(lattice: Lattice, sdf: &[f64]) -> Result<Self> {
        if sdf.len() != lattice.vertex_count() {
            return Err(Error::DimensionMismatch("sdf values vs lattice".into()));
        }
        let n = lattice.n;
        let m = n - 1;
        let inside = |v: usize| sdf[v] < 0.0;
        // Crossing edges in (vertex, axis) order.
        let mut raw_edges: Vec<(usize, usize)> = Vec::new();
        for v in 0..lattice.vertex_count() {
            let c = lattice.vertex_coords(v);
            for a in 0..3 {
                if c[a] + 1 >= n {
                    continue;
                }
                let mut d = c;
                d[a] += 1;
                let w = lattice.vertex(d[0], d[1], d[2]);
                if inside(v) != inside(w) {
                    raw_edges.push((v, a));
                }
            }
        }
        let mut slot = vec![usize::MAX; lattice.vertex_count()];
        let mut cell_slot = vec![usize::MAX; lattice.cell_count()];
        let mut active = Vec::new();
        let mut cells = Vec::new();
        // Mark active vertices and surface cells first so slots ascend.
        let mut is_active = vec![false; lattice.vertex_count()];
        let mut is_cell = vec![false; lattice.cell_count()];
        for &(v, a) in &raw_edges {
            let c = lattice.vertex_coords(v);
            let mut d = c;
            d[a] += 1;
            is_active[v] = true;
            is_active[lattice.vertex(d[0], d[1], d[2])] = true;
            for_adjacent_cells(c, a, m, |cc, _| is_cell[lattice.cell(cc[0], cc[1], cc[2])] = true);
        }
        for (v, &on) in is_active.iter().enumerate() {
            if on {
                slot[v] = active.len();
                active.push(v);
            }
        }
        for (c, &on) in is_cell.iter().enumerate() {
            if on {
                cell_slot[c] = cells.len();
                cells.push(c);
            }
        }
        let mut edges = Vec::with_capacity(raw_edges.len());
        let mut cell_edges = vec![Vec::new(); cells.len()];
        let mut triangles = Vec::new();
        for (e, &(v, a)) in raw_edges.iter().enumerate() {
            let c = lattice.vertex_coords(v);
            let mut d = c;
            d[a] += 1;
            let w = lattice.vertex(d[0], d[1], d[2]);
            edges.push([slot[v], slot[w]]);
            let [u1, u2] = other_axes(a);
            for_adjacent_cells(c, a, m, |cc, _| {
                let local = 4 * a + (c[u1] - cc[u1]) + 2 * (c[u2] - cc[u2]);
                cell_edges[cell_slot[lattice.cell(cc[0], cc[1], cc[2])]].push((local, e));
            });
            // Quad around the edge, cyclic in the right-handed axes (b, c).
            let b = (a + 1) % 3;
            let cax = (a + 2) % 3;
            if c[b] == 0 || c[cax] == 0 || c[b] >= m || c[cax] >= m {
                continue;
            }
            let at = |db: usize, dc: usize| {
                let mut cc = c;
                cc[b] = c[b] - 1 + db;
                cc[cax] = c[cax] - 1 + dc;
                cell_slot[lattice.cell(cc[0], cc[1], cc[2])]
            };
            let q = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            // Both windings split along the (q0, q2) diagonal.
            if inside(v) {
                triangles.push([q[0], q[1], q[2]]);
                triangles.push([q[0], q[2], q[3]]);
            } else {
                triangles.push([q[0], q[2], q[1]]);
                triangles.push([q[0], q[3], q[2]]);
            }
        }
        Ok(Self {
            lattice,
            active,
            edges,
            cells,
            cell_edges,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Crossing points and dual vertices from per-active-vertex values and
    /// per-surface-cell β.
    pub fn dual_vertices(&self, vals: &ActiveValues<'_>) -> (Vec<Vec3>, Vec<Vec3>) {
        let h = self.lattice.cell_size();
        let pos = |s: usize| {
            let v = self.active[s];
            let d = &vals.delta[3 * s..3 * s + 3];
            self.lattice.point(v) + Vec3::new(d[0], d[1], d[2]) * h
        };
        let crossings: Vec<Vec3> = self
            .edges
            .iter()
            .map(|&[a, b]| {
                let (sa, sb) = (vals.sdf[a], vals.sdf[b]);
                let (aa, ab) = (vals.alpha[a], vals.alpha[b]);
                let den = aa * sb - ab * sa;
                (pos(a) * (aa * sb) - pos(b) * (ab * sa)) / den
            })
            .collect();
        let duals = self
            .cell_edges
            .iter()
            .enumerate()
            .map(|(c, list)| {
                let beta = &vals.beta[CELL_EDGES * c..CELL_EDGES * (c + 1)];
                let mut acc = Vec3::ZERO;
                let mut wsum = 0.0;
                for &(l, e) in list {
                    acc += crossings[e] * beta[l];
                    wsum += beta[l];
                }
                acc / wsum
            })
            .collect();
        (crossings, duals)
    }

    /// Mesh over dual vertices with degenerate triangles removed. Also
    /// returns the surface-cell slot of every mesh vertex.
    pub fn mesh(&self, duals: &[Vec3]) -> (Mesh, Vec<usize>) {
        let mut mesh = Mesh::new(duals.to_vec(), self.triangles.clone());
        let kept = mesh.drop_degenerate();
        (mesh, kept)
    }

    /// Adjoint of [`Topology::dual_vertices`]: `gdual` holds one 3-vector per
    /// surface cell; results are added into `grads`.
    pub fn dual_vertices_vjp(&self, vals: &ActiveValues<'_>, gdual: &[f64], grads: &mut ActiveGrads<'_>) {
        let h = self.lattice.cell_size();
        let (crossings, duals) = self.dual_vertices(vals);
        let mut gu = vec![Vec3::ZERO; self.edges.len()];
        for (c, list) in self.cell_edges.iter().enumerate() {
            let g = Vec3::new(gdual[3 * c], gdual[3 * c + 1], gdual[3 * c + 2]);
            if g == Vec3::ZERO {
                continue;
            }
            let beta = &vals.beta[CELL_EDGES * c..CELL_EDGES * (c + 1)];
            let wsum: f64 = list.iter().map(|&(l, _)| beta[l]).sum();
            for &(l, e) in list {
                gu[e] += g * (beta[l] / wsum);
                if let Some(gb) = grads.beta.as_deref_mut() {
                    gb[CELL_EDGES * c + l] += g.dot(crossings[e] - duals[c]) / wsum;
                }
            }
        }
        let pos = |s: usize| {
            let v = self.active[s];
            let d = &vals.delta[3 * s..3 * s + 3];
            self.lattice.point(v) + Vec3::new(d[0], d[1], d[2]) * h
        };
        for (e, &[a, b]) in self.edges.iter().enumerate() {
            let g = gu[e];
            if g == Vec3::ZERO {
                continue;
            }
            let (sa, sb) = (vals.sdf[a], vals.sdf[b]);
            let (aa, ab) = (vals.alpha[a], vals.alpha[b]);
            let den = aa * sb - ab * sa;
            let u = crossings[e];
            let (pa, pb) = (pos(a), pos(b));
            if let Some(gs) = grads.sdf.as_deref_mut() {
                gs[a] += g.dot(u - pb) * ab / den;
                gs[b] += g.dot(pa - u) * aa / den;
            }
            if let Some(ga) = grads.alpha.as_deref_mut() {
                ga[a] += g.dot(pa - u) * sb / den;
                ga[b] += g.dot(u - pb) * sa / den;
            }
            if let Some(gd) = grads.delta.as_deref_mut() {
                let ka = h * aa * sb / den;
                let kb = -h * ab * sa / den;
                for k in 0..3 {
                    gd[3 * a + k] += g[k] * ka;
                    gd[3 * b + k] += g[k] * kb;
                }
            }
        }
    }

    /// α and β parts of the regularizer: mean over crossing edges of
    /// `(α_a - 1)² + (α_b - 1)²` plus mean over surface cells of the sum of
    /// `(β_e - 1)²` over the cell's crossing edges.
    pub fn reg_alpha_beta(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let ea: f64 = self
            .edges
            .iter()
            .map(|&[a, b]| (alpha[a] - 1.0).powi(2) + (alpha[b] - 1.0).powi(2))
            .sum::<f64>()
            / self.edges.len() as f64;
        let cb: f64 = self
            .cell_edges
            .iter()
            .enumerate()
            .map(|(c, list)| {
                list.iter()
                    .map(|&(l, _)| (beta[CELL_EDGES * c + l] - 1.0).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / self.cells.len() as f64;
        ea + cb
    }

    fn reg_alpha_beta_vjp(&self, g: f64, alpha: &[f64], beta: &[f64], ga: Option<&mut [f64]>, gb: Option<&mut [f64]>) {
        if self.edges.is_empty() {
            return;
        }
        if let Some(ga) = ga {
            let k = 2.0 * g / self.edges.len() as f64;
            for &[a, b] in &self.edges {
                ga[a] += k * (alpha[a] - 1.0);
                ga[b] += k * (alpha[b] - 1.0);
            }
        }
        if let Some(gb) = gb {
            let k = 2.0 * g / self.cells.len() as f64;
            for (c, list) in self.cell_edges.iter().enumerate() {
                for &(l, _) in list {
                    let i = CELL_EDGES * c + l;
                    gb[i] += k * (beta[i] - 1.0);
                }
            }
        }
    }
}

/// Calls `f(cell_coords, index)` for each of the up to four cells sharing
/// the lattice edge from vertex `c` along axis `a`.
fn for_adjacent_cells(c: [usize; 3], a: usize, m: usize, mut f: impl FnMut([usize; 3], usize)) {
    if c[a] >= m {
        return;
    }
    let [u1, u2] = other_axes(a);
    for (k, (d1, d2)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        if c[u1] < d1 || c[u2] < d2 {
            continue;
        }
        let mut cc = c;
        cc[u1] -= d1;
        cc[u2] -= d2;
        if cc[u1] >= m || cc[u2] >= m {
            continue;
        }
        f(cc, k);
    }
}

/// Values gathered for a [`Topology`]: `sdf`, `alpha` per active vertex,
/// `delta` three per active vertex, `beta` twelve per surface cell.
#[derive(Clone, Copy, Debug)]
pub struct ActiveValues<'v> {
    pub sdf: &'v [f64],
    pub alpha: &'v [f64],
    pub delta: &'v [f64],
    pub beta: &'v [f64],
}

/// Adjoint buffers matching [`ActiveValues`]; `None` skips a quantity.
#[derive(Debug, Default)]
pub struct ActiveGrads<'g> {
    pub sdf: Option<&'g mut [f64]>,
    pub alpha: Option<&'g mut [f64]>,
    pub delta: Option<&'g mut [f64]>,
    pub beta: Option<&'g mut [f64]>,
}

/// Owned per-topology values gathered from a grid.
#[derive(Clone, Debug)]
pub struct GatheredValues {
    pub sdf: Vec<f64>,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GatheredValues {
    pub fn from_grid(topo: &Topology, grid: &ExtractionGrid) -> Self {
        Self {
            sdf: topo.active.iter().map(|&v| grid.sdf[v]).collect(),
            alpha: topo.active.iter().map(|&v| grid.alpha[v]).collect(),
            delta: topo
                .active
                .iter()
                .flat_map(|&v| grid.deformation[v].to_array())
                .collect(),
            beta: topo.cells.iter().flat_map(|&c| grid.beta[c]).collect(),
        }
    }

    pub fn view(&self) -> ActiveValues<'_> {
        ActiveValues {
            sdf: &self.sdf,
            alpha: &self.alpha,
            delta: &self.delta,
            beta: &self.beta,
        }
    }
}

/// Extracts the iso-surface `s = 0`. An all-inside or all-outside grid gives
/// an empty mesh.
pub fn extract_mesh(grid: &ExtractionGrid) -> Result<Mesh> {
    grid.check()?;
    let topo = Topology::new(grid.lattice, &grid.sdf)?;
    let vals = GatheredValues::from_grid(&topo, grid);
    let (_, duals) = topo.dual_vertices(&vals.view());
    Ok(topo.mesh(&duals).0)
}

/// Regularizer: α and β terms over the surface plus the mean of `‖δ‖²` over
/// every lattice vertex. Zero at the neutral grid.
pub fn reg_loss(grid: &ExtractionGrid) -> Result<f64> {
    grid.check()?;
    let topo = Topology::new(grid.lattice, &grid.sdf)?;
    let vals = GatheredValues::from_grid(&topo, grid);
    let d = grid.deformation.iter().map(|d| d.norm_squared()).sum::<f64>() / grid.deformation.len() as f64;
    Ok(topo.reg_alpha_beta(&vals.alpha, &vals.beta) + d)
}

/// Tape nodes feeding an extraction, laid out as in [`ActiveValues`].
#[derive(Clone, Copy, Debug)]
pub struct GridNodes {
    pub sdf: NodeId,
    pub alpha: NodeId,
    pub delta: NodeId,
    pub beta: NodeId,
}

/// Result of a recorded extraction.
#[derive(Clone, Debug)]
pub struct TapedMesh {
    /// Three coordinates per mesh vertex.
    pub positions: NodeId,
    pub mesh: Mesh,
}

/// Records the extraction; the output node holds the kept dual vertices.
pub fn extract_on_tape(tape: &mut Tape<'_>, topo: Rc<Topology>, nodes: GridNodes) -> TapedMesh {
    let vals = ActiveValues {
        sdf: tape.value(nodes.sdf),
        alpha: tape.value(nodes.alpha),
        delta: tape.value(nodes.delta),
        beta: tape.value(nodes.beta),
    };
    let (_, duals) = topo.dual_vertices(&vals);
    let (mesh, kept) = topo.mesh(&duals);
    let value: Vec<f64> = mesh.vertices.iter().flat_map(|v| v.to_array()).collect();
    let n_cells = topo.cells.len();
    let parents = [nodes.sdf, nodes.alpha, nodes.delta, nodes.beta];
    let positions = tape.custom(&parents, value, move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
        let mut gdual = vec![0.0; 3 * n_cells];
        for (k, &c) in kept.iter().enumerate() {
            gdual[3 * c..3 * c + 3].copy_from_slice(&g[3 * k..3 * k + 3]);
        }
        let v = ActiveValues {
            sdf: vals.get(nodes.sdf),
            alpha: vals.get(nodes.alpha),
            delta: vals.get(nodes.delta),
            beta: vals.get(nodes.beta),
        };
        let mut bufs: Vec<Option<Vec<f64>>> = parents.iter().map(|&p| sink.take(p)).collect();
        {
            let [s, a, d, b] = &mut bufs[..] else { unreachable!() };
            let mut grads = ActiveGrads {
                sdf: s.as_deref_mut(),
                alpha: a.as_deref_mut(),
                delta: d.as_deref_mut(),
                beta: b.as_deref_mut(),
            };
            topo.dual_vertices_vjp(&v, &gdual, &mut grads);
        }
        for (p, b) in parents.iter().zip(bufs) {
            if let Some(b) = b {
                sink.put(*p, b);
            }
        }
    });
    TapedMesh { positions, mesh }
}

/// Records the α and β regularizer terms as a scalar node.
pub fn reg_alpha_beta_on_tape(tape: &mut Tape<'_>, topo: Rc<Topology>, alpha: NodeId, beta: NodeId) -> NodeId {
    let value = topo.reg_alpha_beta(tape.value(alpha), tape.value(beta));
    tape.custom(&[alpha, beta], vec![value], move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
        let ga = sink.take(alpha);
        let gb = sink.take(beta);
        let (mut ga, mut gb) = (ga, gb);
        topo.reg_alpha_beta_vjp(g[0], vals.get(alpha), vals.get(beta), ga.as_deref_mut(), gb.as_deref_mut());
        if let Some(ga) = ga {
            sink.put(alpha, ga);
        }
        if let Some(gb) = gb {
            sink.put(beta, gb);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::TriplaneConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(r: f64) -> impl Fn(Vec3) -> f64 {
        move |p: Vec3| p.norm() - r
    }

    #[test]
    fn two_point_lattice_has_one_cell() {
        let mut field = TriplaneField::new(&TriplaneConfig::tiny(), 1).unwrap();
        field.zero_head_output(HeadKind::Deformation);
        let g = build_grid(&field, 2).unwrap();
        assert_eq!(g.sdf.len(), 8);
        assert_eq!(g.beta.len(), 1);
        assert!(g.deformation.iter().all(|d| *d == Vec3::ZERO));
        assert!(g.alpha.iter().all(|&a| (a - 1.0).abs() < 1e-12));
        assert!(g.beta[0].iter().all(|&b| (b - 1.0).abs() < 1e-12));
        assert!(build_grid(&field, 1).is_err());
    }

    #[test]
    fn injected_sdf_is_stored_verbatim() {
        let g = ExtractionGrid::from_sdf_fn(5, |p| p.z - 0.25).unwrap();
        for v in 0..g.sdf.len() {
            assert_eq!(g.sdf[v], g.lattice.point(v).z - 0.25);
        }
    }

    #[test]
    fn plane_is_reproduced_exactly() {
        let g = ExtractionGrid::from_sdf_fn(8, |p| p.z - 0.25).unwrap();
        let m = extract_mesh(&g).unwrap();
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((v.z - 0.25).abs() <= 1e-9);
        }
        for t in 0..m.triangles.len() {
            assert!(m.face_normal(t).z > 0.99);
        }
    }

    #[test]
    fn uniform_sign_gives_empty_mesh() {
        let g = ExtractionGrid::from_sdf_fn(6, |_| 0.3).unwrap();
        assert!(extract_mesh(&g).unwrap().is_empty());
        let g = ExtractionGrid::from_sdf_fn(6, |_| -0.3).unwrap();
        assert!(extract_mesh(&g).unwrap().is_empty());
    }

    #[test]
    fn sphere_is_accurate_closed_and_outward() {
        let g = ExtractionGrid::from_sdf_fn(32, sphere(0.6)).unwrap();
        let m = extract_mesh(&g).unwrap();
        let worst = m.vertices.iter().map(|v| (v.norm() - 0.6).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.01, "radial deviation {worst}");
        assert!(m.is_watertight());
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.corners(t);
            assert!(m.face_normal(t).dot(a + b + c) > 0.0);
        }
        let neg = ExtractionGrid::from_sdf_fn(32, |p| 0.6 - p.norm()).unwrap();
        let mn = extract_mesh(&neg).unwrap();
        assert_eq!(mn.vertices, m.vertices);
        assert_eq!(mn.triangles, m.flipped().triangles);
    }

    #[test]
    fn regularizer_examples() {
        let g = ExtractionGrid::from_sdf_fn(6, sphere(0.5)).unwrap();
        assert_eq!(reg_loss(&g).unwrap(), 0.0);
        let mut g = ExtractionGrid::from_sdf_fn(2, |_| 1.0).unwrap();
        g.deformation[3] = Vec3::new(0.1, 0.0, 0.0);
        assert!((reg_loss(&g).unwrap() - 0.01 / 8.0).abs() < 1e-15);
    }

    fn randomized_grid(n: usize, seed: u64) -> ExtractionGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ExtractionGrid::from_sdf_fn(n, |p| (p - Vec3::new(0.05, -0.03, 0.02)).norm() - 0.55).unwrap();
        for d in g.deformation.iter_mut() {
            *d = Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
        }
        for a in g.alpha.iter_mut() {
            *a = rng.random_range(0.5..1.5);
        }
        for b in g.beta.iter_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
        g
    }

    #[test]
    fn regularizer_descends_along_negative_gradient() {
        let g = randomized_grid(8, 3);
        let topo = Rc::new(Topology::new(g.lattice, &g.sdf).unwrap());
        let vals = GatheredValues::from_grid(&topo, &g);
        let mut tape = Tape::new();
        let a = tape.leaf(vals.alpha.clone());
        let b = tape.leaf(vals.beta.clone());
        let r = reg_alpha_beta_on_tape(&mut tape, topo.clone(), a, b);
        let grads = tape.backward(r).unwrap();
        let (ga, gb) = (grads.get(a), grads.get(b));
        let step = 0.05;
        let mut g2 = g.clone();
        for (s, &v) in topo.active.iter().enumerate() {
            g2.alpha[v] -= step * ga[s];
        }
        for (s, &c) in topo.cells.iter().enumerate() {
            for l in 0..CELL_EDGES {
                g2.beta[c][l] -= step * gb[CELL_EDGES * s + l];
            }
        }
        let nv = g.deformation.len() as f64;
        for d in g2.deformation.iter_mut() {
            *d = *d - *d * (step * 2.0 / nv);
        }
        assert!(reg_loss(&g2).unwrap() < reg_loss(&g).unwrap());
    }

    fn entry(v: &mut GatheredValues, which: usize, k: usize) -> &mut f64 {
        match which {
            0 => &mut v.sdf[k],
            1 => &mut v.alpha[k],
            2 => &mut v.delta[k],
            _ => &mut v.beta[k],
        }
    }

    #[test]
    fn vertex_gradients_match_finite_differences() {
        let g = randomized_grid(10, 5);
        let topo = Rc::new(Topology::new(g.lattice, &g.sdf).unwrap());
        let vals = GatheredValues::from_grid(&topo, &g);
        let mut tape = Tape::new();
        let nodes = GridNodes {
            sdf: tape.leaf(vals.sdf.clone()),
            alpha: tape.leaf(vals.alpha.clone()),
            delta: tape.leaf(vals.delta.clone()),
            beta: tape.leaf(vals.beta.clone()),
        };
        let tm = extract_on_tape(&mut tape, topo.clone(), nodes);
        let nvert = tm.mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            // One random vertex coordinate as the objective.
            let target = rng.random_range(0..3 * nvert);
            let mut sel = vec![0.0; 3 * nvert];
            sel[target] = 1.0;
            let mut t2 = Tape::new();
            let nodes2 = GridNodes {
                sdf: t2.leaf(vals.sdf.clone()),
                alpha: t2.leaf(vals.alpha.clone()),
                delta: t2.leaf(vals.delta.clone()),
                beta: t2.leaf(vals.beta.clone()),
            };
            let tm2 = extract_on_tape(&mut t2, topo.clone(), nodes2);
            let w = t2.constant(sel);
            let p = t2.mul(tm2.positions, w);
            let l = t2.sum(p);
            let grads = t2.backward(l).unwrap();
            let eval = |v: &GatheredValues| {
                let (_, duals) = topo.dual_vertices(&v.view());
                topo.mesh(&duals).0.vertices[target / 3][target % 3]
            };
            for which in 0..4 {
                let (node, len) = match which {
                    0 => (nodes2.sdf, vals.sdf.len()),
                    1 => (nodes2.alpha, vals.alpha.len()),
                    2 => (nodes2.delta, vals.delta.len()),
                    _ => (nodes2.beta, vals.beta.len()),
                };
                let gt = grads.get(node);
                // Largest-magnitude entry, where the derivative is informative.
                let k = (0..len).max_by(|&a, &b| gt[a].abs().total_cmp(&gt[b].abs())).unwrap();
                let base = match which {
                    0 => vals.sdf[k],
                    1 => vals.alpha[k],
                    2 => vals.delta[k],
                    _ => vals.beta[k],
                };
                let h = 1e-6 * base.abs() + 1e-9;
                let mut plus = vals.clone();
                let mut minus = vals.clone();
                *entry(&mut plus, which, k) += h;
                *entry(&mut minus, which, k) -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let rel = (fd - gt[k]).abs() / fd.abs().max(1e-12);
                assert!(rel <= 1e-3, "quantity {which} entry {k}: fd {fd} vs {}", gt[k]);
            }
        }
        assert_eq!(tape.value(tm.positions).len(), 3 * nvert);
    }

    #[test]
    fn vertices_stay_near_their_cells() {
        let g = randomized_grid(9, 11);
        let topo = Topology::new(g.lattice, &g.sdf).unwrap();
        let vals = GatheredValues::from_grid(&topo, &g);
        let (_, duals) = topo.dual_vertices(&vals.view());
        let h = g.cell_size();
        for (slot, v) in duals.iter().enumerate() {
            let lo = g.lattice.cell_center(topo.cells[slot]) - Vec3::splat(h);
            let hi = lo + Vec3::splat(2.0 * h);
            for a in 0..3 {
                assert!(v[a] >= lo[a] - 1e-12 && v[a] <= hi[a] + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sign_flip_reverses_windings(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sdf: Vec<f64> = (0..216).map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if v == 0.0 { 0.5 } else { v }
            }).collect();
            let g = ExtractionGrid::neutral(6, sdf.clone()).unwrap();
            let f = ExtractionGrid::neutral(6, sdf.iter().map(|s| -s).collect()).unwrap();
            let (a, b) = (extract_mesh(&g).unwrap(), extract_mesh(&f).unwrap());
            prop_assert_eq!(&a.vertices, &b.vertices);
            prop_assert_eq!(a.flipped().triangles, b.triangles);
        }

        #[test]
        fn constant_alpha_is_linear_interpolation(seed in any::<u64>(), alpha in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sdf: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = ExtractionGrid::neutral(4, sdf).unwrap();
            g.alpha.iter_mut().for_each(|a| *a = alpha);
            let topo = Topology::new(g.lattice, &g.sdf).unwrap();
            let vals = GatheredValues::from_grid(&topo, &g);
            let (cross, _) = topo.dual_vertices(&vals.view());
            for (e, &[a, b]) in topo.edges.iter().enumerate() {
                let (va, vb) = (topo.active[a], topo.active[b]);
                let (sa, sb) = (g.sdf[va], g.sdf[vb]);
                let t = sa / (sa - sb);
                let lin = g.lattice.point(va) + (g.lattice.point(vb) - g.lattice.point(va)) * t;
                prop_assert!((cross[e] - lin).norm() < 1e-12);
            }
        }
    }
}
