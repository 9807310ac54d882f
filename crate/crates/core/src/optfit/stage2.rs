//! Stage 2: the extracted mesh, rasterized against depth and normal
//! ground truth.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::flexigrid::{build_grid, extract_mesh, extract_on_tape, reg_alpha_beta_on_tape, GridNodes, Lattice, Topology};
use crate::mesh::Mesh;
use crate::raster::{rasterize_on_tape, shade_on_tape, shade_vertices};
use crate::triplane::{FieldVars, HeadKind, MlpCache, Points, TriplaneField, CELL_EDGES};

use super::{
    adam_step, cosine_lr, view_loss_on_tape, AdamParams, AdamState, FitConfig, LossTerms, PerceptualLoss,
    PixelLayout, TraceRecord, ViewSet,
};

/// Cached lattice SDF for narrow-band topology updates.
#[derive(Clone, Debug)]
pub struct Stage2State {
    pub lattice: Lattice,
    pub sdf: Vec<f64>,
    fresh: Vec<bool>,
    last: Option<Rc<Topology>>,
}

impl Stage2State {
    pub fn new(n: usize) -> Result<Self> {
        let lattice = Lattice::new(n)?;
        let nv = lattice.vertex_count();
        Ok(Self {
            lattice,
            sdf: vec![0.0; nv],
            fresh: vec![false; nv],
            last: None,
        })
    }

    fn eval(&mut self, field: &TriplaneField, verts: impl Iterator<Item = usize>) {
        let mut cache = MlpCache::default();
        let mut out = Vec::with_capacity(1);
        for v in verts {
            out.clear();
            field.query_heads(&[HeadKind::Sdf], self.lattice.point(v), &mut cache, &mut out);
            self.sdf[v] = out[0];
            self.fresh[v] = true;
        }
    }

    fn refresh_full(&mut self, field: &TriplaneField) -> Result<Rc<Topology>> {
        self.eval(field, 0..self.lattice.vertex_count());
        let topo = Rc::new(Topology::new(self.lattice, &self.sdf)?);
        self.last = Some(topo.clone());
        Ok(topo)
    }

    /// Surface topology for the current field. With `band = Some(b)` only
    /// vertices within `b` cells of the previous surface are re-evaluated,
    /// unless `full` is set or the new surface reaches a stale vertex.
    pub fn topology(&mut self, field: &TriplaneField, band: Option<usize>, full: bool) -> Result<Rc<Topology>> {
        let (Some(b), Some(last), false) = (band, self.last.clone(), full) else {
            return self.refresh_full(field);
        };
        self.fresh.iter_mut().for_each(|f| *f = false);
        let n = self.lattice.n;
        let mut band_verts = vec![false; self.lattice.vertex_count()];
        for &c in &last.cells {
            let [i, j, k] = self.lattice.cell_coords(c);
            let lo = |x: usize| x.saturating_sub(b);
            let hi = |x: usize| (x + 1 + b).min(n - 1);
            for z in lo(k)..=hi(k) {
                for y in lo(j)..=hi(j) {
                    for x in lo(i)..=hi(i) {
                        band_verts[self.lattice.vertex(x, y, z)] = true;
                    }
                }
            }
        }
        let list: Vec<usize> = (0..band_verts.len()).filter(|&v| band_verts[v]).collect();
        self.eval(field, list.into_iter());
        let topo = Topology::new(self.lattice, &self.sdf)?;
        if topo.active.iter().any(|&v| !self.fresh[v]) {
            return self.refresh_full(field);
        }
        let topo = Rc::new(topo);
        self.last = Some(topo.clone());
        Ok(topo)
    }
}

/// A recorded stage-2 loss.
pub struct Stage2Loss<'a> {
    pub tape: Tape<'a>,
    pub vars: FieldVars,
    pub loss: NodeId,
    pub terms: LossTerms,
    /// The shaded mesh that was rasterized.
    pub mesh: Mesh,
}

/// Records the stage-2 loss of `field` over `topo` at the `chosen` views.
/// `deformation_sample` lists off-surface lattice vertices standing in for
/// the rest of the lattice in the deformation penalty; `None` uses every
/// vertex.
pub fn stage2_loss_on_tape<'a>(
    field: &'a TriplaneField,
    topo: Rc<Topology>,
    views: &ViewSet,
    chosen: &[usize],
    config: &FitConfig,
    deformation_sample: Option<&[usize]>,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<Stage2Loss<'a>> {
    let lattice = topo.lattice;
    let mut tape = Tape::new();
    let vars = FieldVars::bind(&mut tape, field);

    let width = 1 + 3 + 1 + CELL_EDGES;
    let pts: Vec<_> = topo.active.iter().map(|&v| lattice.point(v)).collect();
    let na = pts.len();
    let q = field.query_on_tape(
        &mut tape,
        &vars,
        &[HeadKind::Sdf, HeadKind::Deformation, HeadKind::Weights],
        Points::Fixed(pts),
    );
    let sdf = tape.gather(q, (0..na).map(|i| width * i).collect());
    let delta = tape.gather(q, (0..na).flat_map(|i| (1..4).map(move |k| width * i + k)).collect());
    let alpha = tape.gather(q, (0..na).map(|i| width * i + 4).collect());
    let centers: Vec<_> = topo.cells.iter().map(|&c| lattice.cell_center(c)).collect();
    let nc = centers.len();
    let qc = field.query_on_tape(&mut tape, &vars, &[HeadKind::Weights], Points::Fixed(centers));
    let beta = tape.gather(qc, (0..nc).flat_map(|i| (1..=CELL_EDGES).map(move |k| (1 + CELL_EDGES) * i + k)).collect());

    let taped = extract_on_tape(&mut tape, topo.clone(), GridNodes { sdf, alpha, delta, beta });
    if taped.mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let colors = shade_on_tape(field, &mut tape, &vars, taped.positions);

    let mut losses = Vec::with_capacity(chosen.len() + 1);
    let mut terms = LossTerms::default();
    for &v in chosen {
        let cam = views.poses[v].with_size(config.stage2.render_size as u32, config.stage2.render_size as u32)?;
        let gt = &views.images[v];
        if gt.width != cam.width() || gt.height != cam.height() {
            return Err(Error::DimensionMismatch(format!(
                "stage 2 renders {0}x{0} but view {v} is {1}x{2}",
                config.stage2.render_size, gt.width, gt.height
            )));
        }
        let r = rasterize_on_tape(&mut tape, taped.positions, colors, &taped.mesh.triangles, &cam);
        let (l, t) = view_loss_on_tape(
            &mut tape,
            r.node,
            PixelLayout::RASTER,
            r.width,
            r.height,
            gt,
            &config.weights,
            true,
            perceptual,
        )?;
        losses.push(l);
        terms.add(&t);
    }

    // α/β terms over the surface plus the mean squared deformation.
    let nv = lattice.vertex_count() as f64;
    let ab = reg_alpha_beta_on_tape(&mut tape, topo.clone(), alpha, beta);
    let d_term = match deformation_sample {
        None => {
            let all = field.query_on_tape(&mut tape, &vars, &[HeadKind::Deformation], Points::Fixed(lattice.points()));
            let sq = tape.square(all);
            let s = tape.sum(sq);
            tape.scale(s, 1.0 / nv)
        }
        Some(sample) => {
            let sq = tape.square(delta);
            let on = tape.sum(sq);
            let on = tape.scale(on, 1.0 / nv);
            if sample.is_empty() {
                on
            } else {
                let pts = sample.iter().map(|&v| lattice.point(v)).collect();
                let d = field.query_on_tape(&mut tape, &vars, &[HeadKind::Deformation], Points::Fixed(pts));
                let sq = tape.square(d);
                let off = tape.sum(sq);
                let off = tape.scale(off, (nv - na as f64) / (sample.len() as f64 * nv));
                tape.add(on, off)
            }
        }
    };
    let reg = tape.add(ab, d_term);
    let reg = tape.scale(reg, config.weights.lambda_reg);
    terms.reg = tape.scalar(reg);
    losses.push(reg);
    let loss = tape.add_scalars(&losses);

    let mut mesh = taped.mesh;
    mesh.colors = Some(tape.value(colors).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
    Ok(Stage2Loss {
        tape,
        vars,
        loss,
        terms,
        mesh,
    })
}

/// Re-initializes the SDF from density at `config.tau`, refines the field
/// against rasterized depth, normals and colors, and returns the final
/// shaded mesh with the loss trace.
pub fn fit_stage2(
    field: &mut TriplaneField,
    views: &ViewSet,
    config: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(Mesh, Vec<TraceRecord>)> {
    config.check()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs at least one view".into()));
    }
    field.init_sdf_from_density(config.tau)?;
    let s2 = &config.stage2;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5354_4147_4532);
    let shapes: Vec<usize> = field.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut state = Stage2State::new(s2.grid)?;
    let mut trace = Vec::with_capacity(s2.steps);
    for step in 0..s2.steps {
        let lr = cosine_lr(step, s2.steps, s2.lr_start, s2.lr_end);
        let full = s2.band.is_none() || step % s2.refresh_every == 0;
        let topo = state.topology(field, s2.band, full)?;
        if topo.is_empty() {
            return Err(Error::IsoSurfaceVanished { step });
        }
        let k = config.n_supervision_views.min(views.len());
        let chosen = sample(&mut rng, views.len(), k).into_vec();
        let dsample = s2.deformation_samples.map(|m| {
            let mut on = vec![false; state.lattice.vertex_count()];
            topo.active.iter().for_each(|&v| on[v] = true);
            let off = on.len() - topo.active.len();
            let mut picks = Vec::with_capacity(m.min(off));
            while picks.len() < m.min(off) {
                let v = rng.random_range(0..on.len());
                if !on[v] {
                    picks.push(v);
                }
            }
            picks
        });
        let (terms, grads) = {
            let l = stage2_loss_on_tape(field, topo, views, &chosen, config, dsample.as_deref(), perceptual)
                .map_err(|e| match e {
                    Error::EmptyMesh => Error::IsoSurfaceVanished { step },
                    e => e,
                })?;
            if !l.terms.total().is_finite() {
                return Err(Error::NonFinite { what: "stage-2 loss", step });
            }
            let mut g = l.tape.backward(l.loss)?;
            (l.terms, l.vars.ids.iter().map(|&id| g.take(id)).collect::<Vec<_>>())
        };
        adam_step(&mut field.params_mut(), &grads, &mut adam, lr, &AdamParams::default()).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            e => e,
        })?;
        trace.push(TraceRecord { stage: 2, step, lr, terms });
    }
    let grid = build_grid(field, s2.grid)?;
    let mesh = extract_mesh(&grid)?;
    if mesh.is_empty() {
        return Err(Error::IsoSurfaceVanished { step: s2.steps });
    }
    Ok((shade_vertices(field, &mesh), trace))
}
