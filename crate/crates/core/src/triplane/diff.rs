//! Recording field queries on the tensor tape.

use crate::autodiff::{GradSink, NodeId, Tape, Values};
use crate::geom::Vec3;

use super::mlp::MlpCache;
use super::{activate_grad, Footprint, HeadKind, TriplaneField, PLANE_AXES};

/// Gradient accumulators of every field parameter, in checkpoint order.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub ids: Vec<NodeId>,
    /// First id of each head's layers.
    head_offset: [usize; 5],
}

impl FieldVars {
    pub fn bind(tape: &mut Tape<'_>, field: &TriplaneField) -> Self {
        let ids: Vec<NodeId> = field.params().iter().map(|p| tape.grad_leaf(p.len())).collect();
        let mut head_offset = [0; 5];
        let mut off = 3;
        for (h, head) in field.heads.iter().enumerate() {
            head_offset[h] = off;
            off += 2 * head.layers.len();
        }
        Self { ids, head_offset }
    }

    pub fn plane(&self, p: usize) -> NodeId {
        self.ids[p]
    }

    /// `(weight, bias)` accumulators of layer `l` of `head`.
    pub fn layer(&self, head: HeadKind, l: usize) -> (NodeId, NodeId) {
        let o = self.head_offset[head.index()] + 2 * l;
        (self.ids[o], self.ids[o + 1])
    }
}

/// Query locations: fixed, or produced by an earlier tape node (`3n` values).
#[derive(Clone, Debug)]
pub enum Points {
    Fixed(Vec<Vec3>),
    Node(NodeId),
}

impl Points {
    fn resolve(&self, tape: &Tape<'_>) -> Vec<Vec3> {
        match self {
            Points::Fixed(p) => p.clone(),
            Points::Node(id) => tape
                .value(*id)
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        }
    }
}

impl TriplaneField {
    /// Activated outputs of `heads` at every point, concatenated per point.
    /// The backward pass recomputes the forward per point, so only the
    /// outputs are stored.
    pub fn query_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        vars: &FieldVars,
        heads: &[HeadKind],
        points: Points,
    ) -> NodeId {
        let pts = points.resolve(tape);
        let width: usize = heads.iter().map(|h| h.out_dim()).sum();
        let mut value = Vec::with_capacity(pts.len() * width);
        let mut cache = MlpCache::default();
        for &x in &pts {
            self.query_heads(heads, x, &mut cache, &mut value);
        }

        let mut parents: Vec<NodeId> = vars.ids[..3].to_vec();
        let mut layer_ids: Vec<Vec<(NodeId, NodeId)>> = Vec::new();
        for &h in heads {
            let ids: Vec<(NodeId, NodeId)> = (0..self.head(h).layers.len())
                .map(|l| vars.layer(h, l))
                .collect();
            for &(w, b) in &ids {
                parents.push(w);
                parents.push(b);
            }
            layer_ids.push(ids);
        }
        let point_node = match points {
            Points::Node(id) => {
                parents.push(id);
                Some(id)
            }
            Points::Fixed(_) => None,
        };
        let planes = [vars.ids[0], vars.ids[1], vars.ids[2]];
        let heads = heads.to_vec();

        tape.custom(&parents, value, move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            self.query_backward(&pts, &heads, width, g, planes, &layer_ids, point_node, sink);
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn query_backward(
        &self,
        pts: &[Vec3],
        heads: &[HeadKind],
        width: usize,
        grad_out: &[f64],
        planes: [NodeId; 3],
        layer_ids: &[Vec<(NodeId, NodeId)>],
        point_node: Option<NodeId>,
        sink: &mut GradSink<'_>,
    ) {
        let c = self.channels;
        let mut plane_g: Vec<Option<Vec<f64>>> = planes.iter().map(|&p| sink.take(p)).collect();
        let mut layer_g: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>> = layer_ids
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|&(w, b)| match (sink.take(w), sink.take(b)) {
                        (Some(gw), Some(gb)) => Some((gw, gb)),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        let mut point_g = point_node.and_then(|id| sink.take(id));

        let mut cache = MlpCache::default();
        let mut feat = vec![0.0; c];
        let mut gfeat = vec![0.0; c];
        let mut graw = Vec::new();
        // Scratch for heads whose parameter grads are not requested.
        let mut scratch: Vec<Vec<(Vec<f64>, Vec<f64>)>> = heads
            .iter()
            .map(|&h| {
                self.head(h)
                    .layers
                    .iter()
                    .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                    .collect()
            })
            .collect();

        {
            let mut views: Vec<Vec<(&mut [f64], &mut [f64])>> = layer_g
                .iter_mut()
                .zip(scratch.iter_mut())
                .map(|(real, scr)| {
                    real.iter_mut()
                        .zip(scr.iter_mut())
                        .map(|(r, s)| match r {
                            Some((w, b)) => (w.as_mut_slice(), b.as_mut_slice()),
                            None => (s.0.as_mut_slice(), s.1.as_mut_slice()),
                        })
                        .collect()
                })
                .collect();
            for (i, &x) in pts.iter().enumerate() {
                let go = &grad_out[i * width..(i + 1) * width];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let fp = self.footprint(x);
                self.feature_from(&fp, &mut feat);
                gfeat.iter_mut().for_each(|v| *v = 0.0);
                let mut off = 0;
                for (hi, &h) in heads.iter().enumerate() {
                    let d = h.out_dim();
                    let gh = &go[off..off + d];
                    off += d;
                    if gh.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let mlp = self.head(h);
                    let raw = mlp.forward(&feat, &mut cache);
                    graw.clear();
                    graw.extend(raw.iter().zip(gh).map(|(&r, &g)| g * activate_grad(h, r)));
                    mlp.backward(&mut cache, &graw, &mut views[hi], &mut gfeat);
                }
                let pg = point_g.as_deref_mut().map(|pg| &mut pg[3 * i..3 * i + 3]);
                self.feature_backward(&fp, &gfeat, &mut plane_g, pg);
            }
        }

        for (id, g) in planes.iter().zip(plane_g) {
            if let Some(g) = g {
                sink.put(*id, g);
            }
        }
        for (ids, gs) in layer_ids.iter().zip(layer_g) {
            for (&(w, b), g) in ids.iter().zip(gs) {
                if let Some((gw, gb)) = g {
                    sink.put(w, gw);
                    sink.put(b, gb);
                }
            }
        }
        if let (Some(id), Some(g)) = (point_node, point_g) {
            sink.put(id, g);
        }
    }

    /// Scatters a feature adjoint into plane adjoints and, optionally, the
    /// point adjoint.
    fn feature_backward(
        &self,
        fp: &Footprint,
        gfeat: &[f64],
        plane_g: &mut [Option<Vec<f64>>],
        point_g: Option<&mut [f64]>,
    ) {
        let c = self.channels;
        for p in 0..3 {
            if let Some(pg) = plane_g[p].as_mut() {
                for k in 0..4 {
                    let w = fp.weight[p][k];
                    if w == 0.0 {
                        continue;
                    }
                    let base = fp.corner[p][k] * c;
                    for (g, gf) in pg[base..base + c].iter_mut().zip(gfeat) {
                        *g += w * gf;
                    }
                }
            }
        }
        if let Some(pg) = point_g {
            for p in 0..3 {
                let [fu, fv] = fp.frac[p];
                let du = [-(1.0 - fv), 1.0 - fv, -fv, fv];
                let dv = [-(1.0 - fu), -fu, 1.0 - fu, fu];
                let plane = &self.planes[p];
                let mut su = 0.0;
                let mut sv = 0.0;
                for k in 0..4 {
                    let base = fp.corner[p][k] * c;
                    let dot: f64 = plane[base..base + c].iter().zip(gfeat).map(|(a, b)| a * b).sum();
                    su += du[k] * dot;
                    sv += dv[k] * dot;
                }
                let [au, av] = PLANE_AXES[p];
                pg[au] += su * fp.dgrid[au];
                pg[av] += sv * fp.dgrid[av];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::TriplaneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Weighted sum of all head outputs at a few points; FD reference.
    fn objective(field: &TriplaneField, heads: &[HeadKind], pts: &[Vec3], w: &[f64]) -> f64 {
        let mut out = Vec::new();
        let mut cache = MlpCache::default();
        for &x in pts {
            field.query_heads(heads, x, &mut cache, &mut out);
        }
        out.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn parameter_and_point_gradients_match_finite_differences() {
        let cfg = TriplaneConfig {
            hidden_layers: 2,
            ..TriplaneConfig::tiny()
        };
        let mut field = TriplaneField::new(&cfg, 9).unwrap();
        // Non-trivial deformation and weights outputs.
        for h in [HeadKind::Deformation, HeadKind::Weights] {
            let mut rng = ChaCha8Rng::seed_from_u64(h as u64);
            for v in field.head_mut(h).last_mut().weight.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let heads = HeadKind::ALL.to_vec();
        let width: usize = heads.iter().map(|h| h.out_dim()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Points away from plane-cell boundaries.
        let pts: Vec<Vec3> = (0..5)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                )
            })
            .collect();
        let w: Vec<f64> = (0..pts.len() * width).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (grads, gpts) = {
            let mut tape = Tape::new();
            let vars = FieldVars::bind(&mut tape, &field);
            let flat: Vec<f64> = pts.iter().flat_map(|p| p.to_array()).collect();
            let pn = tape.leaf(flat);
            let q = field.query_on_tape(&mut tape, &vars, &heads, Points::Node(pn));
            let wn = tape.constant(w.clone());
            let prod = tape.mul(q, wn);
            let loss = tape.sum(prod);
            assert!((tape.scalar(loss) - objective(&field, &heads, &pts, &w)).abs() < 1e-12);
            let g = tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> = vars.ids.iter().map(|&id| g.get(id)).collect();
            (grads, g.get(pn))
        };

        let h = 1e-6;
        let n_params = field.params().len();
        for t in 0..n_params {
            let len = field.params()[t].len();
            for k in [0, len / 2, len - 1] {
                let orig = field.params()[t][k];
                field.params_mut()[t][k] = orig + h;
                let fp = objective(&field, &heads, &pts, &w);
                field.params_mut()[t][k] = orig - h;
                let fm = objective(&field, &heads, &pts, &w);
                field.params_mut()[t][k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let g = grads[t][k];
                assert!(
                    (fd - g).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "tensor {t} entry {k}: fd {fd} vs tape {g}"
                );
            }
        }
        for i in 0..pts.len() {
            for a in 0..3 {
                let mut pp = pts.clone();
                pp[i][a] += h;
                let fp = objective(&field, &heads, &pp, &w);
                pp[i][a] -= 2.0 * h;
                let fm = objective(&field, &heads, &pp, &w);
                let fd = (fp - fm) / (2.0 * h);
                let g = gpts[3 * i + a];
                assert!((fd - g).abs() <= 1e-6 * (1.0 + fd.abs()), "point {i} axis {a}: {fd} vs {g}");
            }
        }
    }
}
