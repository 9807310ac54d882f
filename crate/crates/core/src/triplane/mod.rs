//! Triplane neural field: three axis-aligned feature planes summed by
//! bilinear sampling, decoded by five MLP heads.
//!
//! Plane `xy` is indexed by `(x, y)`, `xz` by `(x, z)` and `yz` by `(y, z)`.
//! Plane entries are laid out as `(v * R + u) * C + c` where `u` follows the
//! first coordinate. Sampling uses `align_corners` semantics: node `0` sits
//! at `-1` and node `R - 1` at `+1`.

mod checkpoint;
mod diff;
pub mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, softplus_inv};
use crate::error::{Error, Result};
use crate::geom::Vec3;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use diff::{FieldVars, Points};
pub use mlp::{Linear, Mlp, MlpCache};

/// Number of dual-vertex blend weights per cell (one per cell edge).
pub const CELL_EDGES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Density,
    Color,
    Sdf,
    Deformation,
    Weights,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Density,
        HeadKind::Color,
        HeadKind::Sdf,
        HeadKind::Deformation,
        HeadKind::Weights,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Output width. The weights head emits one lattice-vertex weight
    /// followed by one blend weight per cell edge.
    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Density | HeadKind::Sdf => 1,
            HeadKind::Color | HeadKind::Deformation => 3,
            HeadKind::Weights => 1 + CELL_EDGES,
        }
    }
}

/// Output squashing applied on top of a head's raw value.
pub(crate) fn activate(head: HeadKind, raw: f64, eps: f64) -> f64 {
    match head {
        HeadKind::Density => softplus(raw),
        HeadKind::Color => sigmoid(raw),
        HeadKind::Sdf => raw,
        HeadKind::Deformation => 0.5 * raw.tanh(),
        HeadKind::Weights => softplus(raw) + eps,
    }
}

/// d(activate)/d(raw).
pub(crate) fn activate_grad(head: HeadKind, raw: f64) -> f64 {
    match head {
        HeadKind::Density | HeadKind::Weights => sigmoid(raw),
        HeadKind::Color => {
            let s = sigmoid(raw);
            s * (1.0 - s)
        }
        HeadKind::Sdf => 1.0,
        HeadKind::Deformation => {
            let t = raw.tanh();
            0.5 * (1.0 - t * t)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriplaneConfig {
    /// Plane resolution R.
    pub resolution: usize,
    /// Feature channels C.
    pub channels: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Half-width of the uniform plane initialization.
    pub plane_init: f64,
    /// Floor added to softplus weights.
    pub weight_eps: f64,
    /// Initial bias of the density output.
    pub density_bias: f64,
}

impl TriplaneConfig {
    /// Triplane 64, dim 40.
    pub fn base() -> Self {
        Self {
            resolution: 64,
            channels: 40,
            hidden_width: 64,
            hidden_layers: 2,
            plane_init: 0.1,
            weight_eps: 1e-3,
            density_bias: 0.0,
        }
    }

    /// Triplane 64, dim 80.
    pub fn large() -> Self {
        Self {
            channels: 80,
            ..Self::base()
        }
    }

    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            channels: 4,
            hidden_width: 8,
            hidden_layers: 1,
            ..Self::base()
        }
    }
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        Self::base()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneField {
    pub resolution: usize,
    pub channels: usize,
    pub weight_eps: f64,
    /// `xy`, `xz`, `yz`.
    pub planes: [Vec<f64>; 3],
    /// Indexed by [`HeadKind::index`].
    pub heads: [Mlp; 5],
}

/// Bilinear footprint of one point on the three planes.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Footprint {
    /// Base offsets (without channel) of the four corners per plane, ordered
    /// (u0,v0), (u1,v0), (u0,v1), (u1,v1).
    pub corner: [[usize; 4]; 3],
    pub weight: [[f64; 4]; 3],
    /// Fractional coordinates within the cell per plane.
    pub frac: [[f64; 2]; 3],
    /// Per-axis d(grid coordinate)/d(x): zero where the point was clamped.
    pub dgrid: [f64; 3],
}

/// Axes `(u, v)` of each plane.
pub(crate) const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

impl TriplaneField {
    pub fn new(config: &TriplaneConfig, seed: u64) -> Result<Self> {
        if config.resolution < 2 || config.channels == 0 || config.hidden_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "triplane needs resolution >= 2 and non-zero widths: {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.resolution;
        let c = config.channels;
        let mut plane = || -> Vec<f64> {
            (0..r * r * c)
                .map(|_| {
                    if config.plane_init > 0.0 {
                        rng.random_range(-config.plane_init..config.plane_init)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let planes = [plane(), plane(), plane()];
        let mut head = |kind: HeadKind| {
            Mlp::new(c, config.hidden_width, config.hidden_layers, kind.out_dim(), 0.1, &mut rng)
        };
        let mut heads = [
            head(HeadKind::Density),
            head(HeadKind::Color),
            head(HeadKind::Sdf),
            head(HeadKind::Deformation),
            head(HeadKind::Weights),
        ];
        heads[HeadKind::Density.index()].last_mut().bias[0] = config.density_bias;
        // No deformation until the fit asks for one.
        let d = heads[HeadKind::Deformation.index()].last_mut();
        d.weight.iter_mut().for_each(|v| *v = 0.0);
        d.bias.iter_mut().for_each(|v| *v = 0.0);
        // Weights start at exactly 1 (the neutral point of the regularizer).
        let w = heads[HeadKind::Weights.index()].last_mut();
        w.weight.iter_mut().for_each(|v| *v = 0.0);
        let neutral = softplus_inv(1.0 - config.weight_eps);
        w.bias.iter_mut().for_each(|b| *b = neutral);
        Ok(Self {
            resolution: r,
            channels: c,
            weight_eps: config.weight_eps,
            planes,
            heads,
        })
    }

    pub fn head(&self, kind: HeadKind) -> &Mlp {
        &self.heads[kind.index()]
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> &mut Mlp {
        &mut self.heads[kind.index()]
    }

    /// Zeroes the last layer of a head.
    pub fn zero_head_output(&mut self, kind: HeadKind) {
        let last = self.head_mut(kind).last_mut();
        last.weight.iter_mut().for_each(|v| *v = 0.0);
        last.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    /// All parameter tensors in checkpoint order: the three planes, then
    /// every head's layers as (weight, bias).
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.planes.iter().map(|p| p.as_slice()).collect();
        for h in &self.heads {
            for l in &h.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.planes.iter_mut().collect();
        for h in self.heads.iter_mut() {
            for l in h.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub(crate) fn footprint(&self, x: Vec3) -> Footprint {
        let r = self.resolution;
        let scale = 0.5 * (r - 1) as f64;
        let mut g = [0.0; 3];
        let mut dgrid = [0.0; 3];
        for a in 0..3 {
            let xa = x[a];
            let clamped = xa.clamp(-1.0, 1.0);
            g[a] = (clamped + 1.0) * scale;
            dgrid[a] = if (-1.0..=1.0).contains(&xa) { scale } else { 0.0 };
        }
        let mut fp = Footprint {
            dgrid,
            ..Default::default()
        };
        for (p, axes) in PLANE_AXES.iter().enumerate() {
            let gu = g[axes[0]];
            let gv = g[axes[1]];
            let iu = (gu.floor() as usize).min(r - 2);
            let iv = (gv.floor() as usize).min(r - 2);
            let fu = gu - iu as f64;
            let fv = gv - iv as f64;
            fp.corner[p] = [
                iv * r + iu,
                iv * r + iu + 1,
                (iv + 1) * r + iu,
                (iv + 1) * r + iu + 1,
            ];
            fp.weight[p] = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
            fp.frac[p] = [fu, fv];
        }
        fp
    }

    pub(crate) fn feature_from(&self, fp: &Footprint, out: &mut [f64]) {
        let c = self.channels;
        out.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..3 {
            let plane = &self.planes[p];
            for k in 0..4 {
                let w = fp.weight[p][k];
                let base = fp.corner[p][k] * c;
                for (o, v) in out.iter_mut().zip(&plane[base..base + c]) {
                    *o += w * v;
                }
            }
        }
    }

    /// Summed bilinear feature at `x` (clamped to the domain).
    pub fn sample(&self, x: Vec3) -> Vec<f64> {
        let fp = self.footprint(x);
        let mut f = vec![0.0; self.channels];
        self.feature_from(&fp, &mut f);
        f
    }

    /// Raw (pre-activation) outputs of one head at `x`.
    pub fn query_raw(&self, kind: HeadKind, x: Vec3) -> Vec<f64> {
        let f = self.sample(x);
        self.head(kind).forward(&f, &mut MlpCache::default()).to_vec()
    }

    /// Activated outputs of one head at `x`.
    pub fn query(&self, kind: HeadKind, x: Vec3) -> Vec<f64> {
        self.query_raw(kind, x)
            .into_iter()
            .map(|r| activate(kind, r, self.weight_eps))
            .collect()
    }

    /// Activated outputs of several heads sharing one feature lookup,
    /// concatenated in the order given.
    pub fn query_heads(&self, heads: &[HeadKind], x: Vec3, cache: &mut MlpCache, out: &mut Vec<f64>) {
        let fp = self.footprint(x);
        let mut f = std::mem::take(&mut cache.feat);
        f.resize(self.channels, 0.0);
        self.feature_from(&fp, &mut f);
        for &h in heads {
            let raw = self.head(h).forward(&f, cache);
            out.extend(raw.iter().map(|&r| activate(h, r, self.weight_eps)));
        }
        cache.feat = f;
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.query(HeadKind::Density, x)[0]
    }

    /// Pre-activation density; the SDF handoff is exact on this value.
    pub fn density_raw(&self, x: Vec3) -> f64 {
        self.query_raw(HeadKind::Density, x)[0]
    }

    pub fn color(&self, x: Vec3) -> [f64; 3] {
        let c = self.query(HeadKind::Color, x);
        [c[0], c[1], c[2]]
    }

    pub fn sdf(&self, x: Vec3) -> f64 {
        self.query_raw(HeadKind::Sdf, x)[0]
    }

    /// Deformation in cell units, each component in (−½, ½).
    pub fn deformation(&self, x: Vec3) -> Vec3 {
        let d = self.query(HeadKind::Deformation, x);
        Vec3::new(d[0], d[1], d[2])
    }

    /// `1 + CELL_EDGES` positive weights.
    pub fn weights(&self, x: Vec3) -> Vec<f64> {
        self.query(HeadKind::Weights, x)
    }

    /// Re-initializes the SDF head from the density head so that
    /// `sdf(x) = -(density_raw(x) - tau)`: the trunk is copied, the last
    /// layer weight negated and its bias set to `tau - b_d`.
    pub fn init_sdf_from_density(&mut self, tau: f64) -> Result<()> {
        let density = self.head(HeadKind::Density);
        let sdf = self.head(HeadKind::Sdf);
        if density.shapes() != sdf.shapes() {
            return Err(Error::ArchitectureMismatch(format!(
                "density head {:?} vs sdf head {:?}",
                density.shapes(),
                sdf.shapes()
            )));
        }
        let mut new_sdf = density.clone();
        let last = new_sdf.last_mut();
        last.weight.iter_mut().for_each(|w| *w = -*w);
        last.bias[0] = tau - last.bias[0];
        self.heads[HeadKind::Sdf.index()] = new_sdf;
        Ok(())
    }

    /// Copy of the field with the SDF head re-initialized from density.
    pub fn with_sdf_from_density(&self, tau: f64) -> Result<Self> {
        let mut out = self.clone();
        out.init_sdf_from_density(tau)?;
        Ok(out)
    }
}
