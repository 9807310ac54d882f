//! Image-space losses for both stages.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradSink, NodeId, Tape, Values};
use crate::error::{Error, Result};
use crate::flexigrid::{reg_loss, ExtractionGrid};
use crate::image::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_mask: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 2.0,
            lambda_mask: 1.0,
            lambda_depth: 0.5,
            lambda_normal: 0.2,
            lambda_reg: 0.01,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        let all = [
            self.lambda_lpips,
            self.lambda_mask,
            self.lambda_depth,
            self.lambda_normal,
            self.lambda_reg,
        ];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// A learned perceptual metric. Returns its value and the gradient with
/// respect to `pred.rgb`.
pub trait PerceptualLoss {
    fn evaluate(&self, pred: &ImageBuffer, gt: &ImageBuffer) -> (f64, Vec<f64>);
}

/// Weighted loss contributions; `total()` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub lpips: f64,
    pub mask: f64,
    pub depth: f64,
    pub normal: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.rgb + self.lpips + self.mask + self.depth + self.normal + self.reg
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.rgb += o.rgb;
        self.lpips += o.lpips;
        self.mask += o.mask;
        self.depth += o.depth;
        self.normal += o.normal;
        self.reg += o.reg;
    }
}

/// Adjoint buffers laid out like [`ImageBuffer`] channels.
#[derive(Clone, Debug)]
pub(crate) struct ImageGrad {
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

/// Loss of one view. `geometric` adds the masked depth and normal terms.
pub(crate) fn view_terms(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    w: &LossWeights,
    geometric: bool,
    perceptual: Option<&dyn PerceptualLoss>,
    mut grad: Option<&mut ImageGrad>,
) -> Result<LossTerms> {
    pred.same_size(gt)?;
    let n = pred.pixel_count();
    let mut t = LossTerms::default();
    let k_rgb = 1.0 / (3 * n) as f64;
    for (i, (p, g)) in pred.rgb.iter().zip(&gt.rgb).enumerate() {
        let d = p - g;
        t.rgb += d * d * k_rgb;
        if let Some(gr) = grad.as_deref_mut() {
            gr.rgb[i] += 2.0 * d * k_rgb;
        }
    }
    let k_mask = w.lambda_mask / n as f64;
    for (i, (p, g)) in pred.mask.iter().zip(&gt.mask).enumerate() {
        let d = p - g;
        t.mask += d * d * k_mask;
        if let Some(gr) = grad.as_deref_mut() {
            gr.mask[i] += 2.0 * d * k_mask;
        }
    }
    if let Some(pl) = perceptual {
        let (v, g) = pl.evaluate(pred, gt);
        t.lpips = w.lambda_lpips * v;
        if let Some(gr) = grad.as_deref_mut() {
            for (a, b) in gr.rgb.iter_mut().zip(g) {
                *a += w.lambda_lpips * b;
            }
        }
    }
    if geometric {
        let (Some(gd), Some(gn)) = (gt.depth.as_ref(), gt.normal.as_ref()) else {
            return Err(Error::MissingChannel(if gt.depth.is_none() { "depth" } else { "normal" }));
        };
        let (Some(pd), Some(pn)) = (pred.depth.as_ref(), pred.normal.as_ref()) else {
            return Err(Error::MissingChannel("predicted depth/normal"));
        };
        let count = gt.mask.iter().filter(|&&m| m > 0.5).count();
        if count > 0 {
            let kd = w.lambda_depth / count as f64;
            let kn = w.lambda_normal / count as f64;
            for i in 0..n {
                let m = gt.mask[i];
                if m <= 0.5 {
                    continue;
                }
                let d = pd[i] - gd[i];
                t.depth += kd * m * d.abs();
                let dot: f64 = (0..3).map(|k| pn[3 * i + k] * gn[3 * i + k]).sum();
                t.normal += kn * m * (1.0 - dot);
                if let Some(gr) = grad.as_deref_mut() {
                    gr.depth[i] += kd * m * sign(d);
                    for k in 0..3 {
                        gr.normal[3 * i + k] -= kn * m * gn[3 * i + k];
                    }
                }
            }
        }
    }
    Ok(t)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_aligned(rendered: &[ImageBuffer], gt: &[ImageBuffer]) -> Result<()> {
    if rendered.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rendered views vs {} ground-truth views",
            rendered.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Image MSE plus weighted perceptual and mask terms, per-view pixel means
/// summed over views.
pub fn loss_stage1(
    rendered: &[ImageBuffer],
    gt: &[ImageBuffer],
    w: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossTerms> {
    check_aligned(rendered, gt)?;
    let mut t = LossTerms::default();
    for (r, g) in rendered.iter().zip(gt) {
        t.add(&view_terms(r, g, w, false, perceptual, None)?);
    }
    Ok(t)
}

/// Stage-1 terms plus masked depth and normal terms and the grid
/// regularizer.
pub fn loss_stage2(
    rendered: &[ImageBuffer],
    gt: &[ImageBuffer],
    w: &LossWeights,
    grid: &ExtractionGrid,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossTerms> {
    check_aligned(rendered, gt)?;
    let mut t = LossTerms::default();
    for (r, g) in rendered.iter().zip(gt) {
        t.add(&view_terms(r, g, w, true, perceptual, None)?);
    }
    t.reg = w.lambda_reg * reg_loss(grid)?;
    Ok(t)
}

/// Where each channel lives inside a per-pixel tape node.
#[derive(Clone, Copy, Debug)]
pub struct PixelLayout {
    pub stride: usize,
    pub rgb: usize,
    pub mask: usize,
    pub depth: Option<usize>,
    pub normal: Option<usize>,
}

impl PixelLayout {
    pub const VOLUME: PixelLayout = PixelLayout {
        stride: crate::volren::VOLUME_CHANNELS,
        rgb: 0,
        mask: 3,
        depth: Some(4),
        normal: None,
    };
    pub const RASTER: PixelLayout = PixelLayout {
        stride: crate::raster::RASTER_CHANNELS,
        rgb: 0,
        mask: 7,
        depth: Some(3),
        normal: Some(4),
    };

    fn unpack(&self, v: &[f64], width: usize, height: usize) -> ImageBuffer {
        let mut img = ImageBuffer::background(width, height);
        let depth = img.depth.as_mut().expect("background has depth");
        let normal = img.normal.as_mut().expect("background has normals");
        for (i, px) in v.chunks_exact(self.stride).enumerate() {
            img.rgb[3 * i..3 * i + 3].copy_from_slice(&px[self.rgb..self.rgb + 3]);
            img.mask[i] = px[self.mask];
            if let Some(d) = self.depth {
                depth[i] = px[d];
            }
            if let Some(o) = self.normal {
                normal[3 * i..3 * i + 3].copy_from_slice(&px[o..o + 3]);
            }
        }
        img
    }
}

/// Records the loss of one rendered view against `gt` as a scalar node.
/// The adjoint is computed eagerly, since the loss is a terminal node.
#[allow(clippy::too_many_arguments)]
pub fn view_loss_on_tape(
    tape: &mut Tape<'_>,
    node: NodeId,
    layout: PixelLayout,
    width: usize,
    height: usize,
    gt: &ImageBuffer,
    w: &LossWeights,
    geometric: bool,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(NodeId, LossTerms)> {
    let pred = layout.unpack(tape.value(node), width, height);
    let n = width * height;
    let mut g = ImageGrad {
        rgb: vec![0.0; 3 * n],
        mask: vec![0.0; n],
        depth: vec![0.0; n],
        normal: vec![0.0; 3 * n],
    };
    let terms = view_terms(&pred, gt, w, geometric, perceptual, Some(&mut g))?;
    let mut packed = vec![0.0; n * layout.stride];
    for (i, px) in packed.chunks_exact_mut(layout.stride).enumerate() {
        px[layout.rgb..layout.rgb + 3].copy_from_slice(&g.rgb[3 * i..3 * i + 3]);
        px[layout.mask] = g.mask[i];
        if let Some(d) = layout.depth {
            px[d] = g.depth[i];
        }
        if let Some(o) = layout.normal {
            px[o..o + 3].copy_from_slice(&g.normal[3 * i..3 * i + 3]);
        }
    }
    let id = tape.custom(&[node], vec![terms.total()], move |up: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
        if let Some(s) = sink.slot(node) {
            for (a, b) in s.iter_mut().zip(&packed) {
                *a += up[0] * b;
            }
        }
    });
    Ok((id, terms))
}
