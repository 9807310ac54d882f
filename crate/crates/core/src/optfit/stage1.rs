//! Stage 1: the triplane fitted through volume rendering.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::Rect;
use crate::triplane::{FieldVars, TriplaneField};
use crate::volren::{render_rays_on_tape, render_volume_on_tape, VolumeOptions};

use super::{
    adam_step, cosine_lr, view_loss_on_tape, AdamParams, AdamState, FitConfig, LossTerms, PerceptualLoss,
    PixelLayout, TraceRecord, ViewSet,
};

/// Fits `field` to `views` for `config.stage1.steps` steps and returns the
/// loss trace. Deterministic for a fixed `config.seed`.
pub fn fit_stage1(
    field: &mut TriplaneField,
    views: &ViewSet,
    config: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<Vec<TraceRecord>> {
    config.check()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs at least one view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<usize> = field.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut trace = Vec::with_capacity(config.stage1.steps);
    for step in 0..config.stage1.steps {
        trace.push(stage1_step(field, views, config, step, &mut rng, &mut adam, perceptual)?);
    }
    Ok(trace)
}

/// One optimization step: renders the supervision views, backpropagates and
/// applies Adam.
pub fn stage1_step(
    field: &mut TriplaneField,
    views: &ViewSet,
    config: &FitConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
    adam: &mut AdamState,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<TraceRecord> {
    let s1 = &config.stage1;
    let lr = cosine_lr(step, s1.steps, s1.lr_start, s1.lr_end);
    let k = config.n_supervision_views.min(views.len());
    let chosen = sample(rng, views.len(), k).into_vec();

    let (terms, grads) = {
        let field_ref: &TriplaneField = field;
        let mut tape = Tape::new();
        let vars = FieldVars::bind(&mut tape, field_ref);
        let mut losses = Vec::with_capacity(k);
        let mut terms = LossTerms::default();
        for &v in &chosen {
            let cam = &views.poses[v];
            let gt_full = &views.images[v];
            let opts = VolumeOptions {
                n_samples: s1.n_samples,
                jitter: s1.jitter.then(|| rng.random::<u64>()),
            };
            let (w, h) = (cam.width(), cam.height());
            let (node, gt) = if let Some(r) = s1.rays_per_view {
                let pixels: Vec<(usize, usize)> = sample(rng, w * h, r.min(w * h))
                    .into_iter()
                    .map(|i| (i % w, i / w))
                    .collect();
                (render_rays_on_tape(field_ref, &mut tape, &vars, cam, &opts, &pixels)?, gt_full.gather(&pixels)?)
            } else if let Some(p) = s1.patch_size.filter(|&p| p < w || p < h) {
                let (pw, ph) = (p.min(w), p.min(h));
                let rect = Rect {
                    x: rng.random_range(0..=w - pw),
                    y: rng.random_range(0..=h - ph),
                    width: pw,
                    height: ph,
                };
                (render_volume_on_tape(field_ref, &mut tape, &vars, cam, &opts, Some(rect))?, gt_full.crop(rect)?)
            } else {
                (render_volume_on_tape(field_ref, &mut tape, &vars, cam, &opts, None)?, gt_full.clone())
            };
            let (l, t) = view_loss_on_tape(
                &mut tape,
                node.node,
                PixelLayout::VOLUME,
                node.width,
                node.height,
                &gt,
                &config.weights,
                false,
                perceptual,
            )?;
            losses.push(l);
            terms.add(&t);
        }
        if !terms.total().is_finite() {
            return Err(Error::NonFinite { what: "stage-1 loss", step });
        }
        let total = tape.add_scalars(&losses);
        let mut g = tape.backward(total)?;
        let grads: Vec<Vec<f64>> = vars.ids.iter().map(|&id| g.take(id)).collect();
        (terms, grads)
    };
    adam_step(&mut field.params_mut(), &grads, adam, lr, &AdamParams::default()).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        e => e,
    })?;
    Ok(TraceRecord { stage: 1, step, lr, terms })
}
