//! Two-stage per-scene fitting: volume-rendered triplane first, then the
//! extracted mesh.

mod loss;
mod stage1;
mod stage2;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::triplane::TriplaneConfig;

pub use loss::{
    loss_stage1, loss_stage2, view_loss_on_tape, LossTerms, LossWeights, PerceptualLoss, PixelLayout,
};
pub use stage1::{fit_stage1, stage1_step};
pub use stage2::{fit_stage2, stage2_loss_on_tape, Stage2Loss, Stage2State};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub n_samples: usize,
    /// Square patch side rendered per supervision view; `None` renders
    /// whole frames.
    pub patch_size: Option<usize>,
    /// Random pixels per supervision view. Takes precedence over patches.
    pub rays_per_view: Option<usize>,
    /// Stratified jitter of the ray samples, reseeded every step.
    pub jitter: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_start: 4.0e-4,
            lr_end: 4.0e-5,
            n_samples: 96,
            patch_size: Some(192),
            rays_per_view: None,
            jitter: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Extraction grid resolution N (cells per axis).
    pub grid: usize,
    /// Raster resolution; ground-truth views must match it.
    pub render_size: usize,
    /// Re-evaluate the SDF only within this many cells of the last surface.
    /// `None` evaluates the full lattice every step.
    pub band: Option<usize>,
    /// Full-lattice SDF refresh period when a band is used.
    pub refresh_every: usize,
    /// Off-surface vertices sampled for the deformation penalty. `None`
    /// evaluates it over the full lattice.
    pub deformation_samples: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_start: 4.0e-5,
            lr_end: 0.0,
            grid: 128,
            render_size: 512,
            band: None,
            refresh_every: 50,
            deformation_samples: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    pub triplane: TriplaneConfig,
    pub weights: LossWeights,
    /// Density level that becomes the zero set of the SDF.
    pub tau: f64,
    /// Side of the input views.
    pub input_size: usize,
    pub n_input_views: usize,
    /// Views supervising each step, drawn from the scene's views.
    pub n_supervision_views: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl FitConfig {
    pub fn base() -> Self {
        Self {
            seed: 0,
            triplane: TriplaneConfig::base(),
            weights: LossWeights::default(),
            tau: 10.0,
            input_size: 320,
            n_input_views: 6,
            n_supervision_views: 4,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }

    pub fn large() -> Self {
        let mut c = Self::base();
        c.triplane = TriplaneConfig::large();
        c.stage1.n_samples = 128;
        c
    }

    /// Single-core scale: 64×64 views, a small field, random ray batches
    /// instead of whole frames and a narrow band in stage 2.
    pub fn desk() -> Self {
        let mut c = Self::base();
        c.triplane = TriplaneConfig {
            channels: 16,
            hidden_width: 32,
            hidden_layers: 1,
            density_bias: -2.0,
            ..TriplaneConfig::base()
        };
        c.tau = 4.0;
        c.input_size = 64;
        c.stage1 = Stage1Config {
            lr_start: 1.0e-2,
            lr_end: 1.0e-3,
            n_samples: 48,
            patch_size: None,
            rays_per_view: Some(128),
            ..Stage1Config::default()
        };
        c.stage2 = Stage2Config {
            lr_start: 1.0e-3,
            lr_end: 0.0,
            grid: 64,
            render_size: 64,
            band: Some(1),
            deformation_samples: Some(2048),
            ..Stage2Config::default()
        };
        c
    }

    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        for (name, a, b) in [
            ("stage1", self.stage1.lr_start, self.stage1.lr_end),
            ("stage2", self.stage2.lr_start, self.stage2.lr_end),
        ] {
            if !(a >= b && b >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} learning rates must satisfy lr_start >= lr_end >= 0, got {a} and {b}"
                )));
            }
        }
        if self.n_supervision_views == 0 {
            return Err(Error::InvalidArgument("n_supervision_views must be at least 1".into()));
        }
        if self.stage1.n_samples == 0 {
            return Err(Error::InvalidArgument("stage1.n_samples must be at least 1".into()));
        }
        if self.stage2.grid < 2 || self.stage2.refresh_every == 0 {
            return Err(Error::InvalidArgument("stage2.grid >= 2 and refresh_every >= 1 required".into()));
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidArgument("tau must be finite".into()));
        }
        Ok(())
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_start;
    }
    let f = step.min(total_steps) as f64 / total_steps as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
    w * lr_start + (1.0 - w) * lr_end
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and returns [`Error::NonFinite`].
pub fn adam_step(
    params: &mut [&mut Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch("adam parameter and gradient lists".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch("adam tensor shapes".into()));
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            step: state.t,
        });
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Posed ground-truth views of one scene.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub poses: Vec<CameraPose>,
    pub images: Vec<ImageBuffer>,
}

impl ViewSet {
    pub fn new(poses: Vec<CameraPose>, images: Vec<ImageBuffer>) -> Result<Self> {
        if poses.len() != images.len() {
            return Err(Error::DimensionMismatch(format!("{} poses vs {} images", poses.len(), images.len())));
        }
        for (p, im) in poses.iter().zip(&images) {
            if p.width() != im.width || p.height() != im.height {
                return Err(Error::DimensionMismatch(format!(
                    "camera is {}x{}, image is {}x{}",
                    p.width(),
                    p.height(),
                    im.width,
                    im.height
                )));
            }
        }
        Ok(Self { poses, images })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl TraceRecord {
    pub fn total(&self) -> f64 {
        self.terms.total()
    }
}

pub fn write_trace_csv(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut out = String::from("stage,step,lr,total,rgb,lpips,mask,depth,normal,reg\n");
    for r in records {
        let t = &r.terms;
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.stage,
            r.step,
            r.lr,
            t.total(),
            t.rgb,
            t.lpips,
            t.mask,
            t.depth,
            t.normal,
            t.reg
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean of consecutive windows of `w` totals; a trailing partial window is
/// dropped.
pub fn smoothed_trace(records: &[TraceRecord], w: usize) -> Vec<f64> {
    records
        .chunks_exact(w.max(1))
        .map(|c| c.iter().map(TraceRecord::total).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 2000, 4.0e-4, 4.0e-5), 4.0e-4);
        assert!((cosine_lr(2000, 2000, 4.0e-4, 4.0e-5) - 4.0e-5).abs() < 1e-20);
        assert!((cosine_lr(1000, 2000, 4.0e-4, 4.0e-5) - 2.2e-4).abs() < 1e-18);
        assert!(cosine_lr(1000, 1000, 4.0e-5, 0.0).abs() < 1e-20);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, -0.01, 0.0];
        let mut st = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.1, &AdamParams::default()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - -1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_zero_grad_decays_moments() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(&[1]);
        let hp = AdamParams::default();
        adam_step(&mut [&mut p], &[vec![1.0]], &mut st, 0.1, &hp).unwrap();
        let (m, v, before) = (st.m[0][0], st.v[0][0], p[0]);
        adam_step(&mut [&mut p], &[vec![0.0]], &mut st, 0.0, &hp).unwrap();
        assert_eq!(p[0], before);
        assert_eq!(st.m[0][0], 0.9 * m);
        assert_eq!(st.v[0][0], 0.999 * v);
    }

    #[test]
    fn adam_minimizes_a_quadratic_bowl() {
        // Scalar simulation of the same recurrences as the oracle.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut q, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=500 {
            let g = q;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            q -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![1.0];
        let mut st = AdamState::new(&[1]);
        for _ in 0..500 {
            let g = vec![p[0]];
            adam_step(&mut [&mut p], &[g], &mut st, lr, &AdamParams::default()).unwrap();
        }
        assert_eq!(p[0], q);
        assert!(p[0].abs() < 1e-3, "{}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(&[2]);
        let r = adam_step(&mut [&mut p], &[vec![0.1, f64::NAN]], &mut st, 0.1, &AdamParams::default());
        assert!(matches!(r, Err(Error::NonFinite { what: "gradient", .. })));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn presets_expose_the_published_hyperparameters() {
        let b = FitConfig::base();
        assert_eq!((b.triplane.resolution, b.triplane.channels), (64, 40));
        assert_eq!(FitConfig::large().triplane.channels, 80);
        assert_eq!((b.stage1.n_samples, FitConfig::large().stage1.n_samples), (96, 128));
        assert_eq!((b.stage2.grid, b.input_size), (128, 320));
        assert_eq!((b.stage1.patch_size, b.stage2.render_size), (Some(192), 512));
        assert_eq!((b.n_input_views, b.n_supervision_views), (6, 4));
        b.check().unwrap();
        FitConfig::desk().check().unwrap();
    }

    #[test]
    fn config_round_trips_through_json_and_fills_defaults() {
        let c = FitConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<FitConfig>(&s).unwrap(), c);
        let partial: FitConfig = serde_json::from_str(r#"{"seed": 9, "stage1": {"steps": 5}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.stage1.steps, 5);
        assert_eq!(partial.stage1.n_samples, 96);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        let mut c = FitConfig::base();
        c.stage1.lr_end = 1.0;
        assert!(c.check().is_err());
        let mut c = FitConfig::base();
        c.stage2.lr_end = -1e-6;
        assert!(c.check().is_err());
    }
}
