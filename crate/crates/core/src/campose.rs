//! Camera pose sets: multi-view diffusion target views, evaluation orbits,
//! random training viewpoints, and pose augmentation / perturbation.
//!
//! All randomness flows from explicit seeds through ChaCha8, so every set is
//! reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};

/// Distance, field of view and image size shared by every pose of a set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub radius: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            radius: 2.5,
            fov_deg: 50.0,
            width: 64,
            height: 64,
        }
    }
}

impl CameraRig {
    pub fn pose(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose> {
        CameraPose::from_spherical(
            azimuth_deg,
            elevation_deg,
            self.radius,
            self.fov_deg,
            self.width,
            self.height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub label: String,
    pub seed: Option<u64>,
    pub poses: Vec<CameraPose>,
}

impl PoseSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// `(azimuth, elevation)` pairs in order.
    pub fn angles(&self) -> Vec<(f64, f64)> {
        self.poses
            .iter()
            .map(|p| (p.azimuth_deg(), p.elevation_deg()))
            .collect()
    }
}

/// Elevations of the six target views, alternating starting with the first.
pub const ZERO123PP_ELEVATIONS: [f64; 2] = [20.0, -10.0];
/// Azimuth of the first target view relative to the query view.
pub const ZERO123PP_AZIMUTH_START: f64 = 30.0;
pub const ZERO123PP_AZIMUTH_STEP: f64 = 60.0;

/// The six fixed target views of the multi-view generator, relative to the
/// query azimuth: azimuth `query + 30 + 60k`, elevation alternating 20°/−10°.
pub fn zero123pp_targets(query_azimuth_deg: f64, rig: &CameraRig) -> Result<PoseSet> {
    if !query_azimuth_deg.is_finite() {
        return Err(Error::InvalidArgument("query azimuth must be finite".into()));
    }
    let poses = (0..6)
        .map(|k| {
            let az = (query_azimuth_deg + ZERO123PP_AZIMUTH_START + ZERO123PP_AZIMUTH_STEP * k as f64)
                .rem_euclid(360.0);
            rig.pose(az, ZERO123PP_ELEVATIONS[k % 2])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSet {
        label: "zero123pp".into(),
        seed: None,
        poses,
    })
}

pub const EVAL_ORBIT_VIEWS: usize = 21;
pub const EVAL_ORBIT_ELEVATIONS: [f64; 3] = [30.0, 0.0, -30.0];

/// Orbit with uniform azimuths; elevations cycle through `elevation_cycle`
/// in azimuth order.
pub fn orbit_eval_poses(n: usize, elevation_cycle: &[f64], rig: &CameraRig) -> Result<PoseSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("orbit needs at least one view".into()));
    }
    if elevation_cycle.is_empty() {
        return Err(Error::InvalidArgument("elevation cycle is empty".into()));
    }
    let poses = (0..n)
        .map(|k| {
            let az = k as f64 * 360.0 / n as f64;
            rig.pose(az, elevation_cycle[k % elevation_cycle.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSet {
        label: "orbit".into(),
        seed: None,
        poses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointRanges {
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for ViewpointRanges {
    fn default() -> Self {
        Self {
            elevation_min_deg: -30.0,
            elevation_max_deg: 75.0,
        }
    }
}

/// `n` viewpoints with azimuth ~ U[0, 360) and elevation uniform in `ranges`.
pub fn random_viewpoints(
    n: usize,
    seed: u64,
    ranges: ViewpointRanges,
    rig: &CameraRig,
) -> Result<PoseSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one viewpoint".into()));
    }
    if !(ranges.elevation_min_deg <= ranges.elevation_max_deg)
        || ranges.elevation_min_deg < -90.0
        || ranges.elevation_max_deg > 90.0
    {
        return Err(Error::InvalidArgument(format!("bad elevation range {ranges:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = (0..n)
        .map(|_| {
            let az = rng.random_range(0.0..360.0);
            let el = if ranges.elevation_min_deg == ranges.elevation_max_deg {
                ranges.elevation_min_deg
            } else {
                rng.random_range(ranges.elevation_min_deg..=ranges.elevation_max_deg)
            };
            rig.pose(az, el)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSet {
        label: "random".into(),
        seed: Some(seed),
        poses,
    })
}

pub const DEFAULT_AUGMENT_SCALE_DELTA: f64 = 0.2;
pub const DEFAULT_PERTURB_SIGMA_DEG: f64 = 1.0;
pub const DEFAULT_PERTURB_SIGMA_RADIUS: f64 = 0.02;

/// Applies one rotation about world `z` and one radius scale to every pose.
pub fn apply_augmentation(poses: &PoseSet, rotation_deg: f64, scale: f64) -> Result<PoseSet> {
    let out = poses
        .poses
        .iter()
        .map(|p| {
            let c = p.params();
            CameraPose::from_spherical(
                (c.azimuth_deg + rotation_deg).rem_euclid(360.0),
                c.elevation_deg,
                c.radius * scale,
                c.fov_deg,
                c.width,
                c.height,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSet {
        label: format!("{}+augment", poses.label),
        seed: poses.seed,
        poses: out,
    })
}

/// Draws a shared rotation in U[0, 360) and a shared scale in
/// U[1 − Δ, 1 + Δ]; returns the augmented set with the drawn values.
pub fn augment_poses(
    poses: &PoseSet,
    seed: u64,
    max_scale_delta: f64,
) -> Result<(PoseSet, f64, f64)> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty pose set".into()));
    }
    if !(0.0..1.0).contains(&max_scale_delta) {
        return Err(Error::InvalidArgument(format!(
            "scale delta must lie in [0, 1), got {max_scale_delta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = rng.random_range(0.0..360.0);
    let scale = if max_scale_delta == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - max_scale_delta..=1.0 + max_scale_delta)
    };
    let mut out = apply_augmentation(poses, rotation, scale)?;
    out.seed = Some(seed);
    Ok((out, rotation, scale))
}

/// Independent Gaussian noise per pose on azimuth, elevation and radius.
/// Elevation is clamped to [−90, 90] and radius kept positive.
pub fn perturb_poses(
    poses: &PoseSet,
    seed: u64,
    sigma_deg: f64,
    sigma_radius: f64,
) -> Result<PoseSet> {
    if !(sigma_deg >= 0.0 && sigma_radius >= 0.0) || !sigma_deg.is_finite() || !sigma_radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "perturbation sigmas must be finite and >= 0, got {sigma_deg}, {sigma_radius}"
        )));
    }
    let angle = Normal::new(0.0, sigma_deg)
        .map_err(|e| Error::InvalidArgument(format!("sigma_deg: {e}")))?;
    let dist = Normal::new(0.0, sigma_radius)
        .map_err(|e| Error::InvalidArgument(format!("sigma_radius: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = poses
        .poses
        .iter()
        .map(|p| {
            let c = p.params();
            let az = c.azimuth_deg + angle.sample(&mut rng);
            let el = (c.elevation_deg + angle.sample(&mut rng)).clamp(-90.0, 90.0);
            let r = (c.radius + dist.sample(&mut rng)).max(c.radius * 1e-3);
            CameraPose::from_spherical(az, el, r, c.fov_deg, c.width, c.height)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSet {
        label: format!("{}+perturb", poses.label),
        seed: Some(seed),
        poses: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> CameraRig {
        CameraRig::default()
    }

    #[test]
    fn zero123pp_from_query_zero() {
        let set = zero123pp_targets(0.0, &rig()).unwrap();
        assert_eq!(
            set.angles(),
            vec![
                (30.0, 20.0),
                (90.0, -10.0),
                (150.0, 20.0),
                (210.0, -10.0),
                (270.0, 20.0),
                (330.0, -10.0)
            ]
        );
    }

    #[test]
    fn zero123pp_shifted_queries() {
        let az: Vec<f64> = zero123pp_targets(90.0, &rig())
            .unwrap()
            .angles()
            .iter()
            .map(|a| a.0)
            .collect();
        assert_eq!(az, vec![120.0, 180.0, 240.0, 300.0, 0.0, 60.0]);
        let first = zero123pp_targets(-30.0, &rig()).unwrap().angles()[0];
        assert_eq!(first, (0.0, 20.0));
        assert!(zero123pp_targets(f64::NAN, &rig()).is_err());
    }

    #[test]
    fn orbit_defaults() {
        let set = orbit_eval_poses(EVAL_ORBIT_VIEWS, &EVAL_ORBIT_ELEVATIONS, &rig()).unwrap();
        assert_eq!(set.len(), 21);
        assert_eq!(set.angles()[0], (0.0, 30.0));
        let (a1, e1) = set.angles()[1];
        assert!((a1 - 17.142857).abs() < 1e-6);
        assert_eq!(e1, 0.0);
        assert_eq!(set.angles()[2].1, -30.0);
        assert_eq!(set.angles()[3].1, 30.0);
    }

    #[test]
    fn orbit_degenerate_cycle() {
        let set = orbit_eval_poses(3, &[0.0], &rig()).unwrap();
        assert_eq!(set.angles(), vec![(0.0, 0.0), (120.0, 0.0), (240.0, 0.0)]);
        assert!(orbit_eval_poses(0, &[0.0], &rig()).is_err());
        assert!(orbit_eval_poses(3, &[], &rig()).is_err());
    }

    #[test]
    fn random_viewpoints_deterministic_and_in_range() {
        let a = random_viewpoints(32, 7, ViewpointRanges::default(), &rig()).unwrap();
        let b = random_viewpoints(32, 7, ViewpointRanges::default(), &rig()).unwrap();
        assert_eq!(a, b);
        let c = random_viewpoints(32, 8, ViewpointRanges::default(), &rig()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let set = zero123pp_targets(0.0, &rig()).unwrap();
        let out = apply_augmentation(&set, 0.0, 1.0).unwrap();
        assert_eq!(out.poses, set.poses);
        let (out, _, scale) = augment_poses(&set, 3, 0.0).unwrap();
        assert_eq!(scale, 1.0);
        for (p, q) in out.poses.iter().zip(&set.poses) {
            assert_eq!(p.radius(), q.radius());
            assert_eq!(p.elevation_deg(), q.elevation_deg());
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let set = zero123pp_targets(15.0, &rig()).unwrap();
        let out = perturb_poses(&set, 11, 0.0, 0.0).unwrap();
        assert_eq!(out.poses, set.poses);
        let a = perturb_poses(&set, 11, 1.0, 0.02).unwrap();
        let b = perturb_poses(&set, 11, 1.0, 0.02).unwrap();
        assert_eq!(a, b);
        assert!(perturb_poses(&set, 11, -1.0, 0.0).is_err());
    }

    #[test]
    fn perturbation_keeps_poses_valid_at_extremes() {
        let rig = CameraRig {
            radius: 0.01,
            ..CameraRig::default()
        };
        let set = PoseSet {
            label: "t".into(),
            seed: None,
            poses: vec![rig.pose(0.0, 90.0).unwrap(), rig.pose(0.0, -89.9).unwrap()],
        };
        let out = perturb_poses(&set, 5, 30.0, 1.0).unwrap();
        for p in &out.poses {
            assert!((-90.0..=90.0).contains(&p.elevation_deg()));
            assert!(p.radius() > 0.0);
        }
    }
}
