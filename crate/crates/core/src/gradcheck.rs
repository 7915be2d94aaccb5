//! Central finite-difference checks of scene gradients.
//!
//! The renderer and the losses are piecewise smooth: cutoffs, early termination,
//! masks, rounding and bilinear cell changes switch between smooth branches. Each
//! objective therefore reports a fingerprint of its discrete decisions alongside its
//! value. When the perturbed evaluations land on a different branch than the base
//! point, the step is halved until both agree; coordinates that sit on a kink even at
//! the smallest step are reported as non-smooth and excluded from the comparison.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::gaussian::{quat_from_normal, FlatGaussian, GaussianScene};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};
use crate::losses::{mvrgb_loss, photometric_loss, svgeo_loss};
use crate::raster::{Image, Raster};
use crate::regularizers::{mdrr_loss, mne_loss, GradientWeight, RegularizerConfig, ViewPair};
use crate::render::{parameter_mut, render, render_backward, BufferAdjoint, SplatGradients, PARAMETER_NAMES};
use crate::trainer::{total_loss, LossWeights, PairInput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// How often the step may be halved to stay on one smooth branch.
    pub max_halvings: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, rel_tol: 1e-3, abs_tol: 1e-6, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub gaussian: usize,
    pub coordinate: usize,
    pub analytic: f64,
    /// `None` when no step kept the stencil on one smooth branch.
    pub numeric: Option<f64>,
    pub step: f64,
}

impl CoordinateCheck {
    /// Error scaled so that 1.0 sits exactly at the tolerance `max(rel |g|, abs)`,
    /// then multiplied by `rel_tol`: values below `rel_tol` pass.
    pub fn scaled_error(&self, cfg: &GradCheckConfig) -> Option<f64> {
        self.numeric.map(|n| {
            let bound = (cfg.rel_tol * self.analytic.abs().max(n.abs())).max(cfg.abs_tol);
            (self.analytic - n).abs() / bound * cfg.rel_tol
        })
    }

    pub fn name(&self) -> &'static str {
        PARAMETER_NAMES[self.coordinate]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().filter_map(|c| c.scaled_error(&self.config)).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CoordinateCheck> {
        self.checks.iter().filter(|c| c.scaled_error(&self.config).is_some_and(|e| e > self.config.rel_tol)).collect()
    }

    pub fn non_smooth(&self) -> usize {
        self.checks.iter().filter(|c| c.numeric.is_none()).count()
    }

    /// Coordinates compared whose gradient exceeds the absolute tolerance.
    pub fn significant(&self) -> usize {
        self.checks.iter().filter(|c| c.numeric.is_some() && c.analytic.abs() > self.config.abs_tol).count()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Compares `analytic` with central differences of `objective` (steps h and h/2, extrapolated) for every coordinate of
/// every Gaussian. `objective` returns the value and a fingerprint of its discrete state.
pub fn check_gradients<F>(scene: &GaussianScene, analytic: &SplatGradients, objective: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&GaussianScene) -> (f64, u64) + Sync,
{
    let (_, base_fp) = objective(scene);
    let coords: Vec<(usize, usize)> = (0..scene.len()).flat_map(|k| (0..14).map(move |c| (k, c))).collect();
    let checks = coords
        .par_iter()
        .map(|&(k, c)| {
            let mut step = cfg.step;
            let mut numeric = None;
            for _ in 0..=cfg.max_halvings {
                let eval = |delta: f64| {
                    let mut s = scene.clone();
                    *parameter_mut(&mut s.gaussians[k], c) += delta;
                    objective(&s)
                };
                let stencil = [eval(step), eval(-step), eval(0.5 * step), eval(-0.5 * step)];
                if stencil.iter().all(|&(_, fp)| fp == base_fp) {
                    let wide = (stencil[0].0 - stencil[1].0) / (2.0 * step);
                    let narrow = (stencil[2].0 - stencil[3].0) / step;
                    // Richardson step cancels the h^2 truncation term
                    numeric = Some((4.0 * narrow - wide) / 3.0);
                    break;
                }
                step *= 0.5;
            }
            CoordinateCheck { gaussian: k, coordinate: c, analytic: analytic.coordinates(k)[c], numeric, step }
        })
        .collect();
    GradCheckReport { config: *cfg, checks }
}

/// Loss whose gradient is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Photometric,
    Svgeo,
    Mvrgb,
    Dist,
    Normal,
    /// Weighted sum of every term with geometric terms enabled.
    Total,
}

impl Objective {
    pub const ALL: [Objective; 6] =
        [Objective::Photometric, Objective::Svgeo, Objective::Mvrgb, Objective::Dist, Objective::Normal, Objective::Total];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Photometric => "photometric",
            Objective::Svgeo => "svgeo",
            Objective::Mvrgb => "mvrgb",
            Objective::Dist => "dist",
            Objective::Normal => "nor",
            Objective::Total => "total",
        }
    }
}

/// Two views of a small random scene with target images.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub scene: GaussianScene,
    pub cameras: [Camera; 2],
    pub images: [Image; 2],
}

/// Up to `count` Gaussians scattered near the plane `z = 5` with small tilts, seen by
/// two 16x16-ish cameras. Positions and tilts stay small enough that the geometric
/// losses keep a good share of unmasked pixels.
pub fn random_fixture(seed: u64, count: usize, size: usize) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..count)
        .map(|_| {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 5.0 + rng.random_range(-0.01..0.01));
            let tilt = Vector3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), 1.0);
            let mut q = quat_from_normal(&tilt);
            // spin about the normal so in-plane axes differ between primitives
            let spin: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let spin_q = nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spin);
            let base = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            let r = base * spin_q;
            q = nalgebra::Vector4::new(r.w, r.i, r.j, r.k);
            let sx: f64 = rng.random_range(0.35..0.7);
            let sy: f64 = rng.random_range(0.35..0.7);
            let s = Vector3::new(sx, sy, 1e-3 * sx.min(sy));
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            FlatGaussian::new(p, q, s, rng.random_range(0.6..0.95), color)
        })
        .collect();
    let scene = GaussianScene::new(gaussians, Vector3::new(0.1, 0.1, 0.1));
    let intr = CameraIntrinsics::centered(size as f64 * 1.6, size, size);
    let up = -Vector3::y();
    let a = CameraPose::look_at(Vector3::new(-0.15, 0.05, 0.0), Vector3::new(0.0, 0.0, 5.0), up).unwrap();
    let b = CameraPose::look_at(Vector3::new(0.25, -0.1, 0.05), Vector3::new(0.05, 0.0, 5.0), up).unwrap();
    let cameras = [Camera::new(intr, a), Camera::new(intr, b)];
    let images = [0, 1].map(|_| Raster::from_fn(size, size, |i, j| {
        let x = i as f64 / size as f64;
        let y = j as f64 / size as f64;
        Vector3::new(0.5 + 0.4 * (6.0 * x).sin(), 0.5 + 0.4 * (5.0 * y).cos(), 0.3 + 0.5 * x * y)
    }));
    GradFixture { scene, cameras, images }
}

fn reg_config(obj: Objective) -> RegularizerConfig {
    RegularizerConfig {
        normal_weight: if obj == Objective::Normal { GradientWeight::Flat } else { GradientWeight::Edge },
        ..Default::default()
    }
}

/// Value, gradient and structure fingerprint of `obj` on the fixture's two views.
pub fn evaluate(fx: &GradFixture, scene: &GaussianScene, obj: Objective) -> (f64, SplatGradients, u64) {
    let reg = reg_config(obj);
    if obj == Objective::Total {
        let input = PairInput { ref_cam: &fx.cameras[0], near_cam: &fx.cameras[1], ref_image: &fx.images[0], near_image: &fx.images[1] };
        let (terms, grads, fp) = total_loss(scene, &input, &LossWeights::default(), &reg, true).expect("fixture renders");
        return (terms.total, grads, fp);
    }
    let [c0, c1] = &fx.cameras;
    let b0 = render(scene, c0);
    let b1 = render(scene, c1);
    let (w, h) = (b0.width(), b0.height());
    let mut a0 = BufferAdjoint::zeros(w, h);
    let mut a1 = BufferAdjoint::zeros(w, h);
    let (value, loss_fp) = match obj {
        Objective::Photometric => {
            let (v, g) = photometric_loss(&b0.color, &fx.images[0]).expect("matching sizes");
            a0.color = g;
            (v, 0)
        }
        Objective::Svgeo => {
            let r = svgeo_loss(c0, &b0, &fx.images[0], &reg);
            a0 = r.adjoint_ref;
            (r.value, r.fingerprint)
        }
        _ => {
            let pair = ViewPair::new(c0, c1, &b0, &b1, &fx.images[0], &fx.images[1]);
            let r = match obj {
                Objective::Mvrgb => mvrgb_loss(&pair, &reg),
                Objective::Dist => mdrr_loss(&pair, &reg),
                _ => mne_loss(&pair, &reg),
            };
            a0 = r.adjoint_ref;
            a1 = r.adjoint_near;
            (r.value, r.fingerprint)
        }
    };
    let mut grads = render_backward(scene, c0, &b0, &a0).expect("same scene");
    grads.add_scaled(&render_backward(scene, c1, &b1, &a1).expect("same scene"), 1.0);
    use std::hash::{Hash, Hasher};
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    (b0.structure_fingerprint(), b1.structure_fingerprint(), loss_fp).hash(&mut hasher);
    (value, grads, hasher.finish())
}

/// Checks one objective on a random fixture.
pub fn check_objective(seed: u64, count: usize, size: usize, obj: Objective, cfg: &GradCheckConfig) -> (f64, GradCheckReport) {
    let fx = random_fixture(seed, count, size);
    let (value, grads, _) = evaluate(&fx, &fx.scene, obj);
    let report = check_gradients(
        &fx.scene,
        &grads,
        |s| {
            let (v, _, fp) = evaluate(&fx, s, obj);
            (v, fp)
        },
        cfg,
    );
    (value, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_objective_passes_and_wrong_gradient_fails() {
        let fx = random_fixture(1, 3, 12);
        let (_, grads, _) = evaluate(&fx, &fx.scene, Objective::Photometric);
        let cfg = GradCheckConfig::default();
        let f = |s: &GaussianScene| {
            let (v, _, fp) = evaluate(&fx, s, Objective::Photometric);
            (v, fp)
        };
        let report = check_gradients(&fx.scene, &grads, f, &cfg);
        assert!(report.passed(), "max error {}", report.max_error());
        assert!(report.significant() > 10);

        let mut wrong = grads.clone();
        wrong.color[0].x += 0.1;
        assert!(!check_gradients(&fx.scene, &wrong, f, &cfg).passed());
    }
}
