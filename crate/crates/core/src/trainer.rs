//! Optimization of a Gaussian scene against calibrated images.
//!
//! Each iteration renders a reference view (round robin) and its selected neighbor,
//! evaluates the photometric loss and, once the geometric phase has started, the
//! single-view normal term, the multi-view photometric term and the two multi-view
//! geometric regularizers. Adjoints of both views are pushed through the renderer and
//! an Adam step is applied per parameter group.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{quat_from_normal, FlatGaussian, GaussianScene, MIN_OPACITY};
use crate::geometry::{axis_angle, Camera};
use crate::io::SceneDataset;
use crate::losses::{mvrgb_loss, photometric_loss, svgeo_loss};
use crate::raster::Image;
use crate::regularizers::{
    mdrr_loss, mne_loss, plaquette_normal, select_neighbor, BaselineBounds, GradientWeight,
    RegularizerConfig, ViewPair,
};
use crate::render::{render, render_backward, BufferAdjoint, RenderBuffers, SplatGradients};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at iteration {iteration}: {terms:?}")]
    Diverged { iteration: usize, terms: LossTerms },
    #[error("gradient became non-finite at iteration {0}")]
    NonFiniteGradient(usize),
    #[error("scene has no gaussians left at iteration {0}")]
    EmptyScene(usize),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("{0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub svgeo: f64,
    pub mvrgb: f64,
    pub dist: f64,
    pub nor: f64,
    pub dist_threshold: f64,
    pub nor_threshold: f64,
    pub normal_weight: GradientWeight,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            svgeo: 0.015,
            mvrgb: 0.15,
            dist: 0.03,
            nor: 0.015,
            dist_threshold: 0.03,
            nor_threshold: 0.52,
            normal_weight: GradientWeight::Edge,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { svgeo: 0.0, mvrgb: 0.0, dist: 0.0, nor: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = [self.svgeo, self.mvrgb, self.dist, self.nor];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(TrainError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.dist_threshold > 0.0 && self.nor_threshold > 0.0) {
            return Err(TrainError::InvalidConfig("thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate reached at the last iteration (exponential decay).
    pub position_final: f64,
    /// Multiply position rates by the camera extent of the dataset.
    pub scale_position_by_extent: bool,
    pub rotation: f64,
    /// Applied to log-scales.
    pub scale: f64,
    /// Applied to logit-opacity.
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale_position_by_extent: true,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            position_final: 0.0,
            scale_position_by_extent: false,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
            color: 0.0,
        }
    }
}

/// Seeding of the initial Gaussians from per-view depth maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub points_per_view: usize,
    /// Position noise relative to depth.
    pub position_noise: f64,
    /// Maximum random tilt of the initial normals.
    pub normal_noise_deg: f64,
    pub opacity: f64,
    /// In-plane scale relative to the expected sample spacing.
    pub scale_factor: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { points_per_view: 1500, position_noise: 0.01, normal_noise_deg: 20.0, opacity: 0.5, scale_factor: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub geometric_phase_start: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    pub prune_opacity_threshold: f64,
    pub prune_interval: usize,
    pub baseline: BaselineBounds,
    /// Opacity a pixel needs before its geometry enters the regularizers.
    pub min_alpha: f64,
    pub seed: u64,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 1000,
            geometric_phase_start: 300,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            prune_opacity_threshold: 0.005,
            prune_interval: 100,
            baseline: BaselineBounds::default(),
            min_alpha: 0.5,
            seed: 0,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 7000 photometric iterations followed by 23000 with all terms.
    pub fn full_schedule() -> Self {
        Self { total_iters: 30_000, geometric_phase_start: 7_000, ..Default::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.geometric_phase_start > self.total_iters {
            return Err(TrainError::InvalidConfig("geometric_phase_start exceeds total_iters".into()));
        }
        self.weights.validate()?;
        let lr = &self.learning_rates;
        let rates = [lr.position, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.color];
        if rates.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(TrainError::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if lr.position > 0.0 && !(lr.position_final > 0.0) {
            return Err(TrainError::InvalidConfig("position_final must be positive when position > 0".into()));
        }
        if self.prune_interval == 0 {
            return Err(TrainError::InvalidConfig("prune_interval must be positive".into()));
        }
        if !(self.baseline.min <= self.baseline.max) {
            return Err(TrainError::InvalidConfig("baseline.min exceeds baseline.max".into()));
        }
        Ok(())
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            dist_threshold: self.weights.dist_threshold,
            nor_threshold: self.weights.nor_threshold,
            min_alpha: self.min_alpha,
            normal_weight: self.weights.normal_weight,
            ..Default::default()
        }
    }
}

/// Values of every loss term for one iteration (unweighted, except `total`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub svgeo: f64,
    pub mvrgb: f64,
    pub dist: f64,
    pub nor: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.photometric, self.svgeo, self.mvrgb, self.dist, self.nor, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub reference: usize,
    pub neighbor: usize,
    pub terms: LossTerms,
}

pub const LOSS_CSV_HEADER: [&str; 7] = ["iteration", "photometric", "svgeo", "mvrgb", "dist", "nor", "total"];

impl LossRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let t = &self.terms;
        let f = |v: f64| format!("{v:?}");
        vec![self.iteration.to_string(), f(t.photometric), f(t.svgeo), f(t.mvrgb), f(t.dist), f(t.nor), f(t.total)]
    }
}

/// Everything needed to evaluate the objective on one view pair.
pub struct PairInput<'a> {
    pub ref_cam: &'a Camera,
    pub near_cam: &'a Camera,
    pub ref_image: &'a Image,
    pub near_image: &'a Image,
}

/// Objective value and parameter gradients for one view pair.
///
/// Geometric terms are always evaluated (for logging) but contribute to the value and
/// gradients only when `geometric` is set.
pub fn total_loss(
    scene: &GaussianScene,
    input: &PairInput,
    weights: &LossWeights,
    reg: &RegularizerConfig,
    geometric: bool,
) -> Result<(LossTerms, SplatGradients, u64), TrainError> {
    let (ref_buf, near_buf) = rayon::join(|| render(scene, input.ref_cam), || render(scene, input.near_cam));
    let (photo, d_color) = photometric_loss(&ref_buf.color, input.ref_image)?;
    let pair = ViewPair::new(input.ref_cam, input.near_cam, &ref_buf, &near_buf, input.ref_image, input.near_image);
    let sv = svgeo_loss(input.ref_cam, &ref_buf, input.ref_image, reg);
    let mv = mvrgb_loss(&pair, reg);
    let dist = mdrr_loss(&pair, reg);
    let nor = mne_loss(&pair, reg);

    let mut terms = LossTerms {
        photometric: photo,
        svgeo: sv.value,
        mvrgb: mv.value,
        dist: dist.value,
        nor: nor.value,
        total: photo,
    };
    let (w, h) = (ref_buf.width(), ref_buf.height());
    let mut adj_ref = BufferAdjoint::zeros(w, h);
    adj_ref.color = d_color;
    let mut adj_near = BufferAdjoint::zeros(near_buf.width(), near_buf.height());
    if geometric {
        terms.total += weights.svgeo * sv.value + weights.mvrgb * mv.value + weights.dist * dist.value + weights.nor * nor.value;
        for (res, wgt) in [(&sv, weights.svgeo), (&mv, weights.mvrgb), (&dist, weights.dist), (&nor, weights.nor)] {
            if wgt != 0.0 {
                adj_ref.add_scaled(&res.adjoint_ref, wgt);
                adj_near.add_scaled(&res.adjoint_near, wgt);
            }
        }
    }
    let (g_ref, g_near) = rayon::join(
        || render_backward(scene, input.ref_cam, &ref_buf, &adj_ref),
        || render_backward(scene, input.near_cam, &near_buf, &adj_near),
    );
    let mut grads = g_ref?;
    grads.add_scaled(&g_near?, 1.0);
    let fingerprint = structure_fingerprint(&[&ref_buf, &near_buf], &[sv.fingerprint, mv.fingerprint, dist.fingerprint, nor.fingerprint]);
    Ok((terms, grads, fingerprint))
}

fn structure_fingerprint(buffers: &[&RenderBuffers], extra: &[u64]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for b in buffers {
        b.structure_fingerprint().hash(&mut h);
    }
    extra.hash(&mut h);
    h.finish()
}

/// First and second moments per parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<[f64; 14]>,
    pub v: Vec<[f64; 14]>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![[0.0; 14]; n], v: vec![[0.0; 14]; n], step: 0 }
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut k = 0;
        self.m.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        k = 0;
        self.v.retain(|_| {
            k += 1;
            keep[k - 1]
        });
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub adam: AdamState,
    /// Number of completed iterations.
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    /// Multiplier applied to position learning rates.
    pub position_lr_scale: f64,
}

impl TrainState {
    pub fn new(scene: GaussianScene, position_lr_scale: f64) -> Self {
        let adam = AdamState::new(scene.len());
        Self { scene, adam, iteration: 0, history: Vec::new(), position_lr_scale }
    }

    /// Terms recorded at iteration `it`, if present.
    pub fn record(&self, it: usize) -> Option<&LossRecord> {
        self.history.iter().find(|r| r.iteration == it)
    }
}

/// Radius of the camera centers around their mean, enlarged by 10%.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.pose.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len().max(1) as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 { 1.1 * r } else { 1.0 }
}

fn position_lr(cfg: &LearningRates, scale: f64, iteration: usize, total: usize) -> f64 {
    if cfg.position == 0.0 {
        return 0.0;
    }
    let t = if total > 1 { (iteration as f64 / (total - 1) as f64).clamp(0.0, 1.0) } else { 0.0 };
    (cfg.position.ln() * (1.0 - t) + cfg.position_final.ln() * t).exp() * scale
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One Adam step. Scales are updated in log space and opacity in logit space; the
/// remaining coordinates directly. Groups with a zero learning rate are left untouched.
pub fn adam_step(
    scene: &mut GaussianScene,
    adam: &mut AdamState,
    grads: &SplatGradients,
    rates: &LearningRates,
    position_rate: f64,
) {
    adam.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(adam.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(adam.step as i32);
    let lr_of = |c: usize| match c {
        0..=2 => position_rate,
        3..=6 => rates.rotation,
        7..=9 => rates.scale,
        10 => rates.opacity,
        _ => rates.color,
    };
    for (k, g) in scene.gaussians.iter_mut().enumerate() {
        let raw = grads.coordinates(k);
        let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
        let mut delta = [0.0; 14];
        for c in 0..14 {
            let lr = lr_of(c);
            if lr == 0.0 {
                continue;
            }
            let grad = match c {
                7..=9 => raw[c] * g.scales[c - 7],
                10 => raw[c] * g.opacity * (1.0 - g.opacity),
                _ => raw[c],
            };
            m[c] = ADAM_BETA1 * m[c] + (1.0 - ADAM_BETA1) * grad;
            v[c] = ADAM_BETA2 * v[c] + (1.0 - ADAM_BETA2) * grad * grad;
            delta[c] = -lr * (m[c] / bc1) / ((v[c] / bc2).sqrt() + ADAM_EPS);
        }
        if position_rate != 0.0 {
            g.position += Vector3::new(delta[0], delta[1], delta[2]);
        }
        if rates.rotation != 0.0 {
            g.rotation += Vector4::new(delta[3], delta[4], delta[5], delta[6]);
            g.rotation /= g.rotation.norm();
        }
        if rates.scale != 0.0 {
            for a in 0..3 {
                g.scales[a] *= delta[7 + a].exp();
            }
        }
        if rates.opacity != 0.0 {
            let logit = (g.opacity / (1.0 - g.opacity)).ln();
            g.opacity = sigmoid(logit + delta[10]);
        }
        if rates.color != 0.0 {
            g.color += Vector3::new(delta[11], delta[12], delta[13]);
        }
        clamp_parameters(g);
    }
}

/// Clamps every field into its valid domain; a no-op on valid parameters.
fn clamp_parameters(g: &mut FlatGaussian) {
    if !g.satisfies_invariants() {
        g.enforce_invariants();
    }
    g.opacity = g.opacity.clamp(MIN_OPACITY, 1.0 - 1e-9);
    g.color = g.color.map(|c| c.clamp(0.0, 1.0));
}

/// Removes Gaussians with opacity below `threshold`; returns how many were removed.
pub fn prune(state: &mut TrainState, threshold: f64) -> usize {
    let keep: Vec<bool> = state.scene.gaussians.iter().map(|g| g.opacity >= threshold).collect();
    let removed = keep.iter().filter(|k| !**k).count();
    if removed > 0 {
        let mut k = 0;
        state.scene.gaussians.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        state.adam.retain(&keep);
    }
    removed
}

/// Called after every iteration; returning an error stops training.
pub trait TrainObserver {
    fn after_iteration(&mut self, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(config: &TrainConfig, scene: GaussianScene, dataset: &SceneDataset) -> Result<TrainState, TrainError> {
    train_with(config, scene, dataset, &mut ())
}

pub fn train_with(
    config: &TrainConfig,
    scene: GaussianScene,
    dataset: &SceneDataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let n = dataset.len();
    if n < 2 {
        return Err(TrainError::TooFewViews(n));
    }
    let scale = if config.learning_rates.scale_position_by_extent { camera_extent(&dataset.cameras) } else { 1.0 };
    let mut state = TrainState::new(scene, scale);
    let reg = config.regularizer();
    let neighbors: Vec<usize> = (0..n)
        .map(|r| select_neighbor(&dataset.cameras, r, &config.baseline).expect("at least two cameras"))
        .collect();

    while state.iteration < config.total_iters {
        let it = state.iteration;
        if state.scene.is_empty() {
            return Err(TrainError::EmptyScene(it));
        }
        let r = it % n;
        let nb = neighbors[r];
        let input = PairInput {
            ref_cam: &dataset.cameras[r],
            near_cam: &dataset.cameras[nb],
            ref_image: &dataset.images[r],
            near_image: &dataset.images[nb],
        };
        let geometric = it >= config.geometric_phase_start;
        let (terms, grads, _) = total_loss(&state.scene, &input, &config.weights, &reg, geometric)?;
        if !terms.is_finite() {
            return Err(TrainError::Diverged { iteration: it, terms });
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFiniteGradient(it));
        }
        state.history.push(LossRecord { iteration: it, reference: r, neighbor: nb, terms });
        let lr_pos = position_lr(&config.learning_rates, state.position_lr_scale, it, config.total_iters);
        adam_step(&mut state.scene, &mut state.adam, &grads, &config.learning_rates, lr_pos);
        state.iteration += 1;
        if state.iteration % config.prune_interval == 0 {
            let removed = prune(&mut state, config.prune_opacity_threshold);
            if removed > 0 {
                log::debug!("iteration {}: pruned {removed} gaussians", state.iteration);
            }
        }
        if state.iteration % 100 == 0 || state.iteration == config.total_iters {
            log::info!(
                "iteration {} photometric {:.5} dist {:.3e} nor {:.3e} gaussians {}",
                state.iteration,
                terms.photometric,
                terms.dist,
                terms.nor,
                state.scene.len()
            );
        }
        observer.after_iteration(&state)?;
    }
    Ok(state)
}

/// Initial Gaussians from per-view depth maps: random valid pixels are back-projected
/// with positional noise, take the pixel color, a noisy depth-derived normal facing away
/// from the camera and an in-plane scale matching the sample spacing.
///
/// Views without depth are skipped; if no view has depth, points are scattered in a ball
/// around the point closest to all optical axes.
pub fn initialize_scene(dataset: &SceneDataset, cfg: &InitConfig, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut gaussians = Vec::new();
    let max_tilt = cfg.normal_noise_deg.to_radians();
    for (k, cam) in dataset.cameras.iter().enumerate() {
        let Some(Some(depth)) = dataset.depths.get(k) else { continue };
        let (w, h) = depth.dims();
        let valid: Vec<(usize, usize)> =
            (0..h).flat_map(|j| (0..w).map(move |i| (i, j))).filter(|&(i, j)| *depth.get(i, j) > 0.0).collect();
        if valid.is_empty() {
            continue;
        }
        let spacing_px = ((valid.len() as f64) / cfg.points_per_view.max(1) as f64).sqrt();
        for _ in 0..cfg.points_per_view {
            let (i, j) = valid[rng.random_range(0..valid.len())];
            let z = *depth.get(i, j);
            let p_cam = cam.intrinsics.pixel_ray(i, j) * z;
            let noise = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
            let position = cam.pose.camera_to_world(&(p_cam + noise * cfg.position_noise * z));
            let n_cam = plaquette_normal(depth, &cam.intrinsics, i, j).unwrap_or(Vector3::z());
            let mut normal = cam.pose.camera_to_world_rotation() * n_cam;
            if max_tilt > 0.0 {
                let axis = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
                if axis.norm() > 1e-9 {
                    let angle = rng.random_range(0.0..max_tilt);
                    normal = axis_angle(&axis.cross(&normal), angle) * normal;
                }
            }
            let s = cfg.scale_factor * spacing_px * z / cam.intrinsics.fx;
            let color = *dataset.images[k].get(i, j);
            gaussians.push(FlatGaussian::new(position, quat_from_normal(&normal), Vector3::new(s, s, 1e-3 * s), cfg.opacity, color));
        }
    }
    if gaussians.is_empty() {
        gaussians = scatter_init(dataset, cfg, &mut rng);
    }
    GaussianScene::new(gaussians, Vector3::zeros())
}

fn scatter_init(dataset: &SceneDataset, cfg: &InitConfig, rng: &mut ChaCha8Rng) -> Vec<FlatGaussian> {
    // least-squares point closest to all optical axes
    let mut a = nalgebra::Matrix3::zeros();
    let mut b = Vector3::zeros();
    for cam in &dataset.cameras {
        let d = cam.pose.forward();
        let p = nalgebra::Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * cam.pose.center();
    }
    let center = a.try_inverse().map(|inv| inv * b).unwrap_or_else(Vector3::zeros);
    let mean_dist = dataset.cameras.iter().map(|c| (c.pose.center() - center).norm()).sum::<f64>()
        / dataset.cameras.len() as f64;
    let radius = 0.5 * mean_dist;
    let count = cfg.points_per_view * dataset.len();
    let spacing = radius * (4.0 * std::f64::consts::PI / count.max(1) as f64).sqrt();
    (0..count)
        .map(|_| {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let p = center + dir * radius;
            let nearest = dataset
                .cameras
                .iter()
                .map(|c| c.pose.center())
                .min_by(|x, y| (x - p).norm().total_cmp(&(y - p).norm()))
                .unwrap();
            let normal = (p - nearest).normalize();
            let s = cfg.scale_factor * spacing;
            FlatGaussian::new(p, quat_from_normal(&normal), Vector3::new(s, s, 1e-3 * s), cfg.opacity, Vector3::repeat(0.5))
        })
        .collect()
}
