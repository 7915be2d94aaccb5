//! Differentiable CPU rasterizer for flat Gaussians.
//!
//! The forward pass sorts visible primitives globally by camera-space depth and
//! alpha-composites color, camera-frame normal, plane distance and opacity per pixel.
//! Depth is derived from the composited distance and normal, `D = dist / (N . K^-1 p)`,
//! and never blended on its own. Every pixel keeps its contributor list so the
//! backward pass can replay the compositing exactly.
//!
//! Rows are processed in fixed-size chunks and per-chunk gradient partials are reduced
//! in chunk order, so results do not depend on the number of worker threads.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{
    projection_jacobian, quat_to_matrix, quat_to_matrix_backward, FlatGaussian, GaussianScene,
    COVARIANCE_FLOOR, NEAR_PLANE,
};
use crate::geometry::{pixel_center, Camera};
use crate::raster::{Image, Raster, ScalarMap, VectorMap};

pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Mahalanobis distance beyond which a primitive is ignored.
pub const MAHALANOBIS_CUTOFF: f64 = 6.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const ALPHA_CLAMP: f64 = 0.99;
/// Minimum `|N . K^-1 p|` for a valid depth.
pub const DEPTH_DENOM_EPS: f64 = 1e-4;

const ROW_CHUNK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("buffers were rendered from a different scene or camera")]
    ProvenanceMismatch,
    #[error("adjoint maps are {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
}

/// Screen-space data of one visible primitive.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub cam_position: Vector3<f64>,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub normal_cam: Vector3<f64>,
    pub distance: f64,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]`.
    pub bounds: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance in front of this primitive.
    pub transmittance: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub color: Image,
    /// Alpha-blended camera-frame normals, not renormalized.
    pub normal: VectorMap,
    pub distance: ScalarMap,
    /// Zero where `depth_valid` is false.
    pub depth: ScalarMap,
    pub depth_valid: Raster<bool>,
    pub alpha: ScalarMap,
    pub final_transmittance: ScalarMap,
    projected: Vec<Option<Projected>>,
    offsets: Vec<usize>,
    contributors: Vec<Contributor>,
    provenance: u64,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Front-to-back contributors of pixel `(i, j)`.
    pub fn contributors(&self, i: usize, j: usize) -> &[Contributor] {
        let k = j * self.width() + i;
        &self.contributors[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn projected(&self, index: usize) -> Option<&Projected> {
        self.projected.get(index).and_then(|p| p.as_ref())
    }

    /// Hash of every discrete decision taken by the forward pass (which primitives
    /// contribute where, in which order, clamp states, depth validity). Two renders with
    /// equal fingerprints lie on the same smooth branch of the forward function.
    pub fn structure_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for c in &self.contributors {
            c.gaussian.hash(&mut h);
            c.clamped.hash(&mut h);
        }
        self.offsets.hash(&mut h);
        self.depth_valid.data().hash(&mut h);
        h.finish()
    }
}

/// Per-pixel gradients of a scalar loss with respect to each rendered map.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferAdjoint {
    pub color: Image,
    pub normal: VectorMap,
    pub distance: ScalarMap,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

impl BufferAdjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Raster::filled(width, height, Vector3::zeros()),
            normal: Raster::filled(width, height, Vector3::zeros()),
            distance: Raster::filled(width, height, 0.0),
            depth: Raster::filled(width, height, 0.0),
            alpha: Raster::filled(width, height, 0.0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &BufferAdjoint, scale: f64) {
        fn axpy<T>(a: &mut Raster<T>, b: &Raster<T>, s: f64)
        where
            T: Clone + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
        {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y.clone() * s;
            }
        }
        axpy(&mut self.color, &other.color, scale);
        axpy(&mut self.normal, &other.normal, scale);
        axpy(&mut self.distance, &other.distance, scale);
        axpy(&mut self.depth, &other.depth, scale);
        axpy(&mut self.alpha, &other.alpha, scale);
    }

    pub fn is_finite(&self) -> bool {
        self.color.data().iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.normal.data().iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.distance.data().iter().all(|x| x.is_finite())
            && self.depth.data().iter().all(|x| x.is_finite())
            && self.alpha.data().iter().all(|x| x.is_finite())
    }
}

/// Gradients with respect to every primitive parameter, parallel to the scene list.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn add_scaled(&mut self, other: &SplatGradients, s: f64) {
        for k in 0..self.len() {
            self.position[k] += other.position[k] * s;
            self.rotation[k] += other.rotation[k] * s;
            self.scales[k] += other.scales[k] * s;
            self.opacity[k] += other.opacity[k] * s;
            self.color[k] += other.color[k] * s;
        }
    }

    /// The 14 gradient coordinates of primitive `k` in the order
    /// position, rotation, scales, opacity, color.
    pub fn coordinates(&self, k: usize) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[0..3].copy_from_slice(self.position[k].as_slice());
        out[3..7].copy_from_slice(self.rotation[k].as_slice());
        out[7..10].copy_from_slice(self.scales[k].as_slice());
        out[10] = self.opacity[k];
        out[11..14].copy_from_slice(self.color[k].as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        (0..self.len()).all(|k| self.coordinates(k).iter().all(|v| v.is_finite()))
    }
}

/// Mutable access to parameter `coord` (0..14, same order as
/// [`SplatGradients::coordinates`]) of a primitive.
pub fn parameter_mut(g: &mut FlatGaussian, coord: usize) -> &mut f64 {
    match coord {
        0..=2 => &mut g.position[coord],
        3..=6 => &mut g.rotation[coord - 3],
        7..=9 => &mut g.scales[coord - 7],
        10 => &mut g.opacity,
        11..=13 => &mut g.color[coord - 11],
        _ => panic!("parameter coordinate {coord} out of range"),
    }
}

pub const PARAMETER_NAMES: [&str; 14] = [
    "mu.x", "mu.y", "mu.z", "q.w", "q.x", "q.y", "q.z", "s.x", "s.y", "s.z", "opacity", "c.r",
    "c.g", "c.b",
];

fn provenance(scene: &GaussianScene, cam: &Camera) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for g in &scene.gaussians {
        g.position.iter().for_each(|&v| put(v));
        g.rotation.iter().for_each(|&v| put(v));
        g.scales.iter().for_each(|&v| put(v));
        put(g.opacity);
        g.color.iter().for_each(|&v| put(v));
    }
    scene.background.iter().for_each(|&v| put(v));
    let k = &cam.intrinsics;
    [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64].iter().for_each(|&v| put(v));
    cam.pose.rotation.iter().chain(cam.pose.translation.iter()).for_each(|&v| put(v));
    h.finish()
}

/// Screen-space projection of one primitive, `None` when culled.
pub fn project_gaussian(g: &FlatGaussian, cam: &Camera) -> Option<Projected> {
    let w = &cam.pose.rotation;
    let t = cam.pose.world_to_camera(&g.position);
    if !(t.z > NEAR_PLANE) || !(g.opacity >= ALPHA_CUTOFF) {
        return None;
    }
    let k = &cam.intrinsics;
    let r = quat_to_matrix(&g.rotation);
    let s2 = g.scales.component_mul(&g.scales);
    let cov3 = r * Matrix3::from_diagonal(&s2) * r.transpose();
    let j = projection_jacobian(&t, k.fx, k.fy);
    let cov2d = j * w * cov3 * w.transpose() * j.transpose() + Matrix2::identity() * COVARIANCE_FLOOR;
    let conic = cov2d.try_inverse()?;
    let mean2d = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    let normal_cam = w * r.column(2);
    let distance = normal_cam.dot(&t);

    // squared Mahalanobis radius beyond which alpha < cutoff
    let m_max = (2.0 * (g.opacity / ALPHA_CUTOFF).ln()).min(MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF);
    let rx = (m_max * cov2d[(0, 0)]).sqrt();
    let ry = (m_max * cov2d[(1, 1)]).sqrt();
    let lo_x = (mean2d.x - rx - 0.5).ceil();
    let hi_x = (mean2d.x + rx - 0.5).floor();
    let lo_y = (mean2d.y - ry - 0.5).ceil();
    let hi_y = (mean2d.y + ry - 0.5).floor();
    let (wd, ht) = (k.width as f64, k.height as f64);
    if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x < wd && lo_y < ht) {
        return None;
    }
    let bounds = [
        lo_x.max(0.0) as usize,
        hi_x.min(wd - 1.0) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min(ht - 1.0) as usize,
    ];
    Some(Projected { cam_position: t, mean2d, cov2d, conic, normal_cam, distance, bounds })
}

/// Opacity of a primitive at continuous pixel `p`, before the cutoff rules. Returns the
/// unclamped value `sigma * exp(-m / 2)` and the squared Mahalanobis distance `m`.
#[inline]
fn raw_alpha(opacity: f64, proj: &Projected, p: Vector2<f64>) -> (f64, f64) {
    let d = p - proj.mean2d;
    let m = (d.transpose() * proj.conic * d)[0];
    (opacity * (-0.5 * m).exp(), m)
}

/// `alpha_i = min(sigma * exp(-m/2), 0.99)` at pixel `p`, or `None` when the contribution
/// falls under the Mahalanobis or opacity cutoff.
pub fn evaluate_alpha(g: &FlatGaussian, proj: &Projected, p: Vector2<f64>) -> Option<f64> {
    let (a, m) = raw_alpha(g.opacity, proj, p);
    if m > MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF || a < ALPHA_CUTOFF {
        return None;
    }
    Some(a.min(ALPHA_CLAMP))
}

struct RowOut {
    color: Vec<Vector3<f64>>,
    normal: Vec<Vector3<f64>>,
    distance: Vec<f64>,
    alpha: Vec<f64>,
    final_t: Vec<f64>,
    counts: Vec<usize>,
    contributors: Vec<Contributor>,
}

pub fn render(scene: &GaussianScene, cam: &Camera) -> RenderBuffers {
    let (width, height) = (cam.width(), cam.height());
    let projected: Vec<Option<Projected>> =
        scene.gaussians.par_iter().map(|g| project_gaussian(g, cam)).collect();

    let mut order: Vec<usize> = (0..projected.len()).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let za = projected[a].as_ref().unwrap().cam_position.z;
        let zb = projected[b].as_ref().unwrap().cam_position.z;
        za.total_cmp(&zb).then(a.cmp(&b))
    });

    let mut row_lists: Vec<Vec<u32>> = vec![Vec::new(); height];
    for &i in &order {
        let b = projected[i].as_ref().unwrap().bounds;
        for list in &mut row_lists[b[2]..=b[3]] {
            list.push(i as u32);
        }
    }

    let rows: Vec<RowOut> = (0..height)
        .into_par_iter()
        .map(|j| {
            let mut out = RowOut {
                color: Vec::with_capacity(width),
                normal: Vec::with_capacity(width),
                distance: Vec::with_capacity(width),
                alpha: Vec::with_capacity(width),
                final_t: Vec::with_capacity(width),
                counts: Vec::with_capacity(width),
                contributors: Vec::new(),
            };
            for i in 0..width {
                let p = pixel_center(i, j);
                let mut t = 1.0;
                let mut c = Vector3::zeros();
                let mut n = Vector3::zeros();
                let mut d = 0.0;
                let before = out.contributors.len();
                for &gi in &row_lists[j] {
                    let proj = projected[gi as usize].as_ref().unwrap();
                    if i < proj.bounds[0] || i > proj.bounds[1] {
                        continue;
                    }
                    let g = &scene.gaussians[gi as usize];
                    let (a, m) = raw_alpha(g.opacity, proj, p);
                    if m > MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF || a < ALPHA_CUTOFF {
                        continue;
                    }
                    let clamped = a > ALPHA_CLAMP;
                    let alpha = a.min(ALPHA_CLAMP);
                    let w = t * alpha;
                    c += g.color * w;
                    n += proj.normal_cam * w;
                    d += proj.distance * w;
                    out.contributors.push(Contributor { gaussian: gi, alpha, transmittance: t, clamped });
                    t *= 1.0 - alpha;
                    if t < TRANSMITTANCE_STOP {
                        break;
                    }
                }
                out.color.push(c + scene.background * t);
                out.normal.push(n);
                out.distance.push(d);
                out.alpha.push(1.0 - t);
                out.final_t.push(t);
                out.counts.push(out.contributors.len() - before);
            }
            out
        })
        .collect();

    let npix = width * height;
    let mut color = Vec::with_capacity(npix);
    let mut normal = Vec::with_capacity(npix);
    let mut distance = Vec::with_capacity(npix);
    let mut alpha = Vec::with_capacity(npix);
    let mut final_t = Vec::with_capacity(npix);
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut contributors = Vec::new();
    offsets.push(0);
    for row in rows {
        color.extend(row.color);
        normal.extend(row.normal);
        distance.extend(row.distance);
        alpha.extend(row.alpha);
        final_t.extend(row.final_t);
        for count in row.counts {
            offsets.push(offsets.last().unwrap() + count);
        }
        contributors.extend(row.contributors);
    }

    let normal = Raster::from_vec(width, height, normal);
    let distance = Raster::from_vec(width, height, distance);
    let alpha = Raster::from_vec(width, height, alpha);
    let mut depth = Raster::filled(width, height, 0.0);
    let mut depth_valid = Raster::filled(width, height, false);
    for j in 0..height {
        for i in 0..width {
            let denom = normal.get(i, j).dot(&cam.intrinsics.pixel_ray(i, j));
            if *alpha.get(i, j) > 0.0 && denom.abs() > DEPTH_DENOM_EPS {
                let z = distance.get(i, j) / denom;
                if z > 0.0 {
                    depth.set(i, j, z);
                    depth_valid.set(i, j, true);
                }
            }
        }
    }

    RenderBuffers {
        color: Raster::from_vec(width, height, color),
        normal,
        distance,
        depth,
        depth_valid,
        alpha,
        final_transmittance: Raster::from_vec(width, height, final_t),
        projected,
        offsets,
        contributors,
        provenance: provenance(scene, cam),
    }
}

/// Gradient with respect to the screen-space quantities of one primitive.
#[derive(Debug, Clone, Copy)]
struct ProjectedGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    normal_cam: Vector3<f64>,
    distance: f64,
    color: Vector3<f64>,
    opacity: f64,
}

impl ProjectedGrad {
    fn zero() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            normal_cam: Vector3::zeros(),
            distance: 0.0,
            color: Vector3::zeros(),
            opacity: 0.0,
        }
    }

    fn add(&mut self, o: &ProjectedGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.normal_cam += o.normal_cam;
        self.distance += o.distance;
        self.color += o.color;
        self.opacity += o.opacity;
    }
}

/// Exact gradients of a scalar loss, given its adjoint with respect to each rendered map.
pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    buffers: &RenderBuffers,
    adjoint: &BufferAdjoint,
) -> Result<SplatGradients, RenderError> {
    let (width, height) = (buffers.width(), buffers.height());
    if adjoint.dims() != (width, height) {
        return Err(RenderError::DimensionMismatch { expected: (width, height), got: adjoint.dims() });
    }
    if provenance(scene, cam) != buffers.provenance {
        return Err(RenderError::ProvenanceMismatch);
    }
    let n = scene.len();

    let chunks: Vec<Vec<ProjectedGrad>> = (0..height.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![ProjectedGrad::zero(); n];
            let rows = chunk * ROW_CHUNK..((chunk + 1) * ROW_CHUNK).min(height);
            for j in rows {
                for i in 0..width {
                    pixel_backward(scene, cam, buffers, adjoint, i, j, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut total = vec![ProjectedGrad::zero(); n];
    for part in &chunks {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }

    let mut grads = SplatGradients::zeros(n);
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|k| buffers.projected[k].as_ref().map(|proj| projected_backward(&scene.gaussians[k], cam, proj, &total[k])))
        .collect();
    for (k, g) in per.into_iter().enumerate() {
        if let Some((dp, dq, ds, dop, dc)) = g {
            grads.position[k] = dp;
            grads.rotation[k] = dq;
            grads.scales[k] = ds;
            grads.opacity[k] = dop;
            grads.color[k] = dc;
        }
    }
    Ok(grads)
}

fn pixel_backward(
    scene: &GaussianScene,
    cam: &Camera,
    buffers: &RenderBuffers,
    adjoint: &BufferAdjoint,
    i: usize,
    j: usize,
    acc: &mut [ProjectedGrad],
) {
    let contributors = buffers.contributors(i, j);
    let g_color = *adjoint.color.get(i, j);
    let mut g_normal = *adjoint.normal.get(i, j);
    let mut g_dist = *adjoint.distance.get(i, j);
    let g_alpha = *adjoint.alpha.get(i, j);

    let g_depth = *adjoint.depth.get(i, j);
    if g_depth != 0.0 && *buffers.depth_valid.get(i, j) {
        let ray = cam.intrinsics.pixel_ray(i, j);
        let denom = buffers.normal.get(i, j).dot(&ray);
        let depth = *buffers.depth.get(i, j);
        g_dist += g_depth / denom;
        g_normal -= ray * (g_depth * depth / denom);
    }

    if contributors.is_empty() {
        return;
    }
    let t_final = *buffers.final_transmittance.get(i, j);
    let mut suffix = t_final * g_color.dot(&scene.background);
    let p = pixel_center(i, j);
    for c in contributors.iter().rev() {
        let k = c.gaussian as usize;
        let g = &scene.gaussians[k];
        let proj = buffers.projected[k].as_ref().unwrap();
        let feature = g_color.dot(&g.color) + g_normal.dot(&proj.normal_cam) + g_dist * proj.distance + g_alpha;
        let w = c.transmittance * c.alpha;
        let d_alpha = c.transmittance * feature - suffix / (1.0 - c.alpha);
        suffix += w * feature;

        let slot = &mut acc[k];
        slot.color += g_color * w;
        slot.normal_cam += g_normal * w;
        slot.distance += g_dist * w;
        if !c.clamped {
            let delta = p - proj.mean2d;
            let falloff = c.alpha / g.opacity;
            slot.opacity += d_alpha * falloff;
            // alpha = sigma * exp(-m/2), m = delta^T conic delta
            let d_m = -0.5 * c.alpha * d_alpha;
            slot.mean2d += proj.conic * delta * (-2.0 * d_m);
            slot.conic += delta * delta.transpose() * d_m;
        }
    }
}

type ParamGrad = (Vector3<f64>, Vector4<f64>, Vector3<f64>, f64, Vector3<f64>);

fn projected_backward(g: &FlatGaussian, cam: &Camera, proj: &Projected, pg: &ProjectedGrad) -> ParamGrad {
    let k = &cam.intrinsics;
    let w = &cam.pose.rotation;
    let t = proj.cam_position;
    let r = quat_to_matrix(&g.rotation);
    let s2 = g.scales.component_mul(&g.scales);
    let d2 = Matrix3::from_diagonal(&s2);
    let cov3 = r * d2 * r.transpose();
    let m = w * cov3 * w.transpose();
    let j = projection_jacobian(&t, k.fx, k.fy);

    let mut d_t = Vector3::zeros();
    let mut d_r = Matrix3::zeros();

    // distance = n_cam . t
    let d_ncam = pg.normal_cam + t * pg.distance;
    d_t += proj.normal_cam * pg.distance;
    let d_nw = w.transpose() * d_ncam;
    for row in 0..3 {
        d_r[(row, 2)] += d_nw[row];
    }

    // mean2d = (fx tx/tz + cx, fy ty/tz + cy)
    d_t += j.transpose() * pg.mean2d;

    // conic = cov2d^-1
    let d_cov2d = -(proj.conic * pg.conic * proj.conic);
    // cov2d = J M J^T + floor
    let d_m = j.transpose() * d_cov2d * j;
    let d_j = d_cov2d * j * m.transpose() + d_cov2d.transpose() * j * m;
    let (iz, fx, fy) = (1.0 / t.z, k.fx, k.fy);
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    // M = W Sigma W^T, Sigma = R D R^T
    let d_cov3 = w.transpose() * d_m * w;
    d_r += (d_cov3 + d_cov3.transpose()) * r * d2;
    let rt_g_r = r.transpose() * d_cov3 * r;
    let d_scales = Vector3::new(
        2.0 * g.scales.x * rt_g_r[(0, 0)],
        2.0 * g.scales.y * rt_g_r[(1, 1)],
        2.0 * g.scales.z * rt_g_r[(2, 2)],
    );

    let d_position = w.transpose() * d_t;
    let d_rotation = quat_to_matrix_backward(&g.rotation, &d_r);
    (d_position, d_rotation, d_scales, pg.opacity, pg.color)
}
