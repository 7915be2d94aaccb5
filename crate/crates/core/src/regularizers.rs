//! Cross-view geometric regularizers.
//!
//! Both losses work on a reference view and one nearby view. A reference pixel is
//! carried to the nearby view by the homography of the plane rendered at that pixel,
//! then
//! - the distance loss compares the reference surface point's distance along the
//!   nearby normal with the nearby view's rendered plane distance, and
//! - the normal loss compares depth-derived plaquette normals of both views after
//!   rotating the reference normal into the nearby frame.
//!
//! The plane of a pixel is read from the blended maps as `n = N / |N|` and
//! `d = dist / |N|`; dividing by `|N|` removes the accumulated-opacity factor so a
//! partially covered pixel still describes its plane exactly.
//!
//! Every loss returns its value together with per-pixel adjoints for the rendered maps
//! of both views, ready for [`crate::render::render_backward`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    pixel_center, plane_homography, relative_pose, warp_pixel, Camera, CameraIntrinsics,
    RelativePose, DEFAULT_PLANE_EPS,
};
use crate::raster::{normalized_gradient_magnitude, Bilinear, Image, Raster, ScalarMap};
use crate::render::{BufferAdjoint, RenderBuffers};

/// Why a reference pixel was excluded from a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MaskReason {
    /// The warped pixel or its sampling stencil leaves the nearby image.
    OutOfBounds = 1,
    /// Missing or low-opacity depth in one of the views.
    InvalidDepth = 2,
    /// Degenerate plane, grazing normal or collinear plaquette.
    GrazingNormal = 3,
    ResidualAboveThreshold = 4,
    Occluded = 5,
    /// Plaquette stencil would leave the reference image.
    Border = 6,
    /// Patch without intensity variation (photometric consistency only).
    LowTexture = 7,
}

impl MaskReason {
    pub const ALL: [MaskReason; 7] = [
        MaskReason::OutOfBounds,
        MaskReason::InvalidDepth,
        MaskReason::GrazingNormal,
        MaskReason::ResidualAboveThreshold,
        MaskReason::Occluded,
        MaskReason::Border,
        MaskReason::LowTexture,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Per-pixel validity; every rejected pixel carries exactly one reason.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelValidityMask {
    status: Raster<Option<MaskReason>>,
}

impl PixelValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self { status: Raster::filled(width, height, None) }
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.status.get(i, j).is_none()
    }

    pub fn reason(&self, i: usize, j: usize) -> Option<MaskReason> {
        *self.status.get(i, j)
    }

    pub fn reject(&mut self, i: usize, j: usize, reason: MaskReason) {
        self.status.set(i, j, Some(reason));
    }

    pub fn valid_count(&self) -> usize {
        self.status.data().iter().filter(|s| s.is_none()).count()
    }

    pub fn count(&self, reason: MaskReason) -> usize {
        self.status.data().iter().filter(|s| **s == Some(reason)).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.status.dims()
    }

    /// 0 for valid pixels, otherwise the reason code.
    pub fn codes(&self) -> Raster<u8> {
        self.status.map(|s| s.map_or(0, MaskReason::code))
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.status.data().hash(&mut h);
        h.finish()
    }
}

/// Value, adjoints and mask of one pairwise loss.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub adjoint_ref: BufferAdjoint,
    pub adjoint_near: BufferAdjoint,
    pub mask: PixelValidityMask,
    /// Per-pixel residual on the reference grid (signed distance residual or normal
    /// residual norm), zero where masked.
    pub residual: ScalarMap,
    /// Set when no pixel survived; `value` is then zero.
    pub empty: bool,
    /// Hash of discrete per-pixel decisions (stencil cells, rounding) for gradient checks.
    pub fingerprint: u64,
}

impl LossResult {
    pub fn valid_count(&self) -> usize {
        self.mask.valid_count()
    }
}

/// Weighting of the normal loss by the reference image gradient `g` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientWeight {
    /// `g^5`: emphasizes image edges.
    #[default]
    Edge,
    /// `(1 - g)^5`: emphasizes flat regions.
    Flat,
}

impl GradientWeight {
    pub fn apply(self, g: f64) -> f64 {
        match self {
            GradientWeight::Edge => g.powi(5),
            GradientWeight::Flat => (1.0 - g).powi(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    pub dist_threshold: f64,
    pub nor_threshold: f64,
    /// Lower bound on `|d|` for the plane homography.
    pub plane_eps: f64,
    /// Rendered opacity a pixel needs before its geometry is trusted.
    pub min_alpha: f64,
    pub normal_weight: GradientWeight,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            dist_threshold: 0.03,
            nor_threshold: 0.52,
            plane_eps: DEFAULT_PLANE_EPS,
            min_alpha: 0.5,
            normal_weight: GradientWeight::Edge,
        }
    }
}

/// A reference view and its nearby view with their rendered maps and images.
#[derive(Debug, Clone, Copy)]
pub struct ViewPair<'a> {
    pub ref_cam: &'a Camera,
    pub near_cam: &'a Camera,
    pub ref_buffers: &'a RenderBuffers,
    pub near_buffers: &'a RenderBuffers,
    pub ref_image: &'a Image,
    pub near_image: &'a Image,
    pub rel: RelativePose,
}

impl<'a> ViewPair<'a> {
    pub fn new(
        ref_cam: &'a Camera,
        near_cam: &'a Camera,
        ref_buffers: &'a RenderBuffers,
        near_buffers: &'a RenderBuffers,
        ref_image: &'a Image,
        near_image: &'a Image,
    ) -> Self {
        debug_assert_eq!((ref_cam.width(), ref_cam.height()), (ref_buffers.width(), ref_buffers.height()));
        debug_assert_eq!((near_cam.width(), near_cam.height()), (near_buffers.width(), near_buffers.height()));
        Self {
            ref_cam,
            near_cam,
            ref_buffers,
            near_buffers,
            ref_image,
            near_image,
            rel: relative_pose(ref_cam, near_cam),
        }
    }

    /// The same pair seen from the other side.
    pub fn swapped(&self) -> ViewPair<'a> {
        ViewPair::new(
            self.near_cam,
            self.ref_cam,
            self.near_buffers,
            self.ref_buffers,
            self.near_image,
            self.ref_image,
        )
    }
}

/// Plane rendered at a pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelPlane {
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub depth: f64,
}

pub(crate) fn trusted(b: &RenderBuffers, i: usize, j: usize, cfg: &RegularizerConfig) -> bool {
    *b.depth_valid.get(i, j) && *b.alpha.get(i, j) >= cfg.min_alpha
}

/// Normalized plane of pixel `(i, j)`.
pub fn pixel_plane(
    b: &RenderBuffers,
    i: usize,
    j: usize,
    cfg: &RegularizerConfig,
) -> Result<PixelPlane, MaskReason> {
    if !trusted(b, i, j, cfg) {
        return Err(MaskReason::InvalidDepth);
    }
    let n = *b.normal.get(i, j);
    let len = n.norm();
    if len < 1e-12 {
        return Err(MaskReason::GrazingNormal);
    }
    let distance = b.distance.get(i, j) / len;
    if !(distance.abs() >= cfg.plane_eps) {
        return Err(MaskReason::GrazingNormal);
    }
    Ok(PixelPlane { normal: n / len, distance, depth: *b.depth.get(i, j) })
}

/// Homography of the plane rendered at reference pixel `(i, j)`.
pub fn per_pixel_homography(
    pair: &ViewPair,
    i: usize,
    j: usize,
    cfg: &RegularizerConfig,
) -> Result<Matrix3<f64>, MaskReason> {
    let plane = pixel_plane(pair.ref_buffers, i, j, cfg)?;
    plane_homography(
        &pair.rel,
        &pair.ref_cam.intrinsics,
        &pair.near_cam.intrinsics,
        &plane.normal,
        plane.distance,
        cfg.plane_eps,
    )
    .map_err(|_| MaskReason::GrazingNormal)
}

/// Derivative of the dehomogenized point `(h.x/h.z, h.y/h.z)` with respect to `h`.
fn dehomogenize_jacobian(h: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / h.z;
    Matrix2x3::new(iz, 0.0, -h.x * iz * iz, 0.0, iz, -h.y * iz * iz)
}

/// Sensitivity of a warped pixel to the reference plane.
///
/// For the plane at reference pixel `p`, `H p~ = K_n R r + s K_n T` with `r = K_r^-1 p~`
/// and `s = N . r_p / dist` (rendered, un-normalized maps; the opacity factor cancels).
/// Any pixel `q` warped with that homography satisfies
/// `H q~ = K_n R r_q + (N . r_q / dist) K_n T`, so the warp depends on the rendered
/// normal and distance at `p` only through `u = N / dist`.
pub(crate) struct WarpSensitivity {
    /// `K_n T`
    kt: Vector3<f64>,
}

impl WarpSensitivity {
    pub(crate) fn new(pair: &ViewPair) -> Self {
        Self { kt: pair.near_cam.intrinsics.matrix() * pair.rel.translation }
    }

    /// Given `dL/dq_n` for the pixel `q` (reference ray `ray_q`) warped to homogeneous
    /// `h`, returns `dL/du`.
    pub(crate) fn pull_back(&self, h: &Vector3<f64>, ray_q: &Vector3<f64>, d_pixel: &Vector2<f64>) -> Vector3<f64> {
        let d_h = dehomogenize_jacobian(h).transpose() * d_pixel;
        ray_q * d_h.dot(&self.kt)
    }
}

/// `dL/dN` and `dL/ddist` from `dL/du` with `u = N / dist`.
pub(crate) fn pull_back_plane(d_u: &Vector3<f64>, n: &Vector3<f64>, dist: f64) -> (Vector3<f64>, f64) {
    (d_u / dist, -d_u.dot(n) / (dist * dist))
}

pub(crate) fn homogeneous_warp(h: &Matrix3<f64>, p: Vector2<f64>) -> Vector3<f64> {
    h * Vector3::new(p.x, p.y, 1.0)
}

/// Sparse adjoint contributions of one pixel, applied in a deterministic order.
#[derive(Debug, Default, Clone)]
pub(crate) struct PixelAdjoint {
    pub(crate) ref_normal: Vec<(usize, usize, Vector3<f64>)>,
    pub(crate) ref_distance: Vec<(usize, usize, f64)>,
    pub(crate) ref_depth: Vec<(usize, usize, f64)>,
    pub(crate) near_normal: Vec<(usize, usize, Vector3<f64>)>,
    pub(crate) near_distance: Vec<(usize, usize, f64)>,
    pub(crate) near_depth: Vec<(usize, usize, f64)>,
}

impl PixelAdjoint {
    pub(crate) fn apply(&self, scale: f64, ref_adj: &mut BufferAdjoint, near_adj: &mut BufferAdjoint) {
        for &(i, j, v) in &self.ref_normal {
            *ref_adj.normal.get_mut(i, j) += v * scale;
        }
        for &(i, j, v) in &self.ref_distance {
            *ref_adj.distance.get_mut(i, j) += v * scale;
        }
        for &(i, j, v) in &self.ref_depth {
            *ref_adj.depth.get_mut(i, j) += v * scale;
        }
        for &(i, j, v) in &self.near_normal {
            *near_adj.normal.get_mut(i, j) += v * scale;
        }
        for &(i, j, v) in &self.near_distance {
            *near_adj.distance.get_mut(i, j) += v * scale;
        }
        for &(i, j, v) in &self.near_depth {
            *near_adj.depth.get_mut(i, j) += v * scale;
        }
    }
}

/// Outcome of one reference pixel: the loss term, its derivative with respect to the
/// pixel's inputs (pre-scaling), and the discrete decisions taken.
pub(crate) struct PixelTerm {
    pub(crate) residual: f64,
    pub(crate) term: f64,
    pub(crate) grad: PixelAdjoint,
    pub(crate) stencil: (i64, i64),
}

pub(crate) type PixelOutcome = Result<PixelTerm, (MaskReason, (i64, i64))>;

/// Evaluates a per-pixel kernel over the reference grid and assembles the loss
/// `sum(term) / count(valid)`.
pub(crate) fn assemble(
    pair: &ViewPair,
    kernel: impl Fn(usize, usize) -> PixelOutcome + Sync,
) -> LossResult {
    let (w, h) = (pair.ref_buffers.width(), pair.ref_buffers.height());
    let rows: Vec<Vec<PixelOutcome>> =
        (0..h).into_par_iter().map(|j| (0..w).map(|i| kernel(i, j)).collect()).collect();

    let mut mask = PixelValidityMask::all_valid(w, h);
    let mut residual = Raster::filled(w, h, 0.0);
    let mut hasher = DefaultHasher::new();
    let mut count = 0usize;
    let mut sum = 0.0;
    for (j, row) in rows.iter().enumerate() {
        for (i, out) in row.iter().enumerate() {
            match out {
                Ok(t) => {
                    count += 1;
                    sum += t.term;
                    residual.set(i, j, t.residual);
                    t.stencil.hash(&mut hasher);
                }
                Err((reason, stencil)) => {
                    mask.reject(i, j, *reason);
                    stencil.hash(&mut hasher);
                }
            }
        }
    }
    mask.fingerprint().hash(&mut hasher);

    let mut adjoint_ref = BufferAdjoint::zeros(w, h);
    let mut adjoint_near = BufferAdjoint::zeros(pair.near_buffers.width(), pair.near_buffers.height());
    if count == 0 {
        return LossResult {
            value: 0.0,
            adjoint_ref,
            adjoint_near,
            mask,
            residual,
            empty: true,
            fingerprint: hasher.finish(),
        };
    }
    let scale = 1.0 / count as f64;
    for row in &rows {
        for t in row.iter().flatten() {
            t.grad.apply(scale, &mut adjoint_ref, &mut adjoint_near);
        }
    }
    LossResult {
        value: sum * scale,
        adjoint_ref,
        adjoint_near,
        mask,
        residual,
        empty: false,
        fingerprint: hasher.finish(),
    }
}

pub(crate) const NO_STENCIL: (i64, i64) = (-1, -1);

/// Distance reprojection loss: mean squared difference between the reference surface
/// point's distance along the nearby normal and the nearby rendered plane distance.
pub fn mdrr_loss(pair: &ViewPair, cfg: &RegularizerConfig) -> LossResult {
    let sens = WarpSensitivity::new(pair);
    let rel = pair.rel;
    let near = pair.near_buffers;
    let (nw, nh) = (near.width(), near.height());
    assemble(pair, |i, j| {
        let fail = |r: MaskReason| Err((r, NO_STENCIL));
        let plane = match pixel_plane(pair.ref_buffers, i, j, cfg) {
            Ok(p) => p,
            Err(r) => return fail(r),
        };
        let hom = match plane_homography(
            &rel,
            &pair.ref_cam.intrinsics,
            &pair.near_cam.intrinsics,
            &plane.normal,
            plane.distance,
            cfg.plane_eps,
        ) {
            Ok(h) => h,
            Err(_) => return fail(MaskReason::GrazingNormal),
        };
        let p_r = pixel_center(i, j);
        let hp = homogeneous_warp(&hom, p_r);
        let p_n = match warp_pixel(&hom, p_r) {
            Ok(p) => p,
            Err(_) => return fail(MaskReason::OutOfBounds),
        };
        let bil = match Bilinear::new(p_n, nw, nh) {
            Some(b) if hp.z > 0.0 => b,
            _ => return fail(MaskReason::OutOfBounds),
        };
        let stencil = (bil.i0 as i64, bil.j0 as i64);
        let corners = bil.corners();
        if !corners.iter().all(|&(ci, cj)| trusted(near, ci, cj, cfg)) {
            return Err((MaskReason::InvalidDepth, stencil));
        }
        let ray = pair.ref_cam.intrinsics.pixel_ray(i, j);
        let p_rn = rel.rotation * (ray * plane.depth) + rel.translation;
        if p_rn.z <= 0.0 {
            return Err((MaskReason::OutOfBounds, stencil));
        }
        let n2 = bil.sample_vector(&near.normal);
        let len = n2.norm();
        if len < 1e-12 {
            return Err((MaskReason::GrazingNormal, stencil));
        }
        if p_rn.z - bil.sample_scalar(&near.depth) > cfg.dist_threshold {
            return Err((MaskReason::Occluded, stencil));
        }
        let dist2 = bil.sample_scalar(&near.distance);
        let a = n2.dot(&p_rn) - dist2;
        let r = a / len;
        if !(r.abs() <= cfg.dist_threshold) {
            return Err((MaskReason::ResidualAboveThreshold, stencil));
        }

        // d(r^2) through every input of the pixel
        let g = 2.0 * r;
        let d_n2 = (p_rn / len - n2 * (a / (len * len * len))) * g;
        let d_dist2 = -g / len;
        let d_prn = n2 * (g / len);
        let d_depth1 = d_prn.dot(&(rel.rotation * ray));

        let weights = bil.weights();
        let dweights = bil.weight_gradients();
        let mut grad = PixelAdjoint::default();
        let mut d_pn = Vector2::zeros();
        for k in 0..4 {
            let (ci, cj) = corners[k];
            let nk = near.normal.get(ci, cj);
            let dk = *near.distance.get(ci, cj);
            d_pn += dweights[k] * (d_n2.dot(nk) + d_dist2 * dk);
            grad.near_normal.push((ci, cj, d_n2 * weights[k]));
            grad.near_distance.push((ci, cj, d_dist2 * weights[k]));
        }
        let n1 = *pair.ref_buffers.normal.get(i, j);
        let dist1 = *pair.ref_buffers.distance.get(i, j);
        let d_u = sens.pull_back(&hp, &ray, &d_pn);
        let (d_n1, d_dist1) = pull_back_plane(&d_u, &n1, dist1);
        grad.ref_normal.push((i, j, d_n1));
        grad.ref_distance.push((i, j, d_dist1));
        grad.ref_depth.push((i, j, d_depth1));

        Ok(PixelTerm { residual: r, term: r * r, grad, stencil })
    })
}

/// Normal of the plane through the four back-projected neighbors of `(i, j)`:
/// `normalize((P1 - P0) x (P3 - P2))` with `P0, P1` left/right and `P2, P3` up/down.
pub fn plaquette_normal(
    depth: &ScalarMap,
    intr: &CameraIntrinsics,
    i: usize,
    j: usize,
) -> Result<Vector3<f64>, MaskReason> {
    Plaquette::new(depth, intr, i, j).map(|p| p.normal)
}

/// Plaquette normal restricted to pixels whose depth is trusted.
pub(crate) fn plaquette_checked(
    b: &RenderBuffers,
    intr: &CameraIntrinsics,
    i: usize,
    j: usize,
    cfg: &RegularizerConfig,
) -> Result<Plaquette, MaskReason> {
    let (w, h) = (b.width(), b.height());
    if i < 1 || j < 1 || i + 1 >= w || j + 1 >= h {
        return Err(MaskReason::Border);
    }
    for (ni, nj) in Plaquette::neighbors(i, j) {
        if !trusted(b, ni, nj, cfg) {
            return Err(MaskReason::InvalidDepth);
        }
    }
    Plaquette::new(&b.depth, intr, i, j)
}

pub struct Plaquette {
    pub normal: Vector3<f64>,
    neighbors: [(usize, usize); 4],
    rays: [Vector3<f64>; 4],
    a: Vector3<f64>,
    b: Vector3<f64>,
    cross_norm: f64,
}

impl Plaquette {
    fn neighbors(i: usize, j: usize) -> [(usize, usize); 4] {
        [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
    }

    pub fn new(depth: &ScalarMap, intr: &CameraIntrinsics, i: usize, j: usize) -> Result<Self, MaskReason> {
        let (w, h) = depth.dims();
        if i < 1 || j < 1 || i + 1 >= w || j + 1 >= h {
            return Err(MaskReason::Border);
        }
        let neighbors = Self::neighbors(i, j);
        let rays = neighbors.map(|(ni, nj)| intr.pixel_ray(ni, nj));
        let mut pts = [Vector3::zeros(); 4];
        for k in 0..4 {
            let d = *depth.get(neighbors[k].0, neighbors[k].1);
            if !(d > 0.0) {
                return Err(MaskReason::InvalidDepth);
            }
            pts[k] = rays[k] * d;
        }
        let a = pts[1] - pts[0];
        let b = pts[3] - pts[2];
        let c = a.cross(&b);
        let cross_norm = c.norm();
        if cross_norm < 1e-12 {
            return Err(MaskReason::GrazingNormal);
        }
        Ok(Self { normal: c / cross_norm, neighbors, rays, a, b, cross_norm })
    }

    /// Depth adjoints of the four neighbors given `dL/dnormal`.
    pub fn backward(&self, d_normal: &Vector3<f64>) -> [(usize, usize, f64); 4] {
        let n = &self.normal;
        let d_c = (d_normal - n * n.dot(d_normal)) / self.cross_norm;
        let d_a = self.b.cross(&d_c);
        let d_b = d_c.cross(&self.a);
        let d_pts = [-d_a, d_a, -d_b, d_b];
        std::array::from_fn(|k| (self.neighbors[k].0, self.neighbors[k].1, d_pts[k].dot(&self.rays[k])))
    }
}

/// Normal enhancement loss: weighted mean norm of the difference between the
/// reference plaquette normal (rotated into the nearby frame) and the nearby plaquette
/// normal at the corresponding pixel.
pub fn mne_loss(pair: &ViewPair, cfg: &RegularizerConfig) -> LossResult {
    let grad_mag = normalized_gradient_magnitude(pair.ref_image);
    let rel = pair.rel;
    let near = pair.near_buffers;
    let (nw, nh) = (near.width() as i64, near.height() as i64);
    assemble(pair, |i, j| {
        let fail = |r: MaskReason| Err((r, NO_STENCIL));
        let plane = match pixel_plane(pair.ref_buffers, i, j, cfg) {
            Ok(p) => p,
            Err(r) => return fail(r),
        };
        let plaq_ref = match plaquette_checked(pair.ref_buffers, &pair.ref_cam.intrinsics, i, j, cfg) {
            Ok(p) => p,
            Err(r) => return fail(r),
        };
        let hom = match plane_homography(
            &rel,
            &pair.ref_cam.intrinsics,
            &pair.near_cam.intrinsics,
            &plane.normal,
            plane.distance,
            cfg.plane_eps,
        ) {
            Ok(h) => h,
            Err(_) => return fail(MaskReason::GrazingNormal),
        };
        let p_r = pixel_center(i, j);
        let p_n = match warp_pixel(&hom, p_r) {
            Ok(p) if homogeneous_warp(&hom, p_r).z > 0.0 => p,
            _ => return fail(MaskReason::OutOfBounds),
        };
        let qi = (p_n.x - 0.5).round();
        let qj = (p_n.y - 0.5).round();
        if !(qi >= 1.0 && qj >= 1.0 && qi <= (nw - 2) as f64 && qj <= (nh - 2) as f64) {
            return fail(MaskReason::OutOfBounds);
        }
        let (qi, qj) = (qi as usize, qj as usize);
        let stencil = (qi as i64, qj as i64);
        if !trusted(near, qi, qj, cfg) {
            return Err((MaskReason::InvalidDepth, stencil));
        }
        let ray = pair.ref_cam.intrinsics.pixel_ray(i, j);
        let p_rn = rel.rotation * (ray * plane.depth) + rel.translation;
        if p_rn.z - near.depth.get(qi, qj) > cfg.dist_threshold {
            return Err((MaskReason::Occluded, stencil));
        }
        let plaq_near = match plaquette_checked(near, &pair.near_cam.intrinsics, qi, qj, cfg) {
            Ok(p) => p,
            Err(r) => return Err((r, stencil)),
        };
        let rho = rel.rotation * plaq_ref.normal - plaq_near.normal;
        let norm = rho.norm();
        if !(norm <= cfg.nor_threshold) {
            return Err((MaskReason::ResidualAboveThreshold, stencil));
        }
        let weight = cfg.normal_weight.apply(*grad_mag.get(i, j));
        let mut grad = PixelAdjoint::default();
        if norm > 1e-15 && weight > 0.0 {
            let d_rho = rho * (weight / norm);
            let d_ref = rel.rotation.transpose() * d_rho;
            grad.ref_depth.extend(plaq_ref.backward(&d_ref));
            grad.near_depth.extend(plaq_near.backward(&(-d_rho)));
        }
        Ok(PixelTerm { residual: norm, term: weight * norm, grad, stencil })
    })
}

/// Bounds on the camera baseline preferred for neighbor selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for BaselineBounds {
    fn default() -> Self {
        Self { min: 0.0, max: f64::INFINITY }
    }
}

const BASELINE_PENALTY: f64 = 1e3;

/// Selection score of `candidate` as the nearby view of `reference`; lower is better.
pub fn neighbor_score(reference: &Camera, candidate: &Camera, bounds: &BaselineBounds) -> f64 {
    let baseline = (reference.pose.center() - candidate.pose.center()).norm();
    let outside = if baseline < bounds.min {
        bounds.min - baseline
    } else if baseline > bounds.max {
        baseline - bounds.max
    } else {
        0.0
    };
    let penalty = if outside > 0.0 { BASELINE_PENALTY + outside } else { 0.0 };
    let cos = reference.pose.forward().dot(&candidate.pose.forward()).clamp(-1.0, 1.0);
    baseline + penalty + cos.acos()
}

/// Index of the best nearby view for `ref_index`; near-equal scores go to the lower
/// index. `None` when there are fewer than two cameras.
pub fn select_neighbor(cameras: &[Camera], ref_index: usize, bounds: &BaselineBounds) -> Option<usize> {
    if cameras.len() < 2 || ref_index >= cameras.len() {
        return None;
    }
    let reference = &cameras[ref_index];
    let mut best: Option<(usize, f64)> = None;
    for (k, cam) in cameras.iter().enumerate() {
        if k == ref_index {
            continue;
        }
        let score = neighbor_score(reference, cam, bounds);
        match best {
            Some((_, s)) if score >= s - 1e-9 * s.abs().max(1.0) => {}
            _ => best = Some((k, score)),
        }
    }
    best.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, backproject, project, transform_point, CameraPose};
    use crate::render::render;
    use crate::synth::{plane_pair_cameras, plane_scene};
    use proptest::prelude::*;

    struct Fixture {
        cams: [Camera; 2],
        buffers: [RenderBuffers; 2],
        images: [Image; 2],
    }

    impl Fixture {
        fn plane(size: usize) -> Self {
            let scene = plane_scene(5.0, 3.0, 0.1, Vector3::zeros());
            let cams = plane_pair_cameras(size, size as f64 * 1.25);
            let buffers = [render(&scene, &cams[0]), render(&scene, &cams[1])];
            let images = [buffers[0].color.clone(), buffers[1].color.clone()];
            Self { cams, buffers, images }
        }

        fn pair(&self) -> ViewPair<'_> {
            ViewPair::new(&self.cams[0], &self.cams[1], &self.buffers[0], &self.buffers[1], &self.images[0], &self.images[1])
        }
    }

    fn flat_cfg() -> RegularizerConfig {
        RegularizerConfig { normal_weight: GradientWeight::Flat, ..Default::default() }
    }

    #[test]
    fn consistent_plane_has_zero_losses() {
        let fx = Fixture::plane(32);
        let pair = fx.pair();
        for cfg in [RegularizerConfig::default(), flat_cfg()] {
            let d = mdrr_loss(&pair, &cfg);
            assert!(d.valid_count() > 600, "{}", d.valid_count());
            assert!(d.value < 1e-10, "{}", d.value);
            let n = mne_loss(&pair, &cfg);
            assert!(n.valid_count() > 500, "{}", n.valid_count());
            assert!(n.value < 1e-8, "{}", n.value);
            let swapped = pair.swapped();
            assert!(mdrr_loss(&swapped, &cfg).value < 1e-10);
            assert!(mne_loss(&swapped, &cfg).value < 1e-8);
        }
    }

    #[test]
    fn distance_offset_gives_squared_offset() {
        let mut fx = Fixture::plane(32);
        for v in fx.buffers[1].distance.data_mut() {
            *v += 0.01;
        }
        let d = mdrr_loss(&fx.pair(), &RegularizerConfig::default());
        assert!((d.value - 1e-4).abs() < 5e-6, "{}", d.value);
        assert_eq!(d.mask.count(MaskReason::ResidualAboveThreshold), 0);

        for v in fx.buffers[1].distance.data_mut() {
            *v += 0.04;
        }
        let d = mdrr_loss(&fx.pair(), &RegularizerConfig::default());
        assert!(d.empty);
        assert_eq!(d.value, 0.0);
        assert!(d.mask.count(MaskReason::ResidualAboveThreshold) > 600);
    }

    #[test]
    fn warp_follows_surface_point() {
        let fx = Fixture::plane(32);
        let pair = fx.pair();
        let cfg = RegularizerConfig::default();
        let mut checked = 0;
        for (i, j) in [(3, 4), (16, 16), (28, 9), (10, 27)] {
            let h = per_pixel_homography(&pair, i, j, &cfg).unwrap();
            let warped = warp_pixel(&h, pixel_center(i, j)).unwrap();
            // analytic intersection with the plane z = 5 (reference camera is the world frame)
            let ray = fx.cams[0].intrinsics.pixel_ray(i, j);
            let x = ray * 5.0;
            let expect = project(&transform_point(&x, &pair.rel), &fx.cams[1].intrinsics).unwrap();
            assert!((warped - expect).norm() < 1e-3, "{warped} vs {expect}");
            checked += 1;
        }
        assert_eq!(checked, 4);
        let same = ViewPair::new(&fx.cams[0], &fx.cams[0], &fx.buffers[0], &fx.buffers[0], &fx.images[0], &fx.images[0]);
        let h = per_pixel_homography(&same, 16, 16, &cfg).unwrap();
        assert!((h - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn degenerate_plane_is_masked() {
        let mut fx = Fixture::plane(16);
        fx.buffers[0].distance.set(8, 8, 1e-9);
        let pair = fx.pair();
        assert_eq!(per_pixel_homography(&pair, 8, 8, &RegularizerConfig::default()), Err(MaskReason::GrazingNormal));
        let d = mdrr_loss(&pair, &RegularizerConfig::default());
        assert_eq!(d.mask.reason(8, 8), Some(MaskReason::GrazingNormal));
        assert_eq!(d.adjoint_ref.distance.get(8, 8), &0.0);
    }

    #[test]
    fn plaquette_normals_of_analytic_planes() {
        let intr = CameraIntrinsics::centered(20.0, 16, 16);
        let flat = Raster::filled(16, 16, 3.7);
        assert_eq!(plaquette_normal(&flat, &intr, 5, 7), Ok(Vector3::new(0.0, 0.0, 1.0)));
        assert_eq!(plaquette_normal(&flat, &intr, 0, 7), Err(MaskReason::Border));
        assert_eq!(plaquette_normal(&flat, &intr, 5, 15), Err(MaskReason::Border));

        // z = 5 + 0.1 x along the ray (a, b, 1): z = 5 / (1 - 0.1 a)
        let slanted = Raster::from_fn(16, 16, |i, j| 5.0 / (1.0 - 0.1 * intr.pixel_ray(i, j).x));
        let expect = Vector3::new(-0.1, 0.0, 1.0).normalize();
        for (i, j) in [(1, 1), (8, 8), (14, 3)] {
            let n = plaquette_normal(&slanted, &intr, i, j).unwrap();
            assert!((n - expect).norm() < 1e-3, "{n}");
        }
        let mut holes = flat.clone();
        holes.set(6, 7, 0.0);
        assert_eq!(plaquette_normal(&holes, &intr, 5, 7), Err(MaskReason::InvalidDepth));
    }

    #[test]
    fn tilted_nearby_plane_gives_chord_residual() {
        let mut fx = Fixture::plane(32);
        let cam = fx.cams[1];
        // true plane in the nearby frame, tilted 5 degrees about an axis in the plane
        // through the surface point seen at the image center
        let n_true = cam.pose.rotation * Vector3::z();
        let anchor = backproject(pixel_center(16, 16), *fx.buffers[1].depth.get(16, 16), &cam.intrinsics).unwrap();
        let axis = n_true.cross(&Vector3::x()).normalize();
        let n_tilt = axis_angle(&axis, 5f64.to_radians()) * n_true;
        let d_tilt = n_tilt.dot(&anchor);
        fx.buffers[1].depth = Raster::from_fn(32, 32, |i, j| d_tilt / n_tilt.dot(&cam.intrinsics.pixel_ray(i, j)));

        let chord = 2.0 * 2.5f64.to_radians().sin();
        let cfg = flat_cfg();
        let pair = fx.pair();
        let res = mne_loss(&pair, &cfg);
        assert!(res.valid_count() > 50, "{}", res.valid_count());
        let g = normalized_gradient_magnitude(&fx.images[0]);
        let mut weight_sum = 0.0;
        for j in 0..32 {
            for i in 0..32 {
                if res.mask.is_valid(i, j) {
                    let r = *res.residual.get(i, j);
                    assert!((r - chord).abs() < 0.05 * chord, "{r}");
                    weight_sum += cfg.normal_weight.apply(*g.get(i, j));
                }
            }
        }
        let expect = weight_sum / res.valid_count() as f64 * chord;
        assert!((res.value - expect).abs() < 0.05 * expect, "{} vs {expect}", res.value);

        let strict = RegularizerConfig { nor_threshold: 0.05, ..cfg };
        let masked = mne_loss(&pair, &strict);
        assert!(masked.empty);
        assert!(masked.mask.count(MaskReason::ResidualAboveThreshold) >= res.valid_count());
    }

    #[test]
    fn uniform_image_with_edge_weight_gives_zero() {
        let mut fx = Fixture::plane(24);
        fx.images[0] = Raster::filled(24, 24, Vector3::repeat(0.5));
        for v in fx.buffers[1].depth.data_mut() {
            *v *= 1.001;
        }
        let res = mne_loss(&fx.pair(), &RegularizerConfig::default());
        assert!(res.valid_count() > 0);
        assert_eq!(res.value, 0.0);
        assert!(res.adjoint_ref.depth.data().iter().all(|&v| v == 0.0));
    }

    /// Buffers perturbed by smooth fields so residuals are nonzero but below thresholds.
    fn wobbly_fixture() -> Fixture {
        let mut fx = Fixture::plane(20);
        for (k, b) in fx.buffers.iter_mut().enumerate() {
            let s = k as f64 + 1.0;
            let (w, h) = (b.width(), b.height());
            for j in 0..h {
                for i in 0..w {
                    let (x, y) = (i as f64, j as f64);
                    *b.distance.get_mut(i, j) += 0.004 * (0.3 * s * x).sin() * (0.2 * y).cos();
                    *b.depth.get_mut(i, j) *= 1.0 + 0.002 * (0.25 * x + 0.4 * s * y).sin();
                    *b.normal.get_mut(i, j) += Vector3::new(0.01 * (0.2 * y * s).sin(), 0.01 * (0.3 * x).cos(), 0.0);
                }
            }
        }
        fx
    }

    #[derive(Clone, Copy, Debug)]
    enum Slot {
        Normal(usize),
        Distance,
        Depth,
    }

    fn slot_mut(b: &mut RenderBuffers, slot: Slot, i: usize, j: usize) -> &mut f64 {
        match slot {
            Slot::Normal(c) => &mut b.normal.get_mut(i, j)[c],
            Slot::Distance => b.distance.get_mut(i, j),
            Slot::Depth => b.depth.get_mut(i, j),
        }
    }

    fn slot_adj(a: &BufferAdjoint, slot: Slot, i: usize, j: usize) -> f64 {
        match slot {
            Slot::Normal(c) => a.normal.get(i, j)[c],
            Slot::Distance => *a.distance.get(i, j),
            Slot::Depth => *a.depth.get(i, j),
        }
    }

    fn check_buffer_gradients(loss: fn(&ViewPair, &RegularizerConfig) -> LossResult, cfg: RegularizerConfig) {
        let base = wobbly_fixture();
        let res = loss(&base.pair(), &cfg);
        assert!(res.value > 0.0 && res.valid_count() > 50, "{} {}", res.value, res.valid_count());
        let slots = [Slot::Normal(0), Slot::Normal(1), Slot::Normal(2), Slot::Distance, Slot::Depth];
        let mut compared = 0;
        let mut nonzero = 0;
        for view in 0..2 {
            for &(i, j) in &[(5, 5), (9, 11), (12, 7), (14, 14), (10, 10), (6, 13)] {
                for &slot in &slots {
                    let h = 1e-6;
                    let eval = |delta: f64| {
                        let mut fx = wobbly_fixture();
                        *slot_mut(&mut fx.buffers[view], slot, i, j) += delta;
                        let r = loss(&fx.pair(), &cfg);
                        (r.value, r.fingerprint)
                    };
                    let (fp, kp) = eval(h);
                    let (fm, km) = eval(-h);
                    if kp != res.fingerprint || km != res.fingerprint {
                        continue;
                    }
                    let numeric = (fp - fm) / (2.0 * h);
                    let adj = if view == 0 { &res.adjoint_ref } else { &res.adjoint_near };
                    let analytic = slot_adj(adj, slot, i, j);
                    let tol = (1e-3 * analytic.abs().max(numeric.abs())).max(1e-7);
                    assert!(
                        (analytic - numeric).abs() <= tol,
                        "view {view} ({i},{j}) {slot:?}: analytic {analytic} numeric {numeric}"
                    );
                    compared += 1;
                    if analytic.abs() > 1e-6 {
                        nonzero += 1;
                    }
                }
            }
        }
        assert!(compared > 40 && nonzero > 5, "{compared} {nonzero}");
    }

    #[test]
    fn mdrr_adjoints_match_finite_differences() {
        check_buffer_gradients(mdrr_loss, RegularizerConfig::default());
    }

    #[test]
    fn mne_adjoints_match_finite_differences() {
        check_buffer_gradients(mne_loss, flat_cfg());
    }

    #[test]
    fn masked_pixels_carry_no_adjoint() {
        let fx = wobbly_fixture();
        let res = mdrr_loss(&fx.pair(), &RegularizerConfig::default());
        for j in 0..20 {
            for i in 0..20 {
                if !res.mask.is_valid(i, j) {
                    assert_eq!(*res.adjoint_ref.distance.get(i, j), 0.0);
                    assert_eq!(*res.adjoint_ref.depth.get(i, j), 0.0);
                    assert_eq!(*res.adjoint_ref.normal.get(i, j), Vector3::zeros());
                    assert_eq!(*res.residual.get(i, j), 0.0);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn raising_thresholds_never_drops_pixels(d0 in 0.001f64..0.05, dd in 0.0f64..0.05, n0 in 0.001f64..0.5, dn in 0.0f64..0.5) {
            let fx = wobbly_fixture();
            let pair = fx.pair();
            let lo = RegularizerConfig { dist_threshold: d0, nor_threshold: n0, ..flat_cfg() };
            let hi = RegularizerConfig { dist_threshold: d0 + dd, nor_threshold: n0 + dn, ..flat_cfg() };
            prop_assert!(mdrr_loss(&pair, &hi).valid_count() >= mdrr_loss(&pair, &lo).valid_count());
            prop_assert!(mne_loss(&pair, &hi).valid_count() >= mne_loss(&pair, &lo).valid_count());
        }
    }

    fn ring(n: usize) -> Vec<Camera> {
        let intr = CameraIntrinsics::centered(20.0, 16, 16);
        (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                let eye = Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.5);
                Camera::new(intr, CameraPose::look_at(eye, Vector3::zeros(), Vector3::z()).unwrap())
            })
            .collect()
    }

    #[test]
    fn neighbor_selection_rules() {
        let cams = ring(2);
        assert_eq!(select_neighbor(&cams, 0, &BaselineBounds::default()), Some(1));
        assert_eq!(select_neighbor(&cams, 1, &BaselineBounds::default()), Some(0));
        assert_eq!(select_neighbor(&cams[..1], 0, &BaselineBounds::default()), None);
        let cams = ring(8);
        assert_eq!(select_neighbor(&cams, 0, &BaselineBounds::default()), Some(1));
        assert_eq!(select_neighbor(&cams, 3, &BaselineBounds::default()), Some(2));
        // forbidding the adjacent baseline pushes the choice one step further
        let adjacent = (cams[0].pose.center() - cams[1].pose.center()).norm();
        let bounds = BaselineBounds { min: adjacent * 1.1, max: 10.0 };
        assert_eq!(select_neighbor(&cams, 0, &bounds), Some(2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn neighbor_minimizes_score(seed in 0u64..1000, n in 2usize..9, lo in 0.0f64..2.0, span in 0.1f64..4.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let intr = CameraIntrinsics::centered(20.0, 16, 16);
            let cams: Vec<Camera> = (0..n)
                .map(|_| {
                    let eye = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(2.0..4.0));
                    let target = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
                    Camera::new(intr, CameraPose::look_at(eye, target, Vector3::y()).unwrap())
                })
                .collect();
            let bounds = BaselineBounds { min: lo, max: lo + span };
            let r = rng.random_range(0..n);
            let k = select_neighbor(&cams, r, &bounds).unwrap();
            prop_assert!(k != r);
            let best = (0..n).filter(|&c| c != r).map(|c| neighbor_score(&cams[r], &cams[c], &bounds)).fold(f64::INFINITY, f64::min);
            prop_assert!(neighbor_score(&cams[r], &cams[k], &bounds) <= best + 1e-9 * best.abs().max(1.0));
        }
    }
}
