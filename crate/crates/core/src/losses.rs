//! Image and single-view losses used alongside the multi-view regularizers.
//!
//! - `photometric_loss`: `0.8 L1 + 0.2 (1 - SSIM)` on RGB.
//! - `svgeo_loss`: rendered normals against depth-derived normals of the same view.
//! - `mvrgb_loss`: `1 - NCC` of grayscale patches related by the per-pixel homography.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pixel_center, warp_pixel, Camera};
use crate::raster::{grayscale, normalized_gradient_magnitude, Bilinear, Image, Raster, ScalarMap};
use crate::regularizers::{
    assemble, pixel_plane, plaquette_checked, pull_back_plane, trusted, homogeneous_warp, LossResult,
    MaskReason, PixelAdjoint, PixelOutcome, PixelTerm, PixelValidityMask, RegularizerConfig, ViewPair,
    WarpSensitivity, NO_STENCIL,
};
use crate::render::{BufferAdjoint, RenderBuffers};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("image is {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const PHOTOMETRIC_L1_WEIGHT: f64 = 0.8;

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|k| (-(k as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable Gaussian filter with zero padding, output the size of the input.
fn blur_same(data: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let x = i as isize + k as isize - r;
                if x >= 0 && (x as usize) < w {
                    acc += t * data[j * w + x as usize];
                }
            }
            tmp[j * w + i] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let y = j as isize + k as isize - r;
                if y >= 0 && (y as usize) < h {
                    acc += t * tmp[y as usize * w + i];
                }
            }
            out[j * w + i] = acc;
        }
    }
    out
}

/// Mean SSIM over all pixels of one channel (zero-padded windows) and its gradient with
/// respect to `x`.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize) -> (f64, Vec<f64>) {
    let taps = gaussian_window();
    let n = w * h;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur_same(x, w, h, &taps);
    let my = blur_same(y, w, h, &taps);
    let exx = blur_same(&xx, w, h, &taps);
    let eyy = blur_same(&yy, w, h, &taps);
    let exy = blur_same(&xy, w, h, &taps);
    let mut total = 0.0;
    let mut d_mx = vec![0.0; n];
    let mut d_exx = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for k in 0..n {
        let a1 = 2.0 * mx[k] * my[k] + SSIM_C1;
        let a2 = 2.0 * (exy[k] - mx[k] * my[k]) + SSIM_C2;
        let b1 = mx[k] * mx[k] + my[k] * my[k] + SSIM_C1;
        let b2 = exx[k] - mx[k] * mx[k] + eyy[k] - my[k] * my[k] + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        d_mx[k] = inv_n * s * (2.0 * my[k] / a1 - 2.0 * my[k] / a2 - 2.0 * mx[k] / b1 + 2.0 * mx[k] / b2);
        d_exx[k] = -inv_n * s / b2;
        d_exy[k] = inv_n * 2.0 * s / a2;
    }
    // the zero-padded symmetric blur is self-adjoint
    let g_mx = blur_same(&d_mx, w, h, &taps);
    let g_exx = blur_same(&d_exx, w, h, &taps);
    let g_exy = blur_same(&d_exy, w, h, &taps);
    let grad = (0..n).map(|k| g_mx[k] + 2.0 * x[k] * g_exx[k] + y[k] * g_exy[k]).collect();
    (total * inv_n, grad)
}

/// Mean SSIM over pixels and RGB channels with zero-padded Gaussian windows, and its
/// gradient with respect to `rendered`.
pub fn ssim_rgb(rendered: &Image, gt: &Image) -> (f64, Image) {
    let (w, h) = rendered.dims();
    let channel = |img: &Image, c: usize| img.data().iter().map(|v| v[c]).collect::<Vec<f64>>();
    let per: Vec<(f64, Vec<f64>)> =
        (0..3).into_par_iter().map(|c| ssim_channel(&channel(rendered, c), &channel(gt, c), w, h)).collect();
    let value = per.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let grad = Raster::from_fn(w, h, |i, j| {
        let k = j * w + i;
        Vector3::new(per[0].1[k], per[1].1[k], per[2].1[k]) / 3.0
    });
    (value, grad)
}

/// `0.8 mean|r - g| + 0.2 (1 - SSIM)` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &Image, gt: &Image) -> Result<(f64, Image), LossError> {
    if !rendered.same_dims(gt) {
        return Err(LossError::DimensionMismatch { expected: rendered.dims(), got: gt.dims() });
    }
    let n = (rendered.data().len() * 3) as f64;
    let l1: f64 = rendered.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() / n;
    let (ssim, d_ssim) = ssim_rgb(rendered, gt);
    let wl1 = PHOTOMETRIC_L1_WEIGHT;
    let ws = 1.0 - PHOTOMETRIC_L1_WEIGHT;
    let (w, h) = rendered.dims();
    let grad = Raster::from_fn(w, h, |i, j| {
        let d = rendered.get(i, j) - gt.get(i, j);
        d.map(|v| wl1 * sign(v) / n) - d_ssim.get(i, j) * ws
    });
    Ok((wl1 * l1 + ws * (1.0 - ssim), grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-view normal consistency: `(1-g)^5`-weighted mean of `|N/|N| - N_D|`, with `N_D`
/// the plaquette normal of the view's own depth map.
pub fn svgeo_loss(cam: &Camera, buffers: &RenderBuffers, image: &Image, cfg: &RegularizerConfig) -> LossResult {
    let (w, h) = (buffers.width(), buffers.height());
    let g = normalized_gradient_magnitude(image);
    let outcome = |i: usize, j: usize| -> PixelOutcome {
        if !trusted(buffers, i, j, cfg) {
            return Err((MaskReason::InvalidDepth, NO_STENCIL));
        }
        let plaq = plaquette_checked(buffers, &cam.intrinsics, i, j, cfg).map_err(|r| (r, NO_STENCIL))?;
        let n = *buffers.normal.get(i, j);
        let len = n.norm();
        if len < 1e-12 {
            return Err((MaskReason::GrazingNormal, NO_STENCIL));
        }
        let n_hat = n / len;
        let diff = n_hat - plaq.normal;
        let res = diff.norm();
        let weight = (1.0 - g.get(i, j)).powi(5);
        let mut grad = PixelAdjoint::default();
        if res > 1e-15 && weight > 0.0 {
            let d_hat = diff * (weight / res);
            grad.ref_normal.push((i, j, (d_hat - n_hat * n_hat.dot(&d_hat)) / len));
            grad.ref_depth.extend(plaq.backward(&(-d_hat)));
        }
        Ok(PixelTerm { residual: res, term: weight * res, grad, stencil: NO_STENCIL })
    };
    let rows: Vec<Vec<PixelOutcome>> = (0..h).into_par_iter().map(|j| (0..w).map(|i| outcome(i, j)).collect()).collect();
    let mut mask = PixelValidityMask::all_valid(w, h);
    let mut residual = Raster::filled(w, h, 0.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, row) in rows.iter().enumerate() {
        for (i, out) in row.iter().enumerate() {
            match out {
                Ok(t) => {
                    count += 1;
                    sum += t.term;
                    residual.set(i, j, t.residual);
                }
                Err((r, _)) => mask.reject(i, j, *r),
            }
        }
    }
    let mut adjoint = BufferAdjoint::zeros(w, h);
    let mut unused = BufferAdjoint::zeros(w, h);
    let scale = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    if count > 0 {
        for t in rows.iter().flatten().flatten() {
            t.grad.apply(scale, &mut adjoint, &mut unused);
        }
    }
    let fingerprint = mask.fingerprint();
    LossResult {
        value: sum * scale,
        adjoint_ref: adjoint,
        adjoint_near: unused,
        mask,
        residual,
        empty: count == 0,
        fingerprint,
    }
}

pub const PATCH_RADIUS: usize = 3;
const MIN_PATCH_VARIANCE: f64 = 1e-6;

/// Multi-view photometric consistency: mean `1 - NCC` between the 7x7 grayscale patch
/// around each reference pixel and its image under that pixel's plane homography.
/// Gradients flow into the reference plane (normal and distance) only.
pub fn mvrgb_loss(pair: &ViewPair, cfg: &RegularizerConfig) -> LossResult {
    let gray_r = grayscale(pair.ref_image);
    let gray_n = grayscale(pair.near_image);
    let sens = WarpSensitivity::new(pair);
    let near = pair.near_buffers;
    let (w, h) = (pair.ref_buffers.width(), pair.ref_buffers.height());
    let (nw, nh) = (near.width(), near.height());
    let r = PATCH_RADIUS;
    assemble(pair, |i, j| {
        let fail = |reason: MaskReason| Err((reason, NO_STENCIL));
        if i < r || j < r || i + r >= w || j + r >= h {
            return fail(MaskReason::Border);
        }
        let plane = match pixel_plane(pair.ref_buffers, i, j, cfg) {
            Ok(p) => p,
            Err(reason) => return fail(reason),
        };
        let hom = match crate::geometry::plane_homography(
            &pair.rel,
            &pair.ref_cam.intrinsics,
            &pair.near_cam.intrinsics,
            &plane.normal,
            plane.distance,
            cfg.plane_eps,
        ) {
            Ok(m) => m,
            Err(_) => return fail(MaskReason::GrazingNormal),
        };
        // visibility of the center correspondence, as for the distance loss
        let center = match warp_pixel(&hom, pixel_center(i, j)) {
            Ok(p) if homogeneous_warp(&hom, pixel_center(i, j)).z > 0.0 => p,
            _ => return fail(MaskReason::OutOfBounds),
        };
        let Some(bil) = Bilinear::new(center, nw, nh) else {
            return fail(MaskReason::OutOfBounds);
        };
        let stencil = (bil.i0 as i64, bil.j0 as i64);
        if !bil.corners().iter().all(|&(ci, cj)| trusted(near, ci, cj, cfg)) {
            return Err((MaskReason::InvalidDepth, stencil));
        }
        let ray = pair.ref_cam.intrinsics.pixel_ray(i, j);
        let p_rn = pair.rel.rotation * (ray * plane.depth) + pair.rel.translation;
        if p_rn.z - bil.sample_scalar(&near.depth) > cfg.dist_threshold {
            return Err((MaskReason::Occluded, stencil));
        }

        let side = 2 * r + 1;
        let count = side * side;
        let mut xs = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        let mut samples = Vec::with_capacity(count);
        let mut stencil_hash = 0i64;
        for dj in 0..side {
            for di in 0..side {
                let (pi, pj) = (i + di - r, j + dj - r);
                let p = pixel_center(pi, pj);
                let hp = homogeneous_warp(&hom, p);
                let q = match warp_pixel(&hom, p) {
                    Ok(q) if hp.z > 0.0 => q,
                    _ => return Err((MaskReason::OutOfBounds, stencil)),
                };
                let Some(b) = Bilinear::new(q, nw, nh) else {
                    return Err((MaskReason::OutOfBounds, stencil));
                };
                stencil_hash = stencil_hash.wrapping_mul(31).wrapping_add((b.j0 * nw + b.i0) as i64);
                xs.push(*gray_r.get(pi, pj));
                ys.push(b.sample_scalar(&gray_n));
                samples.push((b, hp, pi, pj));
            }
        }
        let stencil = (stencil.0, stencil_hash);
        let n = count as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
        if vx < MIN_PATCH_VARIANCE || vy < MIN_PATCH_VARIANCE {
            return Err((MaskReason::LowTexture, stencil));
        }
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let denom = (vx * vy).sqrt();
        let ncc = cov / denom;

        let mut d_u = Vector3::zeros();
        for (k, (b, hp, pi, pj)) in samples.iter().enumerate() {
            // d(1 - NCC)/dy_k
            let d_y = -((xs[k] - mx) / (n * denom) - ncc * (ys[k] - my) / (n * vy));
            let d_q = b
                .corners()
                .iter()
                .zip(b.weight_gradients())
                .fold(Vector2::zeros(), |acc, (&(ci, cj), dw)| acc + dw * *gray_n.get(ci, cj))
                * d_y;
            d_u += sens.pull_back(hp, &pair.ref_cam.intrinsics.pixel_ray(*pi, *pj), &d_q);
        }
        let n1 = *pair.ref_buffers.normal.get(i, j);
        let dist1 = *pair.ref_buffers.distance.get(i, j);
        let (d_n1, d_dist1) = pull_back_plane(&d_u, &n1, dist1);
        let mut grad = PixelAdjoint::default();
        grad.ref_normal.push((i, j, d_n1));
        grad.ref_distance.push((i, j, d_dist1));
        Ok(PixelTerm { residual: 1.0 - ncc, term: 1.0 - ncc, grad, stencil })
    })
}

/// Grayscale SSIM restricted to fully covered windows, matching the common reference
/// definition (Gaussian window, population covariance, unit data range).
pub fn ssim_valid(a: &ScalarMap, b: &ScalarMap) -> Option<f64> {
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW || !a.same_dims(b) {
        return None;
    }
    let taps = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let blur = |f: &dyn Fn(usize) -> f64| blur_same(&(0..w * h).map(f).collect::<Vec<_>>(), w, h, &taps);
    let (x, y) = (a.data(), b.data());
    let mx = blur(&|k| x[k]);
    let my = blur(&|k| y[k]);
    let exx = blur(&|k| x[k] * x[k]);
    let eyy = blur(&|k| y[k] * y[k]);
    let exy = blur(&|k| x[k] * y[k]);
    let mut total = 0.0;
    let mut count = 0usize;
    for j in r..h - r {
        for i in r..w - r {
            let k = j * w + i;
            let vx = exx[k] - mx[k] * mx[k];
            let vy = eyy[k] - my[k] * my[k];
            let cxy = exy[k] - mx[k] * my[k];
            total += (2.0 * mx[k] * my[k] + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                / ((mx[k] * mx[k] + my[k] * my[k] + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Some(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;
    use crate::synth::{plane_pair_cameras, plane_scene};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
        Raster::from_fn(w, h, |_, _| Vector3::new(rng.random(), rng.random(), rng.random()))
    }

    #[test]
    fn photometric_is_zero_on_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(8, 6, &mut rng);
        let (v, g) = photometric_loss(&img, &img).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.data().iter().all(|c| c.norm() < 1e-9));
        assert!(photometric_loss(&img, &random_image(6, 8, &mut rng)).is_err());
    }

    #[test]
    fn constant_offset_l1_part() {
        let a = Raster::filled(16, 16, Vector3::repeat(0.5));
        let b = Raster::filled(16, 16, Vector3::repeat(0.4));
        let (v, _) = photometric_loss(&a, &b).unwrap();
        let (ssim, _) = ssim_rgb(&a, &b);
        assert!((v - (0.08 + 0.2 * (1.0 - ssim))).abs() < 1e-12);
        // interior windows see luminance term only: (2*0.5*0.4 + C1) / (0.25 + 0.16 + C1)
        let lum = (0.4 + SSIM_C1) / (0.41 + SSIM_C1);
        assert!(ssim < 1.0 && ssim > lum - 0.05, "{ssim}");
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(4, 4, &mut rng);
        let b = random_image(4, 4, &mut rng);
        let (_, g) = photometric_loss(&a, &b).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            for i in 0..4 {
                for c in 0..3 {
                    let mut p = a.clone();
                    p.get_mut(i, j)[c] += h;
                    let mut m = a.clone();
                    m.get_mut(i, j)[c] -= h;
                    let num = (photometric_loss(&p, &b).unwrap().0 - photometric_loss(&m, &b).unwrap().0) / (2.0 * h);
                    assert!((num - g.get(i, j)[c]).abs() < 1e-4, "{num} vs {}", g.get(i, j)[c]);
                }
            }
        }
    }

    #[test]
    fn svgeo_fronto_parallel_and_tilted() {
        let scene = plane_scene(5.0, 3.0, 0.1, Vector3::zeros());
        let cam = plane_pair_cameras(24, 30.0)[0];
        let mut buffers = render(&scene, &cam);
        let img = Raster::filled(24, 24, Vector3::repeat(0.5));
        let cfg = RegularizerConfig::default();
        let base = svgeo_loss(&cam, &buffers, &img, &cfg);
        assert!(base.valid_count() > 300);
        assert!(base.value < 1e-6, "{}", base.value);

        let rot = crate::geometry::axis_angle(&Vector3::new(1.0, 1.0, 0.0), 5f64.to_radians());
        for n in buffers.normal.data_mut() {
            *n = rot * *n;
        }
        let tilted = svgeo_loss(&cam, &buffers, &img, &cfg);
        let chord = 2.0 * 2.5f64.to_radians().sin();
        // uniform image: every weight is one
        assert!((tilted.value - chord).abs() < 0.05 * chord, "{}", tilted.value);

        buffers.alpha.data_mut().iter_mut().for_each(|a| *a = 0.0);
        let none = svgeo_loss(&cam, &buffers, &img, &cfg);
        assert!(none.empty && none.value == 0.0);
    }

    fn textured_pair(size: usize) -> ([Camera; 2], [RenderBuffers; 2], [Image; 2]) {
        let scene = plane_scene(5.0, 3.0, 0.1, Vector3::zeros());
        let cams = plane_pair_cameras(size, size as f64 * 1.25);
        let buffers = [render(&scene, &cams[0]), render(&scene, &cams[1])];
        // texture painted on the plane z = 5, sampled exactly per view
        let tex = |x: Vector3<f64>| 0.5 + 0.3 * (4.0 * x.x).sin() * (3.0 * x.y).cos() + 0.1 * (7.0 * x.y).sin();
        let images = [0, 1].map(|k| {
            let cam = &cams[k];
            Raster::from_fn(size, size, |i, j| {
                let rw = cam.pose.camera_to_world_rotation() * cam.intrinsics.pixel_ray(i, j);
                let c = cam.pose.center();
                let t = (5.0 - c.z) / rw.z;
                Vector3::repeat(tex(c + rw * t))
            })
        });
        (cams, buffers, images)
    }

    #[test]
    fn mvrgb_identity_consistent_and_noise() {
        let (cams, buffers, images) = textured_pair(32);
        let cfg = RegularizerConfig::default();
        let same = ViewPair::new(&cams[0], &cams[0], &buffers[0], &buffers[0], &images[0], &images[0]);
        let r = mvrgb_loss(&same, &cfg);
        assert!(r.valid_count() > 300);
        assert!(r.value.abs() < 1e-12, "{}", r.value);

        let pair = ViewPair::new(&cams[0], &cams[1], &buffers[0], &buffers[1], &images[0], &images[1]);
        let r = mvrgb_loss(&pair, &cfg);
        assert!(r.valid_count() > 200, "{}", r.valid_count());
        assert!(r.value < 1e-3, "{}", r.value);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = [random_image(32, 32, &mut rng), random_image(32, 32, &mut rng)];
        let pair = ViewPair::new(&cams[0], &cams[1], &buffers[0], &buffers[1], &noise[0], &noise[1]);
        let r = mvrgb_loss(&pair, &cfg);
        assert!((r.value - 1.0).abs() < 0.1, "{}", r.value);
    }

    #[test]
    fn mvrgb_adjoint_matches_finite_differences() {
        let (cams, mut buffers, images) = textured_pair(24);
        for (k, v) in buffers[0].distance.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (k as f64 * 0.37).sin();
        }
        let cfg = RegularizerConfig::default();
        let eval = |b: &RenderBuffers| {
            let pair = ViewPair::new(&cams[0], &cams[1], b, &buffers[1], &images[0], &images[1]);
            mvrgb_loss(&pair, &cfg)
        };
        let base = eval(&buffers[0]);
        let mut compared = 0;
        for &(i, j) in &[(8, 8), (12, 10), (15, 14), (10, 16)] {
            for slot in 0..4 {
                let h = 1e-6;
                let bump = |d: f64| {
                    let mut b = buffers[0].clone();
                    if slot < 3 {
                        b.normal.get_mut(i, j)[slot] += d;
                    } else {
                        *b.distance.get_mut(i, j) += d;
                    }
                    eval(&b)
                };
                let (p, m) = (bump(h), bump(-h));
                if p.fingerprint != base.fingerprint || m.fingerprint != base.fingerprint {
                    continue;
                }
                let num = (p.value - m.value) / (2.0 * h);
                let ana = if slot < 3 { base.adjoint_ref.normal.get(i, j)[slot] } else { *base.adjoint_ref.distance.get(i, j) };
                assert!((num - ana).abs() <= (1e-3 * num.abs().max(ana.abs())).max(1e-8), "({i},{j}) {slot}: {ana} vs {num}");
                compared += 1;
            }
        }
        assert!(compared >= 8, "{compared}");
    }
}
