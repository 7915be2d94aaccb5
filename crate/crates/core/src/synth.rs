//! Synthetic fixtures rendered by analytic ray casting.
//!
//! Ground-truth images and depth maps come from exact ray-shape intersection and never
//! from the splat renderer.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{quat_from_normal, FlatGaussian, GaussianScene};
use crate::geometry::{pixel_center, Camera, CameraIntrinsics, CameraPose};
use crate::io::SceneDataset;
use crate::raster::{Image, Raster, ScalarMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("a rig needs at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("image size {0}x{1} is below the 16x16 minimum")]
    ImageTooSmall(usize, usize),
    #[error("all cameras of the rig coincide")]
    DegenerateRig,
    #[error("invalid shape parameter: {0}")]
    InvalidShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    /// Square of half-size `extent` in the world plane `z = 0`, facing `+z`.
    Plane { extent: f64 },
    Sphere { radius: f64 },
    /// Axis-aligned cube of half-size `extent` centered at the origin.
    Box { extent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextureSpec {
    Constant { color: [f64; 3] },
    /// 3D checkerboard with cells of side `period`.
    Checker { period: f64, a: [f64; 3], b: [f64; 3] },
    /// Smooth value noise with lattice spacing `scale`.
    Noise { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    /// Full circle around the world `z` axis.
    Ring,
    /// Circular arc of `arc_span_deg` centered on the `+x` direction.
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub kind: RigKind,
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    /// Alternate the sign of the elevation between consecutive cameras.
    pub alternate_elevation: bool,
    pub arc_span_deg: f64,
    pub look_at: [f64; 3],
    /// Horizontal field of view.
    pub fov_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: ShapeSpec,
    pub texture: TextureSpec,
    pub rig: RigSpec,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub seed: u64,
    /// Color rays per pixel along each axis; depth always uses the pixel center.
    #[serde(default = "one")]
    pub supersample: usize,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    /// Textured plane seen from above by `views` cameras.
    pub fn plane(views: usize, size: usize, seed: u64) -> Self {
        Self {
            shape: ShapeSpec::Plane { extent: 3.0 },
            texture: TextureSpec::Checker { period: 0.25, a: [0.85, 0.75, 0.6], b: [0.2, 0.3, 0.45] },
            rig: RigSpec {
                kind: RigKind::Ring,
                count: views,
                radius: 3.0,
                elevation_deg: 60.0,
                alternate_elevation: false,
                arc_span_deg: 90.0,
                look_at: [0.0; 3],
                fov_deg: 50.0,
            },
            width: size,
            height: size,
            background: [0.0; 3],
            seed,
            supersample: 4,
        }
    }

    /// Unit sphere seen by a ring of `views` cameras at alternating elevation.
    pub fn sphere(views: usize, size: usize, seed: u64) -> Self {
        Self {
            shape: ShapeSpec::Sphere { radius: 1.0 },
            texture: TextureSpec::Checker { period: 0.35, a: [0.85, 0.75, 0.6], b: [0.2, 0.3, 0.45] },
            rig: RigSpec {
                kind: RigKind::Ring,
                count: views,
                radius: 3.5,
                elevation_deg: 25.0,
                alternate_elevation: true,
                arc_span_deg: 90.0,
                look_at: [0.0; 3],
                fov_deg: 45.0,
            },
            width: size,
            height: size,
            background: [0.0; 3],
            seed,
            supersample: 4,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.rig.count < 2 {
            return Err(SynthError::TooFewCameras(self.rig.count));
        }
        if self.width < 16 || self.height < 16 {
            return Err(SynthError::ImageTooSmall(self.width, self.height));
        }
        let positive = match self.shape {
            ShapeSpec::Plane { extent } | ShapeSpec::Box { extent } => extent,
            ShapeSpec::Sphere { radius } => radius,
        };
        if !(positive > 0.0 && positive.is_finite()) {
            return Err(SynthError::InvalidShape(format!("{:?}", self.shape)));
        }
        if !(self.rig.fov_deg > 0.0 && self.rig.fov_deg < 179.0) {
            return Err(SynthError::InvalidShape(format!("fov {}", self.rig.fov_deg)));
        }
        if self.supersample == 0 || self.supersample > 16 {
            return Err(SynthError::InvalidShape(format!("supersample {}", self.supersample)));
        }
        Ok(())
    }
}

/// Exact surface of a fixture, used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticSurface {
    Plane { extent: f64 },
    Sphere { radius: f64 },
    Box { extent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; with rays `K^-1 p~` this is the camera z-depth.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl AnalyticSurface {
    pub fn from_spec(shape: &ShapeSpec) -> Self {
        match *shape {
            ShapeSpec::Plane { extent } => AnalyticSurface::Plane { extent },
            ShapeSpec::Sphere { radius } => AnalyticSurface::Sphere { radius },
            ShapeSpec::Box { extent } => AnalyticSurface::Box { extent },
        }
    }

    /// First intersection with `t > 0` of the ray `origin + t dir`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match *self {
            AnalyticSurface::Plane { extent } => {
                if dir.z.abs() < 1e-15 {
                    return None;
                }
                let t = -origin.z / dir.z;
                let point = origin + dir * t;
                if !(t > 0.0) || point.x.abs() > extent || point.y.abs() > extent {
                    return None;
                }
                let normal = if origin.z >= 0.0 { Vector3::z() } else { -Vector3::z() };
                Some(Hit { t, point: Vector3::new(point.x, point.y, 0.0), normal })
            }
            AnalyticSurface::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = origin.dot(dir);
                let c = origin.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > 0.0)?;
                let point = origin + dir * t;
                Some(Hit { t, point, normal: point / radius })
            }
            AnalyticSurface::Box { extent } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k].abs() > extent {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (-extent - origin[k]) / dir[k];
                    let t1 = (extent - origin[k]) / dir[k];
                    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                    if lo > t_near {
                        t_near = lo;
                        axis = k;
                    }
                    t_far = t_far.min(hi);
                }
                if !(t_near <= t_far && t_near > 0.0) {
                    return None;
                }
                let point = origin + dir * t_near;
                let mut normal = Vector3::zeros();
                normal[axis] = -dir[axis].signum();
                Some(Hit { t: t_near, point, normal })
            }
        }
    }

    /// Unsigned Euclidean distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            AnalyticSurface::Plane { extent } => {
                let dx = (p.x.abs() - extent).max(0.0);
                let dy = (p.y.abs() - extent).max(0.0);
                (dx * dx + dy * dy + p.z * p.z).sqrt()
            }
            AnalyticSurface::Sphere { radius } => (p.norm() - radius).abs(),
            AnalyticSurface::Box { extent } => {
                let q = p.map(|v| v.abs() - extent);
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
        }
    }

    /// Area-uniform random points on the surface.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| match *self {
                AnalyticSurface::Plane { extent } => Vector3::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    0.0,
                ),
                AnalyticSurface::Sphere { radius } => {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    Vector3::new(r * phi.cos(), r * phi.sin(), z) * radius
                }
                AnalyticSurface::Box { extent } => {
                    let face = rng.random_range(0..6usize);
                    let axis = face / 2;
                    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                    let mut p = Vector3::new(
                        rng.random_range(-extent..extent),
                        rng.random_range(-extent..extent),
                        rng.random_range(-extent..extent),
                    );
                    p[axis] = sign * extent;
                    p
                }
            })
            .collect()
    }
}

/// Deterministic color field over world space.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    spec: TextureSpec,
    lattice: Vec<f64>,
}

const NOISE_LATTICE: usize = 64;

impl Texture {
    pub fn new(spec: TextureSpec) -> Self {
        let lattice = match spec {
            TextureSpec::Noise { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..NOISE_LATTICE.pow(3) * 3).map(|_| rng.random::<f64>()).collect()
            }
            _ => Vec::new(),
        };
        Self { spec, lattice }
    }

    pub fn color(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self.spec {
            TextureSpec::Constant { color } => Vector3::from(color),
            TextureSpec::Checker { period, a, b } => {
                let cell = |v: f64| (v / period + 1e-9).floor() as i64;
                if (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2) == 0 {
                    Vector3::from(a)
                } else {
                    Vector3::from(b)
                }
            }
            TextureSpec::Noise { scale, .. } => {
                let q = p / scale;
                let base = q.map(f64::floor);
                let f = (q - base).map(|t| t * t * (3.0 - 2.0 * t));
                let mut out = Vector3::zeros();
                for corner in 0..8 {
                    let o = Vector3::new((corner & 1) as f64, ((corner >> 1) & 1) as f64, ((corner >> 2) & 1) as f64);
                    let w: f64 = (0..3).map(|k| if o[k] == 1.0 { f[k] } else { 1.0 - f[k] }).product();
                    let idx = (0..3).fold(0usize, |acc, k| {
                        acc * NOISE_LATTICE + ((base[k] + o[k]) as i64).rem_euclid(NOISE_LATTICE as i64) as usize
                    });
                    for c in 0..3 {
                        out[c] += w * self.lattice[idx * 3 + c];
                    }
                }
                out
            }
        }
    }
}

/// Cameras of a rig, all looking at `look_at` with world `+z` up.
pub fn make_rig(rig: &RigSpec, width: usize, height: usize) -> Result<Vec<Camera>, SynthError> {
    if rig.count < 2 {
        return Err(SynthError::TooFewCameras(rig.count));
    }
    let focal = 0.5 * width as f64 / (0.5 * rig.fov_deg.to_radians()).tan();
    let intr = CameraIntrinsics::centered(focal, width, height);
    let target = Vector3::from(rig.look_at);
    let mut cams = Vec::with_capacity(rig.count);
    for k in 0..rig.count {
        let azimuth = match rig.kind {
            RigKind::Ring => std::f64::consts::TAU * k as f64 / rig.count as f64,
            RigKind::Arc => {
                let span = rig.arc_span_deg.to_radians();
                -0.5 * span + span * k as f64 / (rig.count - 1) as f64
            }
        };
        let sign = if rig.alternate_elevation && k % 2 == 1 { -1.0 } else { 1.0 };
        let elevation = (sign * rig.elevation_deg).to_radians().clamp(-1.5, 1.5);
        let offset = Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        ) * rig.radius;
        let pose = CameraPose::look_at(target + offset, target, Vector3::z())
            .map_err(|_| SynthError::DegenerateRig)?;
        cams.push(Camera::new(intr, pose));
    }
    let c0 = cams[0].pose.center();
    if cams.iter().all(|c| (c.pose.center() - c0).norm() < 1e-9) {
        return Err(SynthError::DegenerateRig);
    }
    Ok(cams)
}

/// Ray-cast view of an analytic surface.
#[derive(Debug, Clone)]
pub struct GroundTruthView {
    pub image: Image,
    /// Camera z-depth, zero where the ray misses.
    pub depth: ScalarMap,
    pub hit: Raster<bool>,
    /// World-frame surface normal, zero where the ray misses.
    pub normal: Raster<Vector3<f64>>,
}

pub fn ray_cast(
    surface: &AnalyticSurface,
    texture: &Texture,
    cam: &Camera,
    background: Vector3<f64>,
    supersample: usize,
) -> GroundTruthView {
    let (w, h) = (cam.width(), cam.height());
    let origin = cam.pose.center();
    let rt = cam.pose.camera_to_world_rotation();
    let hits = Raster::from_fn(w, h, |i, j| {
        let dir = rt * cam.intrinsics.ray(pixel_center(i, j));
        surface.intersect(&origin, &dir)
    });
    let shade = |p: Vector2<f64>| {
        let dir = rt * cam.intrinsics.ray(p);
        surface.intersect(&origin, &dir).map_or(background, |h| texture.color(&h.point))
    };
    let n = supersample.max(1);
    let image = if n == 1 {
        hits.map(|hit| hit.map_or(background, |h| texture.color(&h.point)))
    } else {
        Raster::from_fn(w, h, |i, j| {
            let mut sum = Vector3::zeros();
            for a in 0..n {
                for b in 0..n {
                    let offset = Vector2::new((a as f64 + 0.5) / n as f64, (b as f64 + 0.5) / n as f64);
                    sum += shade(Vector2::new(i as f64, j as f64) + offset);
                }
            }
            sum / (n * n) as f64
        })
    };
    GroundTruthView {
        image,
        depth: hits.map(|hit| hit.map_or(0.0, |h| h.t)),
        hit: hits.map(|hit| hit.is_some()),
        normal: hits.map(|hit| hit.map_or(Vector3::zeros(), |h| h.normal)),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub dataset: SceneDataset,
    pub surface: AnalyticSurface,
    pub views: Vec<GroundTruthView>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticFixture, SynthError> {
    spec.validate()?;
    let cameras = make_rig(&spec.rig, spec.width, spec.height)?;
    let surface = AnalyticSurface::from_spec(&spec.shape);
    let texture = Texture::new(match spec.texture {
        // noise textures draw from the fixture seed unless given their own
        TextureSpec::Noise { scale, seed: 0 } => TextureSpec::Noise { scale, seed: spec.seed },
        t => t,
    });
    let background = Vector3::from(spec.background);
    let views: Vec<GroundTruthView> =
        cameras.iter().map(|c| ray_cast(&surface, &texture, c, background, spec.supersample)).collect();
    let dataset = SceneDataset {
        names: (0..cameras.len()).map(|k| format!("view_{k:03}")).collect(),
        images: views.iter().map(|v| v.image.clone()).collect(),
        depths: views.iter().map(|v| Some(v.depth.clone())).collect(),
        cameras,
    };
    Ok(SyntheticFixture { dataset, surface, views })
}

/// Flat Gaussians tiling the square `center + a u + b v` with `|a|, |b| <= half`.
pub fn tile_plane(
    center: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    half: f64,
    spacing: f64,
    opacity: f64,
    color: impl Fn(&Vector3<f64>) -> Vector3<f64>,
) -> Vec<FlatGaussian> {
    let u = u.normalize();
    let v = v.normalize();
    let normal = u.cross(&v);
    let q = quat_from_normal(&normal);
    let n = (2.0 * half / spacing).round() as i64;
    let mut out = Vec::new();
    for a in 0..=n {
        for b in 0..=n {
            let pa = -half + a as f64 * spacing;
            let pb = -half + b as f64 * spacing;
            let p = center + u * pa + v * pb;
            out.push(FlatGaussian::new(p, q, Vector3::new(spacing, spacing, 1e-4 * spacing), opacity, color(&p)));
        }
    }
    out
}

/// Dense, exactly planar Gaussian scene on the world plane `z = z0` facing `+z`.
pub fn plane_scene(z0: f64, half: f64, spacing: f64, background: Vector3<f64>) -> GaussianScene {
    let gaussians = tile_plane(
        Vector3::new(0.0, 0.0, z0),
        Vector3::x(),
        Vector3::y(),
        half,
        spacing,
        0.95,
        |p| Vector3::new(0.5 + 0.4 * (3.0 * p.x).sin(), 0.5 + 0.4 * (2.0 * p.y).cos(), 0.5),
    );
    GaussianScene::new(gaussians, background)
}

/// Two cameras facing the plane of [`plane_scene`] (`z0 = 5`) from slightly different
/// positions: the first at the origin with identity pose, the second shifted and
/// rotated towards the plane center.
pub fn plane_pair_cameras(size: usize, focal: f64) -> [Camera; 2] {
    let intr = CameraIntrinsics::centered(focal, size, size);
    let up = -Vector3::y();
    let a = CameraPose::identity();
    let b = CameraPose::look_at(Vector3::new(0.4, 0.15, 0.1), Vector3::new(0.05, 0.0, 5.0), up).unwrap();
    [Camera::new(intr, a), Camera::new(intr, b)]
}

/// Projected silhouette radius test helper: pixel distance from the image of the sphere
/// center to its outline along the image x axis, for a camera on the optical axis.
pub fn sphere_outline_radius_px(radius: f64, distance: f64, focal: f64) -> f64 {
    let s = radius / distance;
    focal * s / (1.0 - s * s).sqrt()
}

/// Pixel coordinates of a world point, if in front of the camera.
pub fn project_world(cam: &Camera, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p = cam.pose.world_to_camera(x);
    crate::geometry::project(&p, &cam.intrinsics).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_depth_satisfies_plane_equation() {
        let fx = generate_synthetic(&SyntheticSpec::plane(4, 32, 3)).unwrap();
        for (cam, view) in fx.dataset.cameras.iter().zip(&fx.views) {
            let mut hits = 0;
            for j in 0..32 {
                for i in 0..32 {
                    if !view.hit.get(i, j) {
                        continue;
                    }
                    hits += 1;
                    let p_cam = cam.intrinsics.pixel_ray(i, j) * *view.depth.get(i, j);
                    let x = cam.pose.camera_to_world(&p_cam);
                    assert!(x.z.abs() < 1e-9, "{}", x.z);
                }
            }
            assert_eq!(hits, 32 * 32);
        }
    }

    #[test]
    fn sphere_silhouette_matches_analytic_outline() {
        let mut spec = SyntheticSpec::sphere(4, 64, 1);
        spec.rig.elevation_deg = 0.0;
        let fx = generate_synthetic(&spec).unwrap();
        let cam = &fx.dataset.cameras[0];
        let view = &fx.views[0];
        let r_px = sphere_outline_radius_px(1.0, spec.rig.radius, cam.intrinsics.fx);
        let c = Vector2::new(cam.intrinsics.cx, cam.intrinsics.cy);
        for j in 0..64 {
            for i in 0..64 {
                let dist = (pixel_center(i, j) - c).norm();
                if dist < r_px - 1.0 {
                    assert!(view.hit.get(i, j), "({i},{j}) inside outline");
                } else if dist > r_px + 1.0 {
                    assert!(!view.hit.get(i, j), "({i},{j}) outside outline");
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut spec = SyntheticSpec::sphere(3, 16, 9);
        spec.texture = TextureSpec::Noise { scale: 0.3, seed: 0 };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.dataset.images, b.dataset.images);
        spec.seed = 10;
        let c = generate_synthetic(&spec).unwrap();
        assert_ne!(a.dataset.images, c.dataset.images);
    }

    #[test]
    fn degenerate_rig_is_rejected() {
        let mut spec = SyntheticSpec::plane(4, 16, 0);
        spec.rig.radius = 0.0;
        assert!(generate_synthetic(&spec).is_err());
        spec = SyntheticSpec::plane(1, 16, 0);
        assert_eq!(generate_synthetic(&spec).unwrap_err(), SynthError::TooFewCameras(1));
        spec = SyntheticSpec::plane(2, 8, 0);
        assert!(matches!(generate_synthetic(&spec), Err(SynthError::ImageTooSmall(8, 8))));
    }

    #[test]
    fn box_hits_report_outward_normals() {
        let surface = AnalyticSurface::Box { extent: 1.0 };
        let hit = surface.intersect(&Vector3::new(0.2, 0.1, 5.0), &-Vector3::z()).unwrap();
        assert!((hit.t - 4.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vector3::z());
        assert!(surface.distance(&hit.point) < 1e-12);
        assert!((surface.distance(&Vector3::new(0.0, 0.0, 0.5)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn samples_lie_on_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in [
            AnalyticSurface::Plane { extent: 2.0 },
            AnalyticSurface::Sphere { radius: 1.5 },
            AnalyticSurface::Box { extent: 0.7 },
        ] {
            for p in s.sample(200, &mut rng) {
                assert!(s.distance(&p) < 1e-12);
            }
        }
    }
}
