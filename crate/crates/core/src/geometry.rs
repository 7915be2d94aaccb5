//! Pinhole cameras, poses and the plane-induced homography.
//!
//! Conventions used across the crate:
//! - poses are stored world-to-camera: `x_cam = R * x_world + t`;
//! - camera frame is x right, y down, z forward;
//! - depth is z-depth, so `backproject(p, d) = d * K^-1 * (u, v, 1)`;
//! - pixel `(i, j)` samples the continuous coordinate `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Default lower bound on `|d_r|` for [`plane_homography`].
pub const DEFAULT_PLANE_EPS: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (error {0:.3e})")]
    NotARotation(f64),
    #[error("non-finite camera parameters")]
    NonFinite,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) lies outside the image")]
    OutsideImage(f64, f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("plane distance {0:.3e} is below the degeneracy threshold")]
    DegeneratePlane(f64),
    #[error("homography maps the pixel to infinity")]
    PointAtInfinity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics with the principal point at the image center and a square pixel.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K^-1 * (u, v, 1)` for a continuous pixel coordinate.
    #[inline]
    pub fn ray(&self, p: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Ray through the center of pixel `(i, j)`.
    #[inline]
    pub fn pixel_ray(&self, i: usize, j: usize) -> Vector3<f64> {
        self.ray(pixel_center(i, j))
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }
}

/// Continuous coordinate sampled by pixel `(i, j)`.
#[inline]
pub fn pixel_center(i: usize, j: usize) -> Vector2<f64> {
    Vector2::new(i as f64 + 0.5, j as f64 + 0.5)
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate(ORTHO_TOL)?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn validate(&self, tol: f64) -> Result<(), GeometryError> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let err = orthonormality_error(&self.rotation);
        if err > tol || self.rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(())
    }

    /// Pose of a camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image (the camera y axis points down).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::NonFinite);
        }
        let z = forward.normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-9 {
            return Err(GeometryError::NotARotation(1.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    /// Camera-to-world rotation (`R_c` in the usual splatting notation).
    pub fn camera_to_world_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Rigid map from reference-camera coordinates to nearby-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

pub fn backproject(
    p: Vector2<f64>,
    depth: f64,
    intr: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !intr.contains(p) {
        return Err(GeometryError::OutsideImage(p.x, p.y));
    }
    Ok(intr.ray(p) * depth)
}

pub fn project(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Vector2<f64>, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
}

pub fn relative_pose(reference: &Camera, nearby: &Camera) -> RelativePose {
    let rr = &reference.pose;
    let rn = &nearby.pose;
    let rotation = rn.rotation * rr.rotation.transpose();
    let translation = rn.translation - rotation * rr.translation;
    RelativePose { rotation, translation }
}

/// Homography induced by the plane `{X : n^T X = d}` (reference coordinates):
/// `H = K_n (R + T n^T / d) K_r^-1`. Written with the plane as `n^T X + d' = 0`
/// this is the familiar `K_n (R - T n^T / d') K_r^-1`.
pub fn plane_homography(
    rel: &RelativePose,
    intr_r: &CameraIntrinsics,
    intr_n: &CameraIntrinsics,
    normal: &Vector3<f64>,
    distance: f64,
    eps: f64,
) -> Result<Matrix3<f64>, GeometryError> {
    if !(distance.abs() >= eps) {
        return Err(GeometryError::DegeneratePlane(distance));
    }
    let inner = rel.rotation + rel.translation * normal.transpose() / distance;
    Ok(intr_n.matrix() * inner * intr_r.inverse_matrix())
}

pub fn warp_pixel(h: &Matrix3<f64>, p: Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-12 {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Vector2::new(q.x / q.z, q.y / q.z))
}

#[inline]
pub fn transform_point(p: &Vector3<f64>, rel: &RelativePose) -> Vector3<f64> {
    rel.rotation * p + rel.translation
}

/// Rotation about a unit axis (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 640, 480).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        axis_angle(&axis, rng.random_range(-0.6..0.6))
    }

    fn random_camera(rng: &mut impl Rng) -> Camera {
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Camera::new(intr(), CameraPose::new(random_rotation(rng), t).unwrap())
    }

    #[test]
    fn backproject_examples() {
        let k = intr();
        let p = backproject(Vector2::new(160.0, 120.0), 1.0, &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        let p = backproject(Vector2::new(360.0, 120.0), 2.0, &k).unwrap();
        assert!((p - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-15);
        // direct K^-1 product
        let p = backproject(Vector2::new(100.0, 50.0), 3.5, &k).unwrap();
        let oracle = k.matrix().try_inverse().unwrap() * Vector3::new(100.0, 50.0, 1.0) * 3.5;
        assert!((p - oracle).norm() < 1e-12);
        assert!((p - Vector3::new(-1.05, -1.225, 3.5)).norm() < 1e-12);
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        let k = intr();
        assert!(matches!(
            backproject(Vector2::new(10.0, 10.0), 0.0, &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(backproject(Vector2::new(10.0, 10.0), -1.0, &k).is_err());
        assert!(backproject(Vector2::new(-3.0, 10.0), 1.0, &k).is_err());
    }

    #[test]
    fn project_examples() {
        let k = intr();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap(), Vector2::new(160.0, 120.0));
        let p = project(&Vector3::new(2.0, 0.0, 2.0), &k).unwrap();
        assert!((p - Vector2::new(360.0, 120.0)).norm() < 1e-12);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &k),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 4).is_err());
        let k = intr();
        assert!((k.matrix() * k.inverse_matrix() - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn pose_rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        assert!((pose.world_to_camera(&Vector3::zeros()) - Vector3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
        assert!((pose.center() - Vector3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
        assert!((pose.rotation - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn relative_pose_same_view_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = random_camera(&mut rng);
        let rel = relative_pose(&cam, &cam);
        assert!((rel.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(rel.translation.norm() < 1e-12);
    }

    #[test]
    fn relative_pose_translation_only() {
        let a = Camera::new(intr(), CameraPose::identity());
        let delta = Vector3::new(0.3, -0.2, 0.1);
        // camera moved by +delta in the world: x_cam = x_world - delta
        let b = Camera::new(intr(), CameraPose::new(Matrix3::identity(), -delta).unwrap());
        let rel = relative_pose(&a, &b);
        assert!((rel.rotation - Matrix3::identity()).norm() < 1e-15);
        assert!((rel.translation + delta).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let via_rel = transform_point(&a.pose.world_to_camera(&x), &rel);
            assert!((via_rel - b.pose.world_to_camera(&x)).norm() < 1e-12);
        }
    }

    #[test]
    fn relative_pose_identity_holds_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_camera(&mut rng);
            let b = random_camera(&mut rng);
            let rel = relative_pose(&a, &b);
            assert!(orthonormality_error(&rel.rotation) < 1e-9);
            for _ in 0..100 {
                let x = Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                );
                let lhs = b.pose.world_to_camera(&x);
                let rhs = transform_point(&a.pose.world_to_camera(&x), &rel);
                assert!((lhs - rhs).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn homography_identity_views() {
        let k = intr();
        let h = plane_homography(
            &RelativePose::identity(),
            &k,
            &k,
            &Vector3::new(0.0, 0.0, 1.0),
            3.0,
            DEFAULT_PLANE_EPS,
        )
        .unwrap();
        assert!((h - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn homography_fronto_parallel_shift() {
        let k = intr();
        let b = 0.4;
        let rel = RelativePose { rotation: Matrix3::identity(), translation: Vector3::new(-b, 0.0, 0.0) };
        let n = Vector3::new(0.0, 0.0, 1.0);
        let h = plane_homography(&rel, &k, &k, &n, 5.0, DEFAULT_PLANE_EPS).unwrap();
        for u in [10.0, 160.0, 500.0] {
            for v in [5.0, 120.0, 400.0] {
                let p = Vector2::new(u, v);
                let warped = warp_pixel(&h, p).unwrap();
                // oracle: backproject onto z = 5, move, project
                let x = backproject(p, 5.0, &k).unwrap();
                let oracle = project(&transform_point(&x, &rel), &k).unwrap();
                assert!((warped - oracle).norm() < 1e-8);
                assert!((warped.x - (u - k.fx * b / 5.0)).abs() < 1e-9, "shift is fx * b / d toward -x");
                assert!((warped.y - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn homography_rejects_degenerate_plane() {
        let k = intr();
        let err = plane_homography(
            &RelativePose::identity(),
            &k,
            &k,
            &Vector3::new(0.0, 0.0, 1.0),
            1e-8,
            DEFAULT_PLANE_EPS,
        );
        assert!(matches!(err, Err(GeometryError::DegeneratePlane(_))));
    }

    #[test]
    fn warp_examples() {
        assert_eq!(warp_pixel(&Matrix3::identity(), Vector2::new(10.0, 20.0)).unwrap(), Vector2::new(10.0, 20.0));
        let h = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0));
        assert_eq!(warp_pixel(&h, Vector2::new(10.0, 20.0)).unwrap(), Vector2::new(20.0, 40.0));
        let degenerate = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(warp_pixel(&degenerate, Vector2::new(1.0, 1.0)), Err(GeometryError::PointAtInfinity));
    }

    #[test]
    fn transform_point_examples() {
        let p = Vector3::new(0.0, 0.0, 5.0);
        assert_eq!(transform_point(&p, &RelativePose::identity()), p);
        let rel = RelativePose { rotation: Matrix3::identity(), translation: Vector3::new(1.0, 0.0, 0.0) };
        assert_eq!(transform_point(&p, &rel), Vector3::new(1.0, 0.0, 5.0));
    }

    proptest! {
        #[test]
        fn project_inverts_backproject(u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.01f64..100.0) {
            let k = intr();
            let p = Vector2::new(u, v);
            let x = backproject(p, d, &k).unwrap();
            prop_assert!((x.z - d).abs() <= 1e-12 * d);
            let q = project(&x, &k).unwrap();
            prop_assert!((q - p).norm() < 1e-10);
        }

        #[test]
        fn transform_round_trip(seed in 0u64..1000, x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_camera(&mut rng);
            let b = random_camera(&mut rng);
            let p = Vector3::new(x, y, z);
            let there = transform_point(&p, &relative_pose(&a, &b));
            let back = transform_point(&there, &relative_pose(&b, &a));
            prop_assert!((back - p).norm() < 1e-10);
            let back2 = transform_point(&there, &relative_pose(&a, &b).inverse());
            prop_assert!((back2 - p).norm() < 1e-10);
        }

        #[test]
        fn homography_matches_point_transfer(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_camera(&mut rng);
            let b = random_camera(&mut rng);
            let rel = relative_pose(&a, &b);
            let n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
            let d = rng.random_range(2.0..8.0);
            let h = plane_homography(&rel, &a.intrinsics, &b.intrinsics, &n, d, DEFAULT_PLANE_EPS).unwrap();
            for _ in 0..16 {
                let p = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let ray = a.intrinsics.ray(p);
                let depth = d / n.dot(&ray);
                if depth <= 0.0 { continue; }
                let x = transform_point(&(ray * depth), &rel);
                if x.z <= 1e-3 { continue; }
                let oracle = project(&x, &b.intrinsics).unwrap();
                let warped = warp_pixel(&h, p).unwrap();
                // points just in front of the camera project far outside the image
                prop_assert!((warped - oracle).norm() < 1e-8 + 1e-12 * oracle.norm());
            }
        }
    }
}
