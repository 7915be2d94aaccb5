//! Flat Gaussian primitives: parameters, 3D covariance, screen-space covariance,
//! normal and per-camera plane distance.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};

use crate::geometry::Camera;

/// Dilation added to the diagonal of every screen-space covariance (px^2).
pub const COVARIANCE_FLOOR: f64 = 0.3;
/// Gaussians whose center lies closer than this to the image plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Smallest allowed flat-axis scale.
pub const MIN_FLAT_SCALE: f64 = 1e-6;
/// Upper bound of the flat axis relative to the smaller in-plane scale.
pub const FLAT_RATIO: f64 = 0.01;
pub const MIN_OPACITY: f64 = 1e-6;

/// One planar Gaussian. `rotation` is a quaternion `(w, x, y, z)`; it is normalized
/// whenever a rotation matrix is built from it, so a raw unnormalized value is a valid
/// optimization variable. `scales.z` is the flattened axis and its direction is the
/// primitive's normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatGaussian {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl FlatGaussian {
    /// Builds a primitive and enforces the domain invariants.
    pub fn new(
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        scales: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        let mut g = Self { position, rotation, scales, opacity, color };
        g.enforce_invariants();
        g
    }

    /// Normalizes the quaternion and clamps scales, opacity and color into their domains.
    pub fn enforce_invariants(&mut self) {
        let n = self.rotation.norm();
        self.rotation = if n > 1e-12 && n.is_finite() {
            self.rotation / n
        } else {
            Vector4::new(1.0, 0.0, 0.0, 0.0)
        };
        self.scales.x = self.scales.x.abs().max(MIN_FLAT_SCALE / FLAT_RATIO);
        self.scales.y = self.scales.y.abs().max(MIN_FLAT_SCALE / FLAT_RATIO);
        let upper = FLAT_RATIO * self.scales.x.min(self.scales.y);
        self.scales.z = self.scales.z.abs().clamp(MIN_FLAT_SCALE, upper);
        self.opacity = self.opacity.clamp(MIN_OPACITY, 1.0);
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
    }

    pub fn satisfies_invariants(&self) -> bool {
        let s = &self.scales;
        (self.rotation.norm() - 1.0).abs() < 1e-9
            && s.z > 0.0
            && s.x >= s.z
            && s.y >= s.z
            && self.opacity > 0.0
            && self.opacity <= 1.0
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<FlatGaussian>,
    pub background: Vector3<f64>,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<FlatGaussian>, background: Vector3<f64>) -> Self {
        Self { gaussians, background }
    }

    pub fn empty(background: Vector3<f64>) -> Self {
        Self { gaussians: Vec::new(), background }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub fn quat_to_matrix_backward(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let u = q / norm;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_unit = Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    );
    (g_unit - u * u.dot(&g_unit)) / norm
}

/// `Σ = R S S^T R^T` with `S = diag(scales)`.
pub fn covariance3d(g: &FlatGaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = g.scales.component_mul(&g.scales);
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Jacobian of the perspective projection at a camera-space point.
pub fn projection_jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2)
}

/// Screen-space covariance `J W Σ W^T J^T` plus the dilation floor, or `None` when
/// the center is behind the near plane.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    cam: &Camera,
    mean: &Vector3<f64>,
) -> Option<Matrix2<f64>> {
    let t = cam.pose.world_to_camera(mean);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let j = projection_jacobian(&t, cam.intrinsics.fx, cam.intrinsics.fy);
    let w = &cam.pose.rotation;
    let m = j * w * cov * w.transpose() * j.transpose();
    Some(m + Matrix2::identity() * COVARIANCE_FLOOR)
}

/// World-frame normal: the third column of the rotation matrix.
pub fn gaussian_normal(g: &FlatGaussian) -> Vector3<f64> {
    g.rotation_matrix().column(2).normalize()
}

/// Signed distance from the camera center to the primitive's plane, measured along
/// the camera-frame normal. The sign follows the normal orientation.
pub fn plane_distance(g: &FlatGaussian, cam: &Camera) -> f64 {
    let t = cam.pose.world_to_camera(&g.position);
    let n = cam.pose.rotation * gaussian_normal(g);
    t.dot(&n)
}

/// Quaternion for a rotation matrix (used to seed primitives from a normal frame).
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let rot = nalgebra::Rotation3::from_matrix(r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// Quaternion whose third rotation axis is `normal`; the in-plane axes are arbitrary but
/// deterministic.
pub fn quat_from_normal(normal: &Vector3<f64>) -> Vector4<f64> {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = helper.cross(&n).normalize();
    let b = n.cross(&a);
    matrix_to_quat(&Matrix3::from_columns(&[a, b, n]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, CameraIntrinsics, CameraPose};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quat_axis_angle(axis: Vector3<f64>, angle: f64) -> Vector4<f64> {
        let a = axis.normalize() * (angle / 2.0).sin();
        Vector4::new((angle / 2.0).cos(), a.x, a.y, a.z)
    }

    fn gaussian(q: Vector4<f64>, s: Vector3<f64>) -> FlatGaussian {
        FlatGaussian { position: Vector3::zeros(), rotation: q, scales: s, opacity: 1.0, color: Vector3::zeros() }
    }

    fn random_gaussian(rng: &mut impl Rng) -> FlatGaussian {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        FlatGaussian::new(
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0)),
            q,
            Vector3::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), 1e-4),
            rng.random_range(0.1..1.0),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        )
    }

    #[test]
    fn identity_covariance() {
        let g = gaussian(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0));
        assert!((covariance3d(&g) - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rotated_covariance_swaps_axes() {
        let q = quat_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let g = gaussian(q, Vector3::new(2.0, 1.0, 0.01));
        let r = axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let oracle = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1e-4)) * r.transpose();
        let cov = covariance3d(&g);
        assert!((cov - oracle).norm() < 1e-12);
        assert!((cov - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1e-4))).norm() < 1e-12);
    }

    #[test]
    fn normal_examples() {
        let g = gaussian(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 0.01));
        assert_eq!(gaussian_normal(&g), Vector3::z());
        let q = quat_axis_angle(Vector3::x(), std::f64::consts::FRAC_PI_2);
        let n = gaussian_normal(&gaussian(q, Vector3::new(1.0, 1.0, 0.01)));
        let oracle = axis_angle(&Vector3::x(), std::f64::consts::FRAC_PI_2) * Vector3::z();
        assert!((n - oracle).norm() < 1e-12);
        assert!((n - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn plane_distance_examples() {
        let cam = Camera::new(CameraIntrinsics::centered(100.0, 64, 64), CameraPose::identity());
        let mut g = gaussian(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 0.01));
        assert_eq!(plane_distance(&g, &cam), 0.0);
        g.position = Vector3::new(0.0, 0.0, 5.0);
        assert!((plane_distance(&g, &cam) - 5.0).abs() < 1e-15);
        g.position = Vector3::new(3.0, 0.0, 5.0);
        g.rotation = quat_axis_angle(Vector3::x(), std::f64::consts::PI);
        let n = gaussian_normal(&g);
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((plane_distance(&g, &cam) - g.position.dot(&n)).abs() < 1e-12);
        assert!((plane_distance(&g, &cam) + 5.0).abs() < 1e-12);
    }

    #[test]
    fn plane_distance_sign_cancels_in_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = Camera::new(CameraIntrinsics::centered(60.0, 64, 64), CameraPose::identity());
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let n = cam.pose.rotation * gaussian_normal(&g);
            let d = plane_distance(&g, &cam);
            let ray = cam.intrinsics.ray(nalgebra::Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)));
            let denom = n.dot(&ray);
            if denom.abs() < 1e-6 {
                continue;
            }
            let depth = d / denom;
            // the plane passes through a point at positive z, so whenever the ray
            // meets it in front of the camera the ratio is positive
            let hit = ray * depth;
            if hit.z > 0.0 {
                assert!(depth > 0.0);
                assert!((n.dot(&hit) - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn point_like_covariance_hits_floor() {
        let cam = Camera::new(CameraIntrinsics::centered(100.0, 64, 64), CameraPose::identity());
        let cov = Matrix3::identity() * 1e-20;
        let p = project_covariance(&cov, &cam, &Vector3::new(0.2, -0.1, 3.0)).unwrap();
        assert!((p - Matrix2::identity() * COVARIANCE_FLOOR).norm() < 1e-12);
        assert!(project_covariance(&cov, &cam, &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn fronto_parallel_disc_projection() {
        let intr = CameraIntrinsics::new(120.0, 90.0, 32.0, 32.0, 64, 64).unwrap();
        let cam = Camera::new(intr, CameraPose::identity());
        let (a, z) = (0.3, 4.0);
        let g = FlatGaussian::new(
            Vector3::new(0.0, 0.0, z),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::new(a, a, 1e-5),
            1.0,
            Vector3::zeros(),
        );
        let p = project_covariance(&covariance3d(&g), &cam, &g.position).unwrap();
        let expect = Matrix2::new((120.0 * a / z).powi(2), 0.0, 0.0, (90.0 * a / z).powi(2))
            + Matrix2::identity() * COVARIANCE_FLOOR;
        assert!((p - expect).norm() < 1e-9);
    }

    #[test]
    fn projected_covariance_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pose = CameraPose::new(
                axis_angle(&Vector3::new(rng.random(), rng.random(), rng.random()), 0.3),
                Vector3::new(0.1, -0.2, 0.3),
            )
            .unwrap();
            let cam = Camera::new(CameraIntrinsics::centered(80.0, 64, 48), pose);
            let g = random_gaussian(&mut rng);
            let cov = covariance3d(&g);
            let t = cam.pose.world_to_camera(&g.position);
            // finite-difference Jacobian of the pixel projection w.r.t. camera coordinates
            let proj = |x: Vector3<f64>| {
                nalgebra::Vector2::new(80.0 * x.x / x.z + cam.intrinsics.cx, 80.0 * x.y / x.z + cam.intrinsics.cy)
            };
            let h = 1e-6;
            let mut jac = Matrix2x3::zeros();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let col = (proj(t + e) - proj(t - e)) / (2.0 * h);
                jac.set_column(k, &col);
            }
            let w = cam.pose.rotation;
            let oracle = jac * w * cov * w.transpose() * jac.transpose() + Matrix2::identity() * COVARIANCE_FLOOR;
            let got = project_covariance(&cov, &cam, &g.position).unwrap();
            assert!((got - oracle).norm() <= 1e-6 * oracle.norm());
        }
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let q = Vector4::new(rng.random(), rng.random(), rng.random(), rng.random()) * 2.0;
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = quat_to_matrix_backward(&q, &g);
            for k in 0..4 {
                let mut dq = Vector4::zeros();
                dq[k] = 1e-6;
                let fp = quat_to_matrix(&(q + dq)).component_mul(&g).sum();
                let fm = quat_to_matrix(&(q - dq)).component_mul(&g).sum();
                assert!((analytic[k] - (fp - fm) / 2e-6).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn quat_from_normal_has_requested_axis() {
        let n = Vector3::new(0.3, -0.4, 0.8).normalize();
        let g = gaussian(quat_from_normal(&n), Vector3::new(1.0, 1.0, 0.01));
        assert!((gaussian_normal(&g) - n).norm() < 1e-12);
    }

    #[test]
    fn constructor_enforces_invariants() {
        let g = FlatGaussian::new(
            Vector3::zeros(),
            Vector4::new(2.0, 0.0, 0.0, 0.0),
            Vector3::new(0.2, 0.1, 0.5),
            1.7,
            Vector3::new(1.2, -0.1, 0.5),
        );
        assert!(g.satisfies_invariants());
        assert!((g.scales.z - 0.001).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn covariance_is_psd_with_squared_scale_spectrum(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gaussian(&mut rng);
            let cov = covariance3d(&g);
            prop_assert!((cov - cov.transpose()).norm() < 1e-14);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut s2: Vec<f64> = g.scales.iter().map(|s| s * s).collect();
            s2.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, s) in eig.iter().zip(&s2) {
                prop_assert!((e - s).abs() < 1e-9);
                prop_assert!(*e > -1e-12);
            }
        }

        #[test]
        fn normal_is_invariant_to_in_plane_spin(seed in 0u64..5000, spin in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gaussian(&mut rng);
            let n = gaussian_normal(&g);
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            // right-multiplying by a rotation about the local z axis keeps the third column
            let spun_r = g.rotation_matrix() * axis_angle(&Vector3::z(), spin);
            let spun = FlatGaussian { rotation: matrix_to_quat(&spun_r), ..g };
            prop_assert!((gaussian_normal(&spun) - n).norm() < 1e-9);
        }
    }
}
