//! Chamfer distance, mesh sampling, PSNR and SSIM.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::io::TriangleMesh;
use crate::losses::{ssim_valid, SSIM_WINDOW};
use crate::raster::{grayscale, Image, ScalarMap};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("mesh has no area to sample")]
    ZeroArea,
    #[error("sample count must be positive")]
    NoSamples,
    #[error("image sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("images of {0:?} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall((usize, usize)),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Static 3-d tree for exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // implicit balanced tree over `points`: node = median of its slice
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut points = points.to_vec();
        let mut axes = vec![0u8; points.len()];
        build(&mut points, &mut axes);
        Self { points, axes }
    }

    /// Distance to the nearest stored point (`inf` when empty).
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, &self.axes, q, &mut best);
        best.sqrt()
    }
}

fn build(points: &mut [Vector3<f64>], axes: &mut [u8]) {
    if points.len() <= 1 {
        return;
    }
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let axis = (hi - lo).imax();
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    axes[mid] = axis as u8;
    let (left, right) = points.split_at_mut(mid);
    let (al, ar) = axes.split_at_mut(mid);
    build(left, al);
    build(&mut right[1..], &mut ar[1..]);
}

fn search(points: &[Vector3<f64>], axes: &[u8], q: &Vector3<f64>, best: &mut f64) {
    if points.is_empty() {
        return;
    }
    let mid = points.len() / 2;
    let p = &points[mid];
    *best = best.min((p - q).norm_squared());
    if points.len() == 1 {
        return;
    }
    let axis = axes[mid] as usize;
    let diff = q[axis] - p[axis];
    let (near, far) = if diff < 0.0 {
        ((&points[..mid], &axes[..mid]), (&points[mid + 1..], &axes[mid + 1..]))
    } else {
        ((&points[mid + 1..], &axes[mid + 1..]), (&points[..mid], &axes[..mid]))
    };
    search(near.0, near.1, q, best);
    if diff * diff <= *best {
        search(far.0, far.1, q, best);
    }
}

fn mean_nearest(from: &PointCloud, tree: &KdTree) -> f64 {
    let d: Vec<f64> = from.points.par_iter().map(|p| tree.nearest_distance(p)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric chamfer distance: the average of both directed mean nearest-neighbour
/// distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let ab = mean_nearest(a, &KdTree::new(&b.points));
    let ba = mean_nearest(b, &KdTree::new(&a.points));
    Ok(0.5 * (ab + ba))
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoSamples);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for k in 0..mesh.triangles.len() {
        total += mesh.triangle_area(k);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MetricsError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(k);
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect();
    Ok(PointCloud { points })
}

/// Peak signal-to-noise ratio for unit-range images; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    if !a.same_dims(b) {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_squared()).sum();
    let mse = se / (3 * a.data().len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Mean SSIM of the grayscale images over fully covered 11x11 windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    ssim_gray(&grayscale(a), &grayscale(b))
}

pub fn ssim_gray(a: &ScalarMap, b: &ScalarMap) -> Result<f64, MetricsError> {
    if !a.same_dims(b) {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    ssim_valid(a, b).ok_or(MetricsError::TooSmall(a.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use proptest::prelude::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect())
    }

    fn brute(a: &PointCloud, b: &PointCloud) -> f64 {
        let dir = |x: &PointCloud, y: &PointCloud| {
            x.points.iter().map(|p| y.points.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>()
                / x.len() as f64
        };
        0.5 * (dir(a, b) + dir(b, a))
    }

    #[test]
    fn chamfer_basics() {
        let a = PointCloud::new(vec![Vector3::zeros()]);
        let b = PointCloud::new(vec![Vector3::new(0.0, 1.0, 0.0)]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);
        let c = random_cloud(50, 1);
        assert_eq!(chamfer_distance(&c, &c).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&c, &PointCloud::default()), Err(MetricsError::EmptyCloud));
    }

    proptest! {
        #[test]
        fn chamfer_matches_brute_force(sa in 0u64..1000, sb in 0u64..1000, na in 1usize..120, nb in 1usize..120,
                                       shift in prop::array::uniform3(-5.0f64..5.0)) {
            let a = random_cloud(na, sa);
            let b = random_cloud(nb, sb + 7919);
            let cd = chamfer_distance(&a, &b).unwrap();
            prop_assert!((cd - brute(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(cd, chamfer_distance(&b, &a).unwrap());
            let t = Vector3::from(shift);
            let ta = PointCloud::new(a.points.iter().map(|p| p + t).collect());
            let tb = PointCloud::new(b.points.iter().map(|p| p + t).collect());
            prop_assert!((chamfer_distance(&ta, &tb).unwrap() - cd).abs() < 1e-12);
        }
    }

    fn two_triangles() -> TriangleMesh {
        // areas 1.5 and 0.5
        TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(3.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(1.0, 0.0, 1.0),
                Vector3::new(0.0, 1.0, 1.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            colors: None,
        }
    }

    #[test]
    fn mesh_sampling_is_area_weighted_and_deterministic() {
        let mesh = two_triangles();
        let n = 10_000;
        let cloud = sample_mesh(&mesh, n, 3).unwrap();
        assert_eq!(cloud, sample_mesh(&mesh, n, 3).unwrap());
        let first = cloud.points.iter().filter(|p| p.z < 0.5).count() as f64;
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((first - 0.75 * n as f64).abs() < 3.0 * sigma, "{first}");
        for p in &cloud.points {
            let inside = if p.z < 0.5 { p.z.abs() < 1e-12 && p.x / 3.0 + p.y <= 1.0 + 1e-12 } else { (p.z - 1.0).abs() < 1e-12 && p.x + p.y <= 1.0 + 1e-12 };
            assert!(inside && p.x >= -1e-12 && p.y >= -1e-12, "{p:?}");
        }
        let flat = TriangleMesh { triangles: vec![[0, 0, 1]], ..two_triangles() };
        assert_eq!(sample_mesh(&flat, 5, 0), Err(MetricsError::ZeroArea));
        assert_eq!(sample_mesh(&mesh, 0, 0), Err(MetricsError::NoSamples));
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(w, h, |_, _| Vector3::new(rng.random(), rng.random(), rng.random()))
    }

    #[test]
    fn psnr_oracles() {
        let a = random_image(9, 7, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let gray = Raster::filled(8, 8, Vector3::repeat(0.3));
        let shifted = Raster::filled(8, 8, Vector3::repeat(0.4));
        assert!((psnr(&gray, &shifted).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(9, 7, 2);
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).map(|v| v * v).sum()).sum::<f64>() / (9.0 * 7.0 * 3.0);
        assert!((psnr(&a, &b).unwrap() + 10.0 * mse.log10()).abs() < 1e-9);
        assert!(psnr(&a, &random_image(8, 7, 2)).is_err());
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = gray.map(|c| c.add_scalar(amp));
            let v = psnr(&gray, &noisy).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    fn pattern(kind: u32, w: usize, h: usize) -> ScalarMap {
        Raster::from_fn(w, h, |i, j| {
            let (x, y) = (i as f64, j as f64);
            let checker = ((x / 3.0).floor() + (y / 3.0).floor()).rem_euclid(2.0) * 0.8 + 0.1;
            match kind {
                0 => 0.5 + 0.4 * (0.7 * x).sin() * (0.45 * y).cos(),
                1 => 0.5 + 0.4 * (0.7 * x + 0.3).sin() * (0.45 * y - 0.2).cos(),
                2 => checker,
                3 => (0.37 * x * x + 0.61 * y * y + 0.13 * x * y).rem_euclid(1.0),
                4 => 1.0 - checker,
                _ => 0.2 + 0.6 * (x / (w - 1) as f64) * (y / (h - 1) as f64),
            }
        })
    }

    #[test]
    fn ssim_matches_reference_values() {
        // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1.0)
        let fixtures = [
            (0, 1, 24, 20, 0.9335869339725628),
            (0, 2, 16, 16, -0.160507321781906),
            (2, 4, 20, 18, -0.9884069051304767),
            (3, 0, 32, 24, 0.13089503330157667),
            (5, 3, 13, 11, 0.03550468641830688),
        ];
        for (a, b, w, h, expected) in fixtures {
            let v = ssim_gray(&pattern(a, w, h), &pattern(b, w, h)).unwrap();
            assert!((v - expected).abs() < 1e-6, "{a} {b}: {v} vs {expected}");
        }
        let img = random_image(16, 12, 4);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&random_image(10, 16, 0), &random_image(10, 16, 1)), Err(MetricsError::TooSmall((10, 16))));
    }
}
