//! Truncated signed distance fusion of depth maps and marching-cubes extraction.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::GaussianScene;
use crate::geometry::{project, Camera};
use crate::io::TriangleMesh;
use crate::mc_table::TRIANGLE_TABLE;
use crate::raster::{Bilinear, Image, ScalarMap};
use crate::render::render;

#[derive(Debug, Error, PartialEq)]
pub enum SurfaceError {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("depth map is {got:?} but the camera is {expected:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
}

/// Regular grid of signed distance samples. Sample `(x, y, z)` sits at
/// `origin + voxel_size * (x, y, z)`; positive values lie in front of the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    tsdf: Vec<f64>,
    weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3], truncation: f64) -> Result<Self, SurfaceError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(SurfaceError::InvalidVolume(format!("voxel size {voxel_size}")));
        }
        if !(truncation >= voxel_size && truncation.is_finite()) {
            return Err(SurfaceError::InvalidVolume(format!("truncation {truncation} below voxel size {voxel_size}")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(SurfaceError::InvalidVolume(format!("dims {dims:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(SurfaceError::InvalidVolume("non-finite origin".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self { origin, voxel_size, dims, truncation, tsdf: vec![1.0; n], weight: vec![0.0; n] })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    pub fn tsdf(&self, x: usize, y: usize, z: usize) -> f64 {
        self.tsdf[self.index(x, y, z)]
    }

    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weight[self.index(x, y, z)]
    }

    pub fn tsdf_values(&self) -> &[f64] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Lowest and highest sample position.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let [a, b, c] = self.dims;
        (self.origin, self.point(a - 1, b - 1, c - 1))
    }

    /// Overwrites every sample with `sdf(point)` (clamped after truncation) and unit weight.
    pub fn fill_with(&mut self, sdf: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let [nx, ny, _] = self.dims;
        let (origin, voxel, trunc) = (self.origin, self.voxel_size, self.truncation);
        self.tsdf.par_chunks_mut(nx * ny).zip(self.weight.par_chunks_mut(nx * ny)).enumerate().for_each(|(z, (t, w))| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = origin + Vector3::new(x as f64, y as f64, z as f64) * voxel;
                    t[x + nx * y] = (sdf(&p) / trunc).clamp(-1.0, 1.0);
                    w[x + nx * y] = 1.0;
                }
            }
        });
    }

    /// Integrates one depth map (z-depth; non-positive or non-finite entries are invalid).
    pub fn integrate(&mut self, depth: &ScalarMap, cam: &Camera) -> Result<(), SurfaceError> {
        let expected = (cam.width(), cam.height());
        if depth.dims() != expected {
            return Err(SurfaceError::DimensionMismatch { expected, got: depth.dims() });
        }
        let [nx, ny, _] = self.dims;
        let (origin, voxel, trunc) = (self.origin, self.voxel_size, self.truncation);
        self.tsdf.par_chunks_mut(nx * ny).zip(self.weight.par_chunks_mut(nx * ny)).enumerate().for_each(|(z, (t, w))| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = origin + Vector3::new(x as f64, y as f64, z as f64) * voxel;
                    let pc = cam.pose.world_to_camera(&p);
                    let Ok(px) = project(&pc, &cam.intrinsics) else { continue };
                    let Some(d) = sample_depth(depth, px) else { continue };
                    let sdf = d - pc.z;
                    if sdf <= -trunc {
                        continue;
                    }
                    let k = x + nx * y;
                    let v = (sdf / trunc).clamp(-1.0, 1.0);
                    t[k] = (t[k] * w[k] + v) / (w[k] + 1.0);
                    w[k] += 1.0;
                }
            }
        });
        Ok(())
    }

    /// Marching cubes on the zero level set. Cubes with a corner weight below
    /// `min_weight`, or an unobserved corner, are skipped. Vertices on shared edges are
    /// shared; zero-area triangles are dropped.
    pub fn extract_mesh(&self, min_weight: f64) -> TriangleMesh {
        let [nx, ny, nz] = self.dims;
        let usable = |i: usize| self.weight[i] > 0.0 && self.weight[i] >= min_weight;
        let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
            .into_par_iter()
            .map(|z| {
                let mut tris = Vec::new();
                for y in 0..ny - 1 {
                    for x in 0..nx - 1 {
                        let idx = CORNERS.map(|c| self.index(x + c[0], y + c[1], z + c[2]));
                        if !idx.iter().all(|&i| usable(i)) {
                            continue;
                        }
                        let mut config = 0usize;
                        for (c, &i) in idx.iter().enumerate() {
                            if self.tsdf[i] < 0.0 {
                                config |= 1 << c;
                            }
                        }
                        let row = &TRIANGLE_TABLE[config];
                        for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                            let key = |e: i8| {
                                let (o, axis) = EDGES[e as usize];
                                (self.index(x + o[0], y + o[1], z + o[2]) * 3 + axis) as u64
                            };
                            tris.push([key(tri[0]), key(tri[2]), key(tri[1])]);
                        }
                    }
                }
                tris
            })
            .collect();

        let mut lookup: HashMap<u64, u32> = HashMap::new();
        let mut mesh = TriangleMesh::default();
        for tri in slabs.into_iter().flatten() {
            let ids = tri.map(|key| {
                *lookup.entry(key).or_insert_with(|| {
                    mesh.vertices.push(self.edge_vertex(key));
                    (mesh.vertices.len() - 1) as u32
                })
            });
            mesh.triangles.push(ids);
        }
        cleanup(&mut mesh);
        mesh
    }

    fn edge_vertex(&self, key: u64) -> Vector3<f64> {
        let axis = (key % 3) as usize;
        let a = (key / 3) as usize;
        let step = [1, self.dims[0], self.dims[0] * self.dims[1]][axis];
        let b = a + step;
        let (x, rest) = (a % self.dims[0], a / self.dims[0]);
        let (y, z) = (rest % self.dims[1], rest / self.dims[1]);
        let (va, vb) = (self.tsdf[a], self.tsdf[b]);
        let t = va / (va - vb);
        let mut p = self.point(x, y, z);
        p[axis] += t * self.voxel_size;
        p
    }
}

// Corner offsets and edges (start corner offset, axis) in Bourke numbering.
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

fn valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

/// Bilinear depth when all four neighbours are valid, otherwise the containing pixel.
fn sample_depth(depth: &ScalarMap, p: Vector2<f64>) -> Option<f64> {
    let (w, h) = depth.dims();
    if let Some(b) = Bilinear::new(p, w, h) {
        if b.corners().iter().all(|&(i, j)| valid_depth(*depth.get(i, j))) {
            return Some(b.sample_scalar(depth));
        }
    }
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
        return None;
    }
    let d = *depth.get(p.x as usize, p.y as usize);
    valid_depth(d).then_some(d)
}

/// Drops triangles with repeated or coincident vertices and compacts the vertex list.
fn cleanup(mesh: &mut TriangleMesh) {
    let verts = &mesh.vertices;
    mesh.triangles.retain(|t| {
        let [a, b, c] = t.map(|i| verts[i as usize]);
        t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && (b - a).cross(&(c - a)).norm() > 0.0
    });
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for t in &mut mesh.triangles {
        for v in t.iter_mut() {
            let slot = &mut remap[*v as usize];
            if *slot == u32::MAX {
                *slot = vertices.len() as u32;
                vertices.push(mesh.vertices[*v as usize]);
            }
            *v = *slot;
        }
    }
    mesh.vertices = vertices;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Voxel size is the largest bounding-box side divided by this.
    pub resolution: usize,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    /// Rendered pixels need more opacity than this to be fused.
    pub min_alpha: f64,
    /// Relative padding of the fitted bounding box.
    pub padding: f64,
    /// Fraction of back-projected points ignored at each end of every axis when fitting
    /// the bounding box; 0 fits the full union.
    pub bounds_quantile: f64,
    pub min_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { resolution: 128, truncation_voxels: 4.0, min_alpha: 0.5, padding: 0.05, bounds_quantile: 0.01, min_weight: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub mesh: TriangleMesh,
    /// `None` when no view had a valid depth.
    pub volume: Option<TsdfVolume>,
    pub warning: Option<String>,
}

/// Fuses depth maps (invalid pixels non-positive) into a volume fitted to their
/// back-projected points, trimmed per axis by `bounds_quantile`.
pub fn fuse_depths(views: &[(Camera, ScalarMap)], cfg: &FusionConfig) -> Result<FusionResult, SurfaceError> {
    let mut coords: [Vec<f64>; 3] = Default::default();
    for (cam, depth) in views {
        let expected = (cam.width(), cam.height());
        if depth.dims() != expected {
            return Err(SurfaceError::DimensionMismatch { expected, got: depth.dims() });
        }
        for j in 0..depth.height() {
            for i in 0..depth.width() {
                let d = *depth.get(i, j);
                if valid_depth(d) {
                    let p = cam.pose.camera_to_world(&(cam.intrinsics.pixel_ray(i, j) * d));
                    for a in 0..3 {
                        coords[a].push(p[a]);
                    }
                }
            }
        }
    }
    if coords[0].is_empty() {
        return Ok(FusionResult {
            mesh: TriangleMesh::default(),
            volume: None,
            warning: Some("no valid depth in any view; mesh is empty".into()),
        });
    }
    if !(0.0..0.5).contains(&cfg.bounds_quantile) {
        return Err(SurfaceError::InvalidVolume(format!("bounds quantile {} outside [0, 0.5)", cfg.bounds_quantile)));
    }
    let mut lo = Vector3::zeros();
    let mut hi = Vector3::zeros();
    for (a, values) in coords.iter_mut().enumerate() {
        let last = values.len() - 1;
        let k = (cfg.bounds_quantile * last as f64).round() as usize;
        lo[a] = *values.select_nth_unstable_by(k, f64::total_cmp).1;
        hi[a] = *values.select_nth_unstable_by(last - k, f64::total_cmp).1;
    }
    let extent = (hi - lo).max().max(1e-9);
    let pad = cfg.padding * extent;
    lo -= Vector3::repeat(pad);
    hi += Vector3::repeat(pad);
    let voxel = (extent + 2.0 * pad) / cfg.resolution as f64;
    let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel).ceil() as usize + 1).max(2));
    let mut volume = TsdfVolume::new(lo, voxel, dims, cfg.truncation_voxels * voxel)?;
    for (cam, depth) in views {
        volume.integrate(depth, cam)?;
    }
    let mesh = volume.extract_mesh(cfg.min_weight);
    let warning = mesh.is_empty().then(|| "volume has no zero crossing; mesh is empty".to_string());
    Ok(FusionResult { mesh, volume: Some(volume), warning })
}

/// Renders every camera, keeps depths of pixels that are valid and opaque enough,
/// fuses them and colors the mesh from the renders.
pub fn fuse_scene(scene: &GaussianScene, cameras: &[Camera], cfg: &FusionConfig) -> Result<FusionResult, SurfaceError> {
    if cameras.is_empty() {
        return Err(SurfaceError::InvalidVolume("no cameras".into()));
    }
    let mut views = Vec::with_capacity(cameras.len());
    let mut colors = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let b = render(scene, cam);
        let depth = ScalarMap::from_fn(b.width(), b.height(), |i, j| {
            if *b.depth_valid.get(i, j) && *b.alpha.get(i, j) > cfg.min_alpha {
                *b.depth.get(i, j)
            } else {
                0.0
            }
        });
        views.push((*cam, depth));
        colors.push(b.color);
    }
    let mut result = fuse_depths(&views, cfg)?;
    if let Some(vol) = &result.volume {
        if !result.mesh.is_empty() {
            let col = vertex_colors(&result.mesh, &views, &colors, vol.truncation);
            result.mesh.colors = Some(col);
        }
    }
    Ok(result)
}

/// Mean rendered color over the views in which a vertex lies within `tolerance` of the
/// observed depth; gray when no view sees it.
pub fn vertex_colors(mesh: &TriangleMesh, views: &[(Camera, ScalarMap)], images: &[Image], tolerance: f64) -> Vec<Vector3<f64>> {
    mesh.vertices
        .par_iter()
        .map(|v| {
            let mut sum = Vector3::zeros();
            let mut n = 0.0;
            for ((cam, depth), image) in views.iter().zip(images) {
                let pc = cam.pose.world_to_camera(v);
                let Ok(p) = project(&pc, &cam.intrinsics) else { continue };
                if !(p.x >= 0.0 && p.y >= 0.0 && p.x < cam.width() as f64 && p.y < cam.height() as f64) {
                    continue;
                }
                let (i, j) = (p.x as usize, p.y as usize);
                let d = *depth.get(i, j);
                if valid_depth(d) && (d - pc.z).abs() <= tolerance {
                    sum += image.get(i, j);
                    n += 1.0;
                }
            }
            if n > 0.0 { sum / n } else { Vector3::repeat(0.5) }
        })
        .collect()
}
