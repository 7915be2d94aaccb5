//! Row-major 2D grids used for images and rendered maps.

use nalgebra::{Vector2, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Scalar per-pixel map (distance, depth, alpha, weights).
pub type ScalarMap = Raster<f64>;
/// Three-channel per-pixel map; used for RGB images and normal maps alike.
pub type VectorMap = Raster<Vector3<f64>>;
/// RGB image with channels in `[0, 1]`.
pub type Image = VectorMap;

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "raster data length mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.width && j < self.height);
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[j * self.width + i]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[j * self.width + i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Bilinear stencil for a continuous pixel coordinate (pixel centers at `+0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub i0: usize,
    pub j0: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Bilinear {
    /// `None` when the 2x2 stencil would leave the grid.
    pub fn new(p: Vector2<f64>, width: usize, height: usize) -> Option<Self> {
        let x = p.x - 0.5;
        let y = p.y - 0.5;
        if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
            return None;
        }
        let i0 = (x.floor() as usize).min(width - 2);
        let j0 = (y.floor() as usize).min(height - 2);
        Some(Self { i0, j0, fx: x - i0 as f64, fy: y - j0 as f64 })
    }

    /// Corner pixels in the order (i0,j0), (i1,j0), (i0,j1), (i1,j1).
    pub fn corners(&self) -> [(usize, usize); 4] {
        let (i0, j0) = (self.i0, self.j0);
        [(i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1)]
    }

    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    /// Derivatives of [`Self::weights`] with respect to the x and y coordinate.
    pub fn weight_gradients(&self) -> [Vector2<f64>; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            Vector2::new(-(1.0 - fy), -(1.0 - fx)),
            Vector2::new(1.0 - fy, -fx),
            Vector2::new(-fy, 1.0 - fx),
            Vector2::new(fy, fx),
        ]
    }

    pub fn sample_scalar(&self, map: &ScalarMap) -> f64 {
        self.corners().iter().zip(self.weights()).map(|(&(i, j), w)| w * map.get(i, j)).sum()
    }

    pub fn sample_vector(&self, map: &VectorMap) -> Vector3<f64> {
        self.corners()
            .iter()
            .zip(self.weights())
            .fold(Vector3::zeros(), |acc, (&(i, j), w)| acc + map.get(i, j) * w)
    }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[inline]
pub fn luminance(c: &Vector3<f64>) -> f64 {
    LUMA[0] * c.x + LUMA[1] * c.y + LUMA[2] * c.z
}

pub fn grayscale(image: &Image) -> ScalarMap {
    image.map(luminance)
}

/// Centered-difference gradient magnitude of the grayscale image, divided by its
/// maximum and clamped to `[0, 1]`. Borders use clamped neighbors.
pub fn normalized_gradient_magnitude(image: &Image) -> ScalarMap {
    let gray = grayscale(image);
    let (w, h) = gray.dims();
    let mut mag = Raster::from_fn(w, h, |i, j| {
        let gx = (gray.get((i + 1).min(w - 1), j) - gray.get(i.saturating_sub(1), j)) * 0.5;
        let gy = (gray.get(i, (j + 1).min(h - 1)) - gray.get(i, j.saturating_sub(1))) * 0.5;
        (gx * gx + gy * gy).sqrt()
    });
    let max = mag.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in mag.data_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    mag
}
