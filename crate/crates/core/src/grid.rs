//! Pixel-grid geometry shared by the simulator, losses, localizer and renderer.

use serde::{Deserialize, Serialize};

/// A rectangular pixel grid. Positions are in nanometers with the origin at
/// the outer corner of pixel `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of pixels along x.
    pub width: usize,
    /// Number of pixels along y.
    pub height: usize,
    /// Pixel pitch in nm.
    pub pixel_size: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Self {
        Self {
            width,
            height,
            pixel_size,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Center of pixel `(ix, iy)` in nm.
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5) * self.pixel_size,
            (iy as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Row-major index of pixel `(ix, iy)`.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    /// Pixel containing the point `(x, y)` nm, clamped to the grid.
    pub fn containing_pixel(&self, x: f64, y: f64) -> (usize, usize) {
        let ix = (x / self.pixel_size).floor() as isize;
        let iy = (y / self.pixel_size).floor() as isize;
        (
            ix.clamp(0, self.width as isize - 1) as usize,
            iy.clamp(0, self.height as isize - 1) as usize,
        )
    }

    /// Offset of `x` from the center of its containing pixel, in
    /// `[-pixel_size/2, pixel_size/2)`.
    pub fn in_pixel_offset(&self, x: f64) -> f64 {
        let cell = (x / self.pixel_size).floor();
        x - (cell + 0.5) * self.pixel_size
    }
}

/// A dense 2D image of `f64` intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.data[iy * self.width + ix] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A dense 3D volume, `x` fastest, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            data: vec![0.0; nx * ny * nz],
        }
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_centers_and_offsets() {
        let g = GridSpec::new(4, 3, 100.0);
        assert_eq!(g.center(0, 0), (50.0, 50.0));
        assert_eq!(g.center(3, 2), (350.0, 250.0));
        assert_eq!(g.containing_pixel(50.0, 50.0), (0, 0));
        assert_eq!(g.containing_pixel(399.9, 299.9), (3, 2));
        assert!((g.in_pixel_offset(125.0) - (-25.0)).abs() < 1e-12);
        assert!((g.in_pixel_offset(175.0) - 25.0).abs() < 1e-12);
        assert!((g.in_pixel_offset(100.0) - (-50.0)).abs() < 1e-12);
    }

    #[test]
    fn containing_pixel_clamps_outside_points() {
        let g = GridSpec::new(4, 3, 100.0);
        assert_eq!(g.containing_pixel(-10.0, 1e9), (0, 2));
    }
}
