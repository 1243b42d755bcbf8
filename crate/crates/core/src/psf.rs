//! Point spread function models.
//!
//! A [`PsfModel`] is the sum of a closed-form parametric component (one of
//! three kinds) and an optional non-parametric 3D pixel map correction that is
//! evaluated by trilinear interpolation. The sum is clamped at zero from below
//! so it can feed Gamma noise models whose shape parameter must stay positive.
//!
//! All evaluation takes displacements `(dx, dy, dz)` in nm between the query
//! point and the emitter. Analytic gradients with respect to both the
//! displacement and the four shape parameters are provided for the fitting
//! code; they are validated against central finite differences in the tests.

use crate::grid::{GridSpec, Image};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Weighted sum of two circular Gaussians whose width grows away from focus:
/// `sum_n a_n * exp(-b_n (dx^2+dy^2) / (1+|dz|)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psf2DParams {
    pub a1: f64,
    pub a2: f64,
    /// Decay rates in nm^-2.
    pub b1: f64,
    pub b2: f64,
}

/// Astigmatic PSF: an elliptical Gaussian whose per-axis width depends on the
/// defocus, `exp(-a dx^2 / ((dz-b_x)^2+c)) * exp(-a dy^2 / ((dz-b_y)^2+c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfAsParams {
    pub a: f64,
    /// Focal offset of the x axis in nm.
    pub b_x: f64,
    /// Focal offset of the y axis in nm.
    pub b_y: f64,
    /// Defocus floor in nm^2.
    pub c: f64,
}

/// Double-helix PSF: two circular Gaussian lobes at radius `d` that rotate
/// around the emitter with defocus. Both quadratic forms are negative
/// definite; the lobe centers are `s_x = d cos(b dz + c)`,
/// `s_y = d sin(b dz + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfDhParams {
    /// Lobe sharpness in nm^-2.
    pub a: f64,
    /// Rotation rate in rad/nm.
    pub b: f64,
    /// Phase in rad.
    pub c: f64,
    /// Lobe radius in nm.
    pub d: f64,
}

/// The parametric component of a PSF model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Parametric {
    #[serde(rename = "2d")]
    TwoD(Psf2DParams),
    As(PsfAsParams),
    Dh(PsfDhParams),
}

/// Value and analytic partial derivatives of a parametric PSF evaluation.
///
/// `d_pos` holds the derivatives with respect to `(dx, dy, dz)`; `d_params`
/// holds the derivatives with respect to the four shape parameters in the
/// declaration order of the corresponding params struct.
#[derive(Debug, Clone, Copy)]
pub struct ParametricGrad {
    pub value: f64,
    pub d_pos: [f64; 3],
    pub d_params: [f64; 4],
}

impl Parametric {
    pub fn validate(&self) -> Result<()> {
        match self {
            Parametric::TwoD(p) => {
                if !(p.b1 > 0.0 && p.b2 > 0.0) {
                    return Err(CoreError::InvalidParam("2d psf requires b1, b2 > 0".into()));
                }
                if p.a1 + p.a2 <= 0.0 {
                    return Err(CoreError::InvalidParam("2d psf requires a1 + a2 > 0".into()));
                }
            }
            Parametric::As(p) => {
                if !(p.a > 0.0 && p.c > 0.0) {
                    return Err(CoreError::InvalidParam("as psf requires a > 0, c > 0".into()));
                }
            }
            Parametric::Dh(p) => {
                if !(p.a > 0.0 && p.d > 0.0) {
                    return Err(CoreError::InvalidParam("dh psf requires a > 0, d > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// The four shape parameters as an array, in declaration order.
    pub fn params(&self) -> [f64; 4] {
        match self {
            Parametric::TwoD(p) => [p.a1, p.a2, p.b1, p.b2],
            Parametric::As(p) => [p.a, p.b_x, p.b_y, p.c],
            Parametric::Dh(p) => [p.a, p.b, p.c, p.d],
        }
    }

    /// Same kind with the shape parameters replaced.
    pub fn with_params(&self, q: [f64; 4]) -> Parametric {
        match self {
            Parametric::TwoD(_) => Parametric::TwoD(Psf2DParams {
                a1: q[0],
                a2: q[1],
                b1: q[2],
                b2: q[3],
            }),
            Parametric::As(_) => Parametric::As(PsfAsParams {
                a: q[0],
                b_x: q[1],
                b_y: q[2],
                c: q[3],
            }),
            Parametric::Dh(_) => Parametric::Dh(PsfDhParams {
                a: q[0],
                b: q[1],
                c: q[2],
                d: q[3],
            }),
        }
    }

    /// Closed-form value at displacement `(dx, dy, dz)` nm.
    pub fn eval(&self, dx: f64, dy: f64, dz: f64) -> f64 {
        match self {
            Parametric::TwoD(p) => {
                let w = (1.0 + dz.abs()).powi(2);
                let r2 = dx * dx + dy * dy;
                p.a1 * (-p.b1 * r2 / w).exp() + p.a2 * (-p.b2 * r2 / w).exp()
            }
            Parametric::As(p) => {
                let d_x = (dz - p.b_x).powi(2) + p.c;
                let d_y = (dz - p.b_y).powi(2) + p.c;
                (-p.a * dx * dx / d_x - p.a * dy * dy / d_y).exp()
            }
            Parametric::Dh(p) => {
                let phi = p.b * dz + p.c;
                let sx = p.d * phi.cos();
                let sy = p.d * phi.sin();
                let lobe1 = (-p.a * (dx - sx).powi(2) - p.a * (dy - sy).powi(2)).exp();
                let lobe2 = (-p.a * (dx + sx).powi(2) - p.a * (dy + sy).powi(2)).exp();
                lobe1 + lobe2
            }
        }
    }

    /// Value plus analytic gradient with respect to position and parameters.
    ///
    /// The 2D kind is not differentiable in `dz` at `dz = 0` (the `|dz|`
    /// kink); the subgradient 0 is returned there.
    pub fn eval_grad(&self, dx: f64, dy: f64, dz: f64) -> ParametricGrad {
        match self {
            Parametric::TwoD(p) => {
                let s = 1.0 + dz.abs();
                let w = s * s;
                let r2 = dx * dx + dy * dy;
                let e1 = (-p.b1 * r2 / w).exp();
                let e2 = (-p.b2 * r2 / w).exp();
                let value = p.a1 * e1 + p.a2 * e2;
                let common = p.a1 * e1 * p.b1 + p.a2 * e2 * p.b2;
                let dz_sign = if dz > 0.0 {
                    1.0
                } else if dz < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                ParametricGrad {
                    value,
                    d_pos: [
                        -2.0 * dx / w * common,
                        -2.0 * dy / w * common,
                        2.0 * r2 * s * dz_sign / (w * w) * common,
                    ],
                    d_params: [e1, e2, -p.a1 * e1 * r2 / w, -p.a2 * e2 * r2 / w],
                }
            }
            Parametric::As(p) => {
                let ux = dz - p.b_x;
                let uy = dz - p.b_y;
                let d_x = ux * ux + p.c;
                let d_y = uy * uy + p.c;
                let qx = dx * dx / d_x;
                let qy = dy * dy / d_y;
                let v = (-p.a * (qx + qy)).exp();
                ParametricGrad {
                    value: v,
                    d_pos: [
                        -2.0 * p.a * dx / d_x * v,
                        -2.0 * p.a * dy / d_y * v,
                        2.0 * p.a * (qx * ux / d_x + qy * uy / d_y) * v,
                    ],
                    d_params: [
                        -(qx + qy) * v,
                        -2.0 * p.a * qx * ux / d_x * v,
                        -2.0 * p.a * qy * uy / d_y * v,
                        p.a * (qx / d_x + qy / d_y) * v,
                    ],
                }
            }
            Parametric::Dh(p) => {
                let phi = p.b * dz + p.c;
                let (sin_phi, cos_phi) = phi.sin_cos();
                let sx = p.d * cos_phi;
                let sy = p.d * sin_phi;
                let r1x = dx - sx;
                let r1y = dy - sy;
                let r2x = dx + sx;
                let r2y = dy + sy;
                let t1 = (-p.a * (r1x * r1x + r1y * r1y)).exp();
                let t2 = (-p.a * (r2x * r2x + r2y * r2y)).exp();
                let dv_dsx = 2.0 * p.a * (t1 * r1x - t2 * r2x);
                let dv_dsy = 2.0 * p.a * (t1 * r1y - t2 * r2y);
                let dv_dphi = dv_dsx * (-sy) + dv_dsy * sx;
                ParametricGrad {
                    value: t1 + t2,
                    d_pos: [
                        -2.0 * p.a * (t1 * r1x + t2 * r2x),
                        -2.0 * p.a * (t1 * r1y + t2 * r2y),
                        dv_dphi * p.b,
                    ],
                    d_params: [
                        -t1 * (r1x * r1x + r1y * r1y) - t2 * (r2x * r2x + r2y * r2y),
                        dv_dphi * dz,
                        dv_dphi,
                        dv_dsx * cos_phi + dv_dsy * sin_phi,
                    ],
                }
            }
        }
    }
}

/// Non-parametric 3D intensity correction, interpolated trilinearly.
///
/// Nodes are laid out on a regular grid with lateral spacing `pixel_size_xy`
/// and axial spacing `z_spacing`, centered (plus `origin`) on the emitter.
/// Queries outside the grid support evaluate to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub pixel_size_xy: f64,
    pub z_spacing: f64,
    /// Offset of the grid center from the emitter, in nm.
    pub origin: [f64; 3],
    /// Node values, x fastest, then y, then z.
    pub values: Vec<f64>,
}

impl PixelMap3D {
    pub fn new(
        nx: usize,
        ny: usize,
        nz: usize,
        pixel_size_xy: f64,
        z_spacing: f64,
        origin: [f64; 3],
        values: Vec<f64>,
    ) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(CoreError::InvalidParam(
                "pixel map needs at least 2 nodes per axis".into(),
            ));
        }
        if !(pixel_size_xy > 0.0 && z_spacing > 0.0) {
            return Err(CoreError::InvalidParam(
                "pixel map spacings must be positive".into(),
            ));
        }
        if values.len() != nx * ny * nz {
            return Err(CoreError::DimMismatch(format!(
                "pixel map expects {} values, got {}",
                nx * ny * nz,
                values.len()
            )));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            pixel_size_xy,
            z_spacing,
            origin,
            values,
        })
    }

    /// All-zero map with the default extent: 26x26 lateral nodes at the given
    /// camera pixel size and z in [-1500, 1500] nm at 100 nm spacing.
    pub fn zeroed_default(pixel_size_xy: f64) -> Self {
        let (nx, ny, nz) = (26, 26, 31);
        Self {
            nx,
            ny,
            nz,
            pixel_size_xy,
            z_spacing: 100.0,
            origin: [0.0; 3],
            values: vec![0.0; nx * ny * nz],
        }
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    /// Position of node `(i, j, k)` relative to the emitter, in nm.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 - (self.nx as f64 - 1.0) / 2.0) * self.pixel_size_xy,
            self.origin[1] + (j as f64 - (self.ny as f64 - 1.0) / 2.0) * self.pixel_size_xy,
            self.origin[2] + (k as f64 - (self.nz as f64 - 1.0) / 2.0) * self.z_spacing,
        ]
    }

    fn fractional(&self, dx: f64, dy: f64, dz: f64) -> Option<[f64; 3]> {
        let u = (dx - self.origin[0]) / self.pixel_size_xy + (self.nx as f64 - 1.0) / 2.0;
        let v = (dy - self.origin[1]) / self.pixel_size_xy + (self.ny as f64 - 1.0) / 2.0;
        let w = (dz - self.origin[2]) / self.z_spacing + (self.nz as f64 - 1.0) / 2.0;
        let inside = (0.0..=(self.nx as f64 - 1.0)).contains(&u)
            && (0.0..=(self.ny as f64 - 1.0)).contains(&v)
            && (0.0..=(self.nz as f64 - 1.0)).contains(&w);
        inside.then_some([u, v, w])
    }

    /// Trilinear interpolation; 0 outside the grid support.
    pub fn eval(&self, dx: f64, dy: f64, dz: f64) -> f64 {
        match self.interp(dx, dy, dz) {
            Some(t) => t.value,
            None => 0.0,
        }
    }

    /// Interpolated value, spatial gradient and the trilinear node weights.
    /// Returns `None` outside the support.
    pub fn interp(&self, dx: f64, dy: f64, dz: f64) -> Option<PixmapInterp> {
        let [u, v, w] = self.fractional(dx, dy, dz)?;
        let i0 = (u.floor() as usize).min(self.nx - 2);
        let j0 = (v.floor() as usize).min(self.ny - 2);
        let k0 = (w.floor() as usize).min(self.nz - 2);
        let fu = u - i0 as f64;
        let fv = v - j0 as f64;
        let fw = w - k0 as f64;

        let mut value = 0.0;
        let mut grad = [0.0f64; 3];
        let mut weights = [(0usize, 0.0f64); 8];
        let mut slot = 0;
        for (dk, wz, dwz) in [(0usize, 1.0 - fw, -1.0), (1, fw, 1.0)] {
            for (dj, wy, dwy) in [(0usize, 1.0 - fv, -1.0), (1, fv, 1.0)] {
                for (di, wx, dwx) in [(0usize, 1.0 - fu, -1.0), (1, fu, 1.0)] {
                    let idx = self.node_index(i0 + di, j0 + dj, k0 + dk);
                    let node = self.values[idx];
                    let wgt = wx * wy * wz;
                    value += node * wgt;
                    grad[0] += node * dwx * wy * wz / self.pixel_size_xy;
                    grad[1] += node * wx * dwy * wz / self.pixel_size_xy;
                    grad[2] += node * wx * wy * dwz / self.z_spacing;
                    weights[slot] = (idx, wgt);
                    slot += 1;
                }
            }
        }
        Some(PixmapInterp {
            value,
            d_pos: grad,
            node_weights: weights,
        })
    }
}

/// Result of one trilinear interpolation.
#[derive(Debug, Clone, Copy)]
pub struct PixmapInterp {
    pub value: f64,
    pub d_pos: [f64; 3],
    /// The 8 surrounding nodes as (flat index, weight) pairs.
    pub node_weights: [(usize, f64); 8],
}

/// Value and gradients of a full PSF model evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PsfGrad {
    pub value: f64,
    /// Derivatives with respect to `(dx, dy, dz)`.
    pub d_pos: [f64; 3],
    /// Derivatives with respect to the four parametric shape parameters.
    pub d_params: [f64; 4],
    /// Trilinear node weights of the pixel map at this query, when a pixmap
    /// is present and the query lies inside its support.
    pub pixmap_weights: Option<[(usize, f64); 8]>,
}

/// A full PSF model: parametric component plus optional pixel map.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfModel {
    pub parametric: Parametric,
    pub pixmap: Option<PixelMap3D>,
}

impl PsfModel {
    pub fn parametric(parametric: Parametric) -> Self {
        Self {
            parametric,
            pixmap: None,
        }
    }

    /// `parametric + pixmap`, clamped at 0 from below.
    pub fn eval(&self, dx: f64, dy: f64, dz: f64) -> f64 {
        let mut v = self.parametric.eval(dx, dy, dz);
        if let Some(map) = &self.pixmap {
            v += map.eval(dx, dy, dz);
        }
        v.max(0.0)
    }

    /// Value and gradients of the clamped sum. Inside the clamp (sum <= 0)
    /// all derivatives are 0.
    pub fn eval_grad(&self, dx: f64, dy: f64, dz: f64) -> PsfGrad {
        let par = self.parametric.eval_grad(dx, dy, dz);
        let mut value = par.value;
        let mut d_pos = par.d_pos;
        let mut pix = None;
        if let Some(map) = &self.pixmap {
            if let Some(t) = map.interp(dx, dy, dz) {
                value += t.value;
                for ax in 0..3 {
                    d_pos[ax] += t.d_pos[ax];
                }
                pix = Some(t.node_weights);
            }
        }
        if value <= 0.0 {
            return PsfGrad {
                value: 0.0,
                d_pos: [0.0; 3],
                d_params: [0.0; 4],
                pixmap_weights: None,
            };
        }
        PsfGrad {
            value,
            d_pos,
            d_params: par.d_params,
            pixmap_weights: pix,
        }
    }

    /// Render the emitter's contribution onto the pixel grid:
    /// `patch[u, v] = photons * psf(center_u - x, center_v - y, -z)`.
    ///
    /// The PSF is sampled at pixel centers; `oversample = k > 1` instead
    /// averages a k x k subgrid per pixel.
    pub fn render_patch(
        &self,
        x: f64,
        y: f64,
        z: f64,
        photons: f64,
        grid: &GridSpec,
        oversample: usize,
    ) -> Image {
        let mut img = Image::zeros(grid.width, grid.height);
        self.add_patch(&mut img, x, y, z, photons, grid, oversample);
        img
    }

    /// `render_patch` accumulated into an existing buffer.
    pub fn add_patch(
        &self,
        img: &mut Image,
        x: f64,
        y: f64,
        z: f64,
        photons: f64,
        grid: &GridSpec,
        oversample: usize,
    ) {
        let k = oversample.max(1);
        let sub = 1.0 / k as f64;
        for iy in 0..grid.height {
            for ix in 0..grid.width {
                let (cx, cy) = grid.center(ix, iy);
                let v = if k == 1 {
                    self.eval(cx - x, cy - y, -z)
                } else {
                    let mut acc = 0.0;
                    for sy in 0..k {
                        for sx in 0..k {
                            let ox = ((sx as f64 + 0.5) * sub - 0.5) * grid.pixel_size;
                            let oy = ((sy as f64 + 0.5) * sub - 0.5) * grid.pixel_size;
                            acc += self.eval(cx + ox - x, cy + oy - y, -z);
                        }
                    }
                    acc * sub * sub
                };
                img.data[iy * grid.width + ix] += photons * v;
            }
        }
    }
}
