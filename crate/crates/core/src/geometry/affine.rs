use serde::{Deserialize, Serialize};

use crate::{Error, ImagePlane, Result};

const DET_EPS: f64 = 1e-9;

pub type Point = [f64; 2];

/// 2×3 affine map `[[m00,m01,m02],[m10,m11,m12]]` from source to target pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub m: [[f64; 3]; 2],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Self {
        AffineParams { m }
    }

    pub fn scaling(k: f64) -> Self {
        AffineParams {
            m: [[k, 0.0, 0.0], [0.0, k, 0.0]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn apply(&self, [x, y]: Point) -> Point {
        let m = &self.m;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineParams) -> AffineParams {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        AffineParams { m }
    }

    pub fn max_abs_diff(&self, other: &AffineParams) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn triangle_det(p: &[Point; 3]) -> f64 {
    (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])
}

/// The affine map taking each `src[i]` to `dst[i]`.
pub fn affine_from_boxes(src: &[Point; 3], dst: &[Point; 3]) -> Result<AffineParams> {
    let ds = triangle_det(src);
    if ds.abs() < DET_EPS {
        return Err(Error::DegenerateTriangle(ds.abs()));
    }
    let dd = triangle_det(dst);
    if dd.abs() < DET_EPS {
        return Err(Error::DegenerateTriangle(dd.abs()));
    }
    // rows [x y 1]; solve S·(a, b, c)ᵀ = dst coordinate column, via the adjugate of S
    let s = [
        [src[0][0], src[0][1], 1.0],
        [src[1][0], src[1][1], 1.0],
        [src[2][0], src[2][1], 1.0],
    ];
    let det = s[0][0] * (s[1][1] * s[2][2] - s[1][2] * s[2][1]) - s[0][1] * (s[1][0] * s[2][2] - s[1][2] * s[2][0])
        + s[0][2] * (s[1][0] * s[2][1] - s[1][1] * s[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (s[r0][c0] * s[r1][c1] - s[r0][c1] * s[r1][c0]) / det;
        }
    }
    let mut m = [[0.0; 3]; 2];
    for (r, row) in m.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|i| inv[k][i] * dst[i][r]).sum();
        }
    }
    Ok(AffineParams { m })
}

pub fn invert_affine(theta: &AffineParams) -> Result<AffineParams> {
    let det = theta.det();
    if det.abs() <= DET_EPS {
        return Err(Error::SingularTransform(det.abs()));
    }
    let m = &theta.m;
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    Ok(AffineParams {
        m: [
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
        ],
    })
}

/// Bilinear sample at `(x, y)` with replicate-edge extension.
#[inline]
pub(crate) fn sample_bilinear(img: &ImagePlane, x: f64, y: f64, out: &mut [f64]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = img.get_clamped(yi, xi, c);
        if fx == 0.0 && fy == 0.0 {
            *o = v00;
            continue;
        }
        let v01 = img.get_clamped(yi, xi + 1, c);
        let v10 = img.get_clamped(yi + 1, xi, c);
        let v11 = img.get_clamped(yi + 1, xi + 1, c);
        *o = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
}

/// `Φ(I, θ)`: output pixel `p` samples the source at `θ⁻¹·p`.
pub fn warp(image: &ImagePlane, theta: &AffineParams, out_size: (usize, usize)) -> Result<ImagePlane> {
    let (h, w) = out_size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidRange(format!("warp output size {h}x{w}")));
    }
    let inv = invert_affine(theta)?;
    let c = image.channels();
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            let o = (y * w + x) * c;
            sample_bilinear(image, sx, sy, &mut data[o..o + c]);
        }
    }
    ImagePlane::new(h, w, c, data)
}

/// What happened to one crop during [`paste_regions`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCoverage {
    /// Base pixels written by this crop.
    pub pixels: usize,
    /// Pixels that an earlier crop had already written.
    pub overwritten: usize,
    /// Part of the crop fell outside the base image.
    pub clipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub regions: Vec<RegionCoverage>,
}

impl CoverageReport {
    pub fn clipped(&self) -> usize {
        self.regions.iter().filter(|r| r.clipped).count()
    }
}

/// Writes each crop back into `base` through `θ⁻¹`, in list order.
///
/// `theta` is the map that extracted the crop (`crop = warp(base, θ, size)`).
/// A base pixel belongs to the crop when `θ·p` lands inside the crop's pixel
/// grid; it then takes the bilinear crop value there.
pub fn paste_regions(base: &ImagePlane, crops: &[(ImagePlane, AffineParams)]) -> Result<(ImagePlane, CoverageReport)> {
    let mut out = base.clone();
    let mut owner = vec![usize::MAX; base.height() * base.width()];
    let mut report = CoverageReport::default();
    let c = base.channels();
    let mut px = vec![0.0; c];
    for (k, (crop, theta)) in crops.iter().enumerate() {
        if crop.channels() != c {
            return Err(Error::shape(format!("crop has {} channels, base {c}", crop.channels())));
        }
        let inv = invert_affine(theta)?;
        let (ch, cw) = (crop.height() as f64, crop.width() as f64);
        let corners = [[0.0, 0.0], [cw - 1.0, 0.0], [0.0, ch - 1.0], [cw - 1.0, ch - 1.0]].map(|p| inv.apply(p));
        let lo_x = corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi_x = corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let lo_y = corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let hi_y = corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-6;
        let clipped = lo_x < -tol || lo_y < -tol || hi_x > base.width() as f64 - 1.0 + tol || hi_y > base.height() as f64 - 1.0 + tol;
        let x_range = (lo_x.floor().max(0.0) as usize)..=((hi_x.ceil().max(0.0) as usize).min(base.width() - 1));
        let y_range = (lo_y.floor().max(0.0) as usize)..=((hi_y.ceil().max(0.0) as usize).min(base.height() - 1));
        let mut cov = RegionCoverage {
            clipped,
            ..Default::default()
        };
        for y in y_range {
            for x in x_range.clone() {
                let [u, v] = theta.apply([x as f64, y as f64]);
                if u < -tol || v < -tol || u > cw - 1.0 + tol || v > ch - 1.0 + tol {
                    continue;
                }
                sample_bilinear(crop, u.clamp(0.0, cw - 1.0), v.clamp(0.0, ch - 1.0), &mut px);
                for (ci, &val) in px.iter().enumerate() {
                    out.set(y, x, ci, val);
                }
                let o = &mut owner[y * base.width() + x];
                if *o != usize::MAX && *o != k {
                    cov.overwritten += 1;
                }
                *o = k;
                cov.pixels += 1;
            }
        }
        report.regions.push(cov);
    }
    Ok((out, report))
}
