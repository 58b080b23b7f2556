//! Spherical projection between sensor-frame points and range images.
//!
//! Rows grow downward from the top beam, columns run from yaw `+pi` at the left
//! edge to `-pi` at the right edge. Pixel `(r, c)` owns the continuous square
//! `[r, r+1) x [c, c+1)`; its center `(r + 0.5, c + 0.5)` is used for rays.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorIntrinsics {
    /// Beam count `H`.
    pub height: usize,
    /// Horizontal resolution `W`.
    pub width: usize,
    /// Upper FOV bound in degrees.
    pub fov_up_deg: f64,
    /// Lower FOV bound in degrees (usually negative).
    pub fov_down_deg: f64,
}

impl SensorIntrinsics {
    pub fn new(height: usize, width: usize, fov_up_deg: f64, fov_down_deg: f64) -> Result<Self> {
        let s = Self {
            height,
            width,
            fov_up_deg,
            fov_down_deg,
        };
        s.validate()?;
        Ok(s)
    }

    /// 64 x 1024, +3 / -25 degrees.
    pub fn semantic_kitti() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
        }
    }

    /// 64 x 1024, +2 / -24.4 degrees.
    pub fn kitti360() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up_deg: 2.0,
            fov_down_deg: -24.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidIntrinsics(m));
        if self.height < 1 {
            return bad("height must be at least 1".into());
        }
        if self.width < 2 {
            return bad("width must be at least 2".into());
        }
        if !(self.fov_up_deg.is_finite() && self.fov_down_deg.is_finite()) {
            return bad("non-finite field of view".into());
        }
        if self.fov_up_deg <= self.fov_down_deg {
            return bad(format!("fov_up {} must exceed fov_down {}", self.fov_up_deg, self.fov_down_deg));
        }
        if self.fov_v_deg() <= 0.0 {
            return bad("vertical field of view must be positive".into());
        }
        Ok(())
    }

    /// `|f_up| + |f_down|` in degrees.
    pub fn fov_v_deg(&self) -> f64 {
        self.fov_up_deg.abs() + self.fov_down_deg.abs()
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pitch and yaw (radians) of a continuous pixel coordinate.
    pub fn pixel_to_angles(&self, h: f64, w: f64) -> (f64, f64) {
        let fh = self.height as f64;
        let fw = self.width as f64;
        let alpha = self.fov_up_deg.abs() - h * self.fov_v_deg() / fh;
        let beta = -(2.0 * w - fw) * PI / fw;
        (alpha.to_radians(), beta)
    }

    /// Continuous pixel coordinate and depth of a sensor-frame point.
    pub fn point_to_pixel(&self, p: [f64; 3]) -> Result<(f64, f64, f64)> {
        let d = norm(p);
        if d == 0.0 {
            return Err(Error::ZeroDepth);
        }
        let fv = self.fov_v_deg().to_radians();
        let h = (1.0 - ((p[2] / d).asin() + self.fov_down_deg.abs().to_radians()) / fv) * self.height as f64;
        let w = 0.5 * (1.0 - p[1].atan2(p[0]) / PI) * self.width as f64;
        Ok((h, w, d))
    }

    /// Unit direction through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let (a, b) = self.pixel_to_angles(row as f64 + 0.5, col as f64 + 0.5);
        angles_to_direction(a, b)
    }

    /// Directions of all pixel centers, row-major.
    pub fn pixel_directions(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.num_pixels());
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(self.pixel_direction(r, c));
            }
        }
        out
    }

    /// Angular size of one row in radians.
    pub fn row_step_rad(&self) -> f64 {
        self.fov_v_deg().to_radians() / self.height as f64
    }
}

pub fn angles_to_direction(alpha: f64, beta: f64) -> [f64; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    [ca * cb, ca * sb, sa]
}

pub fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub xyz: [f64; 3],
    pub intensity: f32,
    pub label: u32,
}

impl LidarPoint {
    pub fn new(xyz: [f64; 3], intensity: f32, label: u32) -> Self {
        Self { xyz, intensity, label }
    }

    pub fn depth(&self) -> f64 {
        norm(self.xyz)
    }
}

/// `H x W` pseudo image. Pixels without a return hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub intensity: Vec<f32>,
    pub label: Vec<u32>,
    pub mask: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            label: vec![0; n],
            mask: vec![false; n],
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn returns(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks the zero-fill contract and channel lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.depth.len(), self.intensity.len(), self.label.len(), self.mask.len()] != [n; 4] {
            return Err(Error::ShapeMismatch(format!("range image channels do not match {}x{}", self.height, self.width)));
        }
        for i in 0..n {
            let ok = if self.mask[i] {
                self.depth[i] > 0.0 && self.depth[i].is_finite()
            } else {
                self.depth[i] == 0.0 && self.intensity[i] == 0.0
            };
            if !ok {
                return Err(Error::Format(format!("pixel {i} violates the return-mask contract")));
            }
        }
        Ok(())
    }

    /// Writes the little-endian container: magic `RIMG`, `u32` H, W, channel
    /// count (3), the depth/intensity/label channels as row-major `f32`, then
    /// one mask byte per pixel.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        for v in [self.height as u32, self.width as u32, 3] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 13);
        for v in &self.depth {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.intensity {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.label {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend(self.mask.iter().map(|&m| m as u8));
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| Error::Format(e.to_string()))?;
        if &head[..4] != CONTAINER_MAGIC {
            return Err(Error::Format("not a range image container".into()));
        }
        let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (u(4), u(8), u(12));
        if channels != 3 {
            return Err(Error::Format(format!("expected 3 channels, found {channels}")));
        }
        let n = height * width;
        let mut body = vec![0u8; n * 13];
        r.read_exact(&mut body).map_err(|e| Error::Format(e.to_string()))?;
        let chan = |k: usize| -> Vec<f32> {
            body[k * n * 4..(k + 1) * n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let depth = chan(0);
        let intensity = chan(1);
        let label = chan(2).into_iter().map(|v| v as u32).collect();
        let mask = body[12 * n..].iter().map(|&b| b != 0).collect();
        Ok(Self {
            height,
            width,
            depth,
            intensity,
            label,
            mask,
        })
    }

    /// NPY (format 1.0) export of a `(4, H, W)` little-endian `f32` array with
    /// channels depth, intensity, label, mask.
    pub fn write_npy<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': (4, {}, {}), }}",
            self.height, self.width
        );
        // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
        let total = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - total % 64) % 64));
        header.push('\n');
        w.write_all(b"\x93NUMPY\x01\x00")?;
        w.write_all(&(header.len() as u16).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * 16);
        let label = self.label.iter().map(|&v| v as f32);
        let mask = self.mask.iter().map(|&m| m as u8 as f32);
        for v in self.depth.iter().copied().chain(self.intensity.iter().copied()).chain(label).chain(mask) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"RIMG";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub kept: usize,
    pub occluded: usize,
    pub out_of_fov: usize,
}

/// Z-buffered rasterization: the nearest point per pixel wins, exact depth ties
/// go to the earlier input. Points outside the vertical FOV (or at the origin)
/// are skipped and counted.
pub fn project_cloud(points: &[LidarPoint], intr: &SensorIntrinsics) -> (RangeImage, ProjectionStats) {
    let mut img = RangeImage::empty(intr.height, intr.width);
    let mut best = vec![f64::INFINITY; img.len()];
    let mut stats = ProjectionStats::default();
    for p in points {
        let Ok((h, w, d)) = intr.point_to_pixel(p.xyz) else {
            stats.out_of_fov += 1;
            continue;
        };
        if !(h >= 0.0 && h < intr.height as f64) || !d.is_finite() {
            stats.out_of_fov += 1;
            continue;
        }
        let row = h.floor() as usize;
        // w lies in [0, W]; the closed right edge wraps to column 0.
        let col = (w.floor() as usize) % intr.width;
        let k = img.index(row, col);
        if img.mask[k] {
            stats.occluded += 1;
            if d >= best[k] {
                continue;
            }
        }
        best[k] = d;
        img.depth[k] = d as f32;
        img.intensity[k] = p.intensity;
        img.label[k] = p.label;
        img.mask[k] = true;
    }
    stats.kept = img.returns();
    (img, stats)
}

/// One point per returning pixel, along the pixel-center ray.
pub fn unproject(img: &RangeImage, intr: &SensorIntrinsics) -> Vec<LidarPoint> {
    let mut out = Vec::with_capacity(img.returns());
    for r in 0..img.height {
        for c in 0..img.width {
            let k = img.index(r, c);
            if !img.mask[k] {
                continue;
            }
            let dir = intr.pixel_direction(r, c);
            let d = img.depth[k] as f64;
            out.push(LidarPoint::new([dir[0] * d, dir[1] * d, dir[2] * d], img.intensity[k], img.label[k]));
        }
    }
    out
}
