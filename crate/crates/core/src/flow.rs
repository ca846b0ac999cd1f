//! Dense backward-mapping flows and their file formats.
//!
//! A [`DenseFlow`] stores, for every output pixel, the normalized source
//! location it reads from. The Middlebury `.flo` format instead stores pixel
//! displacements `(u, v)` relative to the pixel itself.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix2x3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};
use crate::tessellation::DomainBounds;

/// `"PIEH"` read as a little-endian f32.
const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// H×W grid of normalized sampling coordinates, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowRepr", into = "FlowRepr")]
pub struct DenseFlow {
    height: usize,
    width: usize,
    bounds: DomainBounds,
    map: Vec<Point2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FlowRepr {
    height: usize,
    width: usize,
    #[serde(default)]
    bounds: DomainBounds,
    map: Vec<[f64; 2]>,
}

impl TryFrom<FlowRepr> for DenseFlow {
    type Error = CpabError;

    fn try_from(r: FlowRepr) -> Result<Self> {
        let map = r.map.into_iter().map(|[x, y]| Point2::new(x, y)).collect();
        DenseFlow::from_map(r.height, r.width, r.bounds, map)
    }
}

impl From<DenseFlow> for FlowRepr {
    fn from(f: DenseFlow) -> Self {
        FlowRepr {
            height: f.height,
            width: f.width,
            bounds: f.bounds,
            map: f.map.into_iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl DenseFlow {
    pub fn from_map(height: usize, width: usize, bounds: DomainBounds, map: Vec<Point2<f64>>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CpabError::invalid(format!("flow size must be positive, got {height}x{width}")));
        }
        if map.len() != height * width {
            return Err(CpabError::invalid(format!(
                "flow map has {} entries, expected {height}x{width}",
                map.len()
            )));
        }
        if let Some(i) = map.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(CpabError::invalid(format!("flow entry {i} is not finite")));
        }
        Ok(Self { height, width, bounds, map })
    }

    /// Pixel-center grid: every pixel reads from itself.
    pub fn identity(height: usize, width: usize, bounds: DomainBounds) -> Result<Self> {
        let map = pixel_grid(height, width, &bounds);
        Self::from_map(height, width, bounds, map)
    }

    /// Flow built from a per-pixel function of the pixel-center coordinate.
    pub fn from_fn<F>(height: usize, width: usize, bounds: DomainBounds, f: F) -> Result<Self>
    where
        F: Fn(&Point2<f64>) -> Point2<f64>,
    {
        let map = pixel_grid(height, width, &bounds).iter().map(f).collect();
        Self::from_map(height, width, bounds, map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bounds(&self) -> &DomainBounds {
        &self.bounds
    }

    pub fn map(&self) -> &[Point2<f64>] {
        &self.map
    }

    pub fn get(&self, row: usize, col: usize) -> Point2<f64> {
        self.map[row * self.width + col]
    }

    pub fn same_grid(&self, other: &DenseFlow) -> bool {
        self.height == other.height && self.width == other.width && self.bounds == other.bounds
    }

    /// Source location of pixel `(row, col)` in pixel units (pixel centers at integers).
    pub fn source_pixel(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.get(row, col);
        (
            (p.x - self.bounds.xmin) / self.bounds.width() * self.width as f64 - 0.5,
            (p.y - self.bounds.ymin) / self.bounds.height() * self.height as f64 - 0.5,
        )
    }

    /// Per-pixel displacement `(u, v)` in pixels. Exactly zero where the map is the identity.
    pub fn displacements(&self) -> Vec<[f64; 2]> {
        let sx = self.width as f64 / self.bounds.width();
        let sy = self.height as f64 / self.bounds.height();
        let mut out = Vec::with_capacity(self.map.len());
        for row in 0..self.height {
            let cy = self.bounds.pixel_center_y(row, self.height);
            for col in 0..self.width {
                let cx = self.bounds.pixel_center_x(col, self.width);
                let p = self.get(row, col);
                out.push([(p.x - cx) * sx, (p.y - cy) * sy]);
            }
        }
        out
    }

    /// Inverse of [`displacements`](Self::displacements).
    pub fn from_displacements(height: usize, width: usize, bounds: DomainBounds, disp: &[[f64; 2]]) -> Result<Self> {
        if disp.len() != height * width {
            return Err(CpabError::invalid("displacement count does not match flow size"));
        }
        let sx = bounds.width() / width as f64;
        let sy = bounds.height() / height as f64;
        let mut map = Vec::with_capacity(disp.len());
        for row in 0..height {
            let cy = bounds.pixel_center_y(row, height);
            for col in 0..width {
                let cx = bounds.pixel_center_x(col, width);
                let [u, v] = disp[row * width + col];
                map.push(Point2::new(cx + u * sx, cy + v * sy));
            }
        }
        Self::from_map(height, width, bounds, map)
    }

    /// Largest coordinate difference to another flow on the same grid.
    pub fn max_abs_diff(&self, other: &DenseFlow) -> f64 {
        self.map
            .iter()
            .zip(&other.map)
            .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn write_flo<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&FLO_MAGIC)?;
        w.write_all(&(self.width as i32).to_le_bytes())?;
        w.write_all(&(self.height as i32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.map.len() * 8);
        for [u, v] in self.displacements() {
            buf.extend_from_slice(&(u as f32).to_le_bytes());
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a `.flo` stream; the file carries no bounds, so `bounds` is supplied.
    pub fn read_flo<R: Read>(mut r: R, bounds: DomainBounds) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if header[0..4] != FLO_MAGIC {
            return Err(CpabError::Format("missing PIEH magic in .flo file".into()));
        }
        let width = i32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(header[8..12].try_into().unwrap());
        if width <= 0 || height <= 0 || (width as i64) * (height as i64) > (1 << 28) {
            return Err(CpabError::Format(format!("implausible .flo size {width}x{height}")));
        }
        let (width, height) = (width as usize, height as usize);
        let mut body = vec![0u8; width * height * 8];
        r.read_exact(&mut body)
            .map_err(|_| CpabError::Format("truncated .flo payload".into()))?;
        let disp: Vec<[f64; 2]> = body
            .chunks_exact(8)
            .map(|c| {
                let u = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let v = f32::from_le_bytes(c[4..8].try_into().unwrap());
                [u as f64, v as f64]
            })
            .collect();
        Self::from_displacements(height, width, bounds, &disp)
    }

    pub fn save_flo(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_flo(std::io::BufWriter::new(f))
    }

    pub fn load_flo(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_flo(std::io::BufReader::new(f), DomainBounds::unit())
    }

    /// Displacement magnitude scaled to `[0, 255]`, row-major grayscale.
    pub fn magnitude_image(&self) -> Vec<u8> {
        let mags: Vec<f64> = self.displacements().iter().map(|[u, v]| u.hypot(*v)).collect();
        let max = mags.iter().cloned().fold(0.0, f64::max);
        mags.iter()
            .map(|m| if max > 0.0 { (m / max * 255.0).round() as u8 } else { 0 })
            .collect()
    }
}

/// Row-major pixel-center coordinates of an H×W image over `bounds`.
pub fn pixel_grid(height: usize, width: usize, bounds: &DomainBounds) -> Vec<Point2<f64>> {
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        let y = bounds.pixel_center_y(row, height);
        for col in 0..width {
            out.push(Point2::new(bounds.pixel_center_x(col, width), y));
        }
    }
    out
}

/// Applies a 2×3 affine map to a point.
pub fn apply_affine(a: &Matrix2x3<f64>, p: &Point2<f64>) -> Point2<f64> {
    Point2::from(a * Vector3::new(p.x, p.y, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_displacement() {
        let f = DenseFlow::identity(7, 5, DomainBounds::unit()).unwrap();
        assert!(f.displacements().iter().all(|&[u, v]| u == 0.0 && v == 0.0));
        assert_eq!(f.get(0, 0), Point2::new(0.1, 1.0 / 14.0));
    }

    #[test]
    fn flo_header_layout() {
        let f = DenseFlow::identity(2, 3, DomainBounds::unit()).unwrap();
        let mut buf = Vec::new();
        f.write_flo(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PIEH");
        assert_eq!(f32::from_le_bytes(buf[0..4].try_into().unwrap()), 202021.25);
        assert_eq!(i32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 12 + 2 * 3 * 8);
    }

    #[test]
    fn flo_roundtrip_translation() {
        let f = DenseFlow::from_fn(4, 6, DomainBounds::unit(), |p| Point2::new(p.x + 0.25, p.y - 0.5)).unwrap();
        let mut buf = Vec::new();
        f.write_flo(&mut buf).unwrap();
        let disp = f.displacements();
        assert!(disp.iter().all(|d| (d[0] - 1.5).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12));
        let back = DenseFlow::read_flo(buf.as_slice(), DomainBounds::unit()).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-7);
    }

    #[test]
    fn flo_rejects_garbage() {
        assert!(DenseFlow::read_flo(&b"NOPE\x01\0\0\0\x01\0\0\0"[..], DomainBounds::unit()).is_err());
        let mut buf = Vec::new();
        DenseFlow::identity(2, 2, DomainBounds::unit()).unwrap().write_flo(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(DenseFlow::read_flo(buf.as_slice(), DomainBounds::unit()).is_err());
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(DenseFlow::from_map(2, 2, DomainBounds::unit(), vec![Point2::origin(); 3]).is_err());
        assert!(DenseFlow::from_map(0, 2, DomainBounds::unit(), vec![]).is_err());
        let mut m = vec![Point2::origin(); 4];
        m[2].x = f64::NAN;
        assert!(DenseFlow::from_map(2, 2, DomainBounds::unit(), m).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let f = DenseFlow::from_fn(3, 2, DomainBounds::unit(), |p| Point2::new(p.y, p.x)).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<DenseFlow>(&s).unwrap(), f);
    }
}
