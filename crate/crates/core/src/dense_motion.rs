//! Confidence-weighted combination of transformations into one dense flow,
//! and backward warping of images through a flow.
//!
//! Map 0 always weights the background affine transformation; maps `1..=N`
//! weight the local CPAB flows and map `N + 1` the global one.

use nalgebra::{Matrix2x3, Point2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};
use crate::flow::{apply_affine, DenseFlow};
use crate::tessellation::DomainBounds;

/// Allowed deviation of a per-pixel weight sum from 1.
pub const MASK_SUM_TOL: f64 = 1e-4;

/// Sampling coordinates closer than this (in pixels) to an integer are snapped to it.
const SNAP_TOL: f64 = 1e-9;

/// Row-major image with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(CpabError::invalid(format!(
                "image must be non-empty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(CpabError::invalid("image data length does not match its shape"));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(CpabError::invalid(format!("image value {i} ({}) is outside [0, 1]", data[i])));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// 8-bit samples, `round(v · 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Per-pixel convex weights over `count` transformations, map-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapsRepr", into = "MapsRepr")]
pub struct ConfidenceMaps {
    count: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MapsRepr {
    height: usize,
    width: usize,
    /// One row-major H×W array per transformation.
    maps: Vec<Vec<f64>>,
}

impl TryFrom<MapsRepr> for ConfidenceMaps {
    type Error = CpabError;

    fn try_from(r: MapsRepr) -> Result<Self> {
        let count = r.maps.len();
        if r.maps.iter().any(|m| m.len() != r.height * r.width) {
            return Err(CpabError::Format("mask array size does not match height x width".into()));
        }
        ConfidenceMaps::new(count, r.height, r.width, r.maps.concat())
    }
}

impl From<ConfidenceMaps> for MapsRepr {
    fn from(m: ConfidenceMaps) -> Self {
        let plane = m.height * m.width;
        MapsRepr { height: m.height, width: m.width, maps: m.data.chunks(plane).map(<[f64]>::to_vec).collect() }
    }
}

fn check_shape(count: usize, height: usize, width: usize, len: usize) -> Result<()> {
    if count < 2 || height == 0 || width == 0 {
        return Err(CpabError::invalid(format!(
            "need at least 2 non-empty maps, got {count} of {height}x{width}"
        )));
    }
    if len != count * height * width {
        return Err(CpabError::invalid(format!(
            "mask data has {len} entries, expected {count}x{height}x{width}"
        )));
    }
    Ok(())
}

impl ConfidenceMaps {
    /// Validates already-normalized weights: entries in `[0, 1]`, per-pixel sums within [`MASK_SUM_TOL`] of 1.
    pub fn new(count: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(count, height, width, data.len())?;
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(CpabError::invalid(format!("mask entry {i} ({}) is outside [0, 1]", data[i])));
        }
        let maps = Self { count, height, width, data };
        for p in 0..height * width {
            let sum: f64 = (0..count).map(|k| maps.data[k * height * width + p]).sum();
            if (sum - 1.0).abs() > MASK_SUM_TOL {
                return Err(CpabError::invalid(format!(
                    "weights at pixel ({}, {}) sum to {sum}, not 1",
                    p / width,
                    p % width
                )));
            }
        }
        Ok(maps)
    }

    /// Weight 1 on map `k` everywhere.
    pub fn one_hot(count: usize, k: usize, height: usize, width: usize) -> Result<Self> {
        if k >= count {
            return Err(CpabError::invalid(format!("one-hot index {k} out of range for {count} maps")));
        }
        let plane = height * width;
        let mut data = vec![0.0; count * plane];
        data[k * plane..(k + 1) * plane].fill(1.0);
        Self::new(count, height, width, data)
    }

    pub fn uniform(count: usize, height: usize, width: usize) -> Result<Self> {
        normalize_masks(count, height, width, &vec![1.0; count * height * width])
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn weight(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[(k * self.height + row) * self.width + col]
    }
}

/// Divides each pixel's weights by their sum.
pub fn normalize_masks(count: usize, height: usize, width: usize, raw: &[f64]) -> Result<ConfidenceMaps> {
    check_shape(count, height, width, raw.len())?;
    if let Some(i) = raw.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CpabError::invalid(format!("raw mask entry {i} ({}) is negative or not finite", raw[i])));
    }
    let plane = height * width;
    let mut data = raw.to_vec();
    for p in 0..plane {
        let sum: f64 = (0..count).map(|k| raw[k * plane + p]).sum();
        if sum <= 0.0 {
            return Err(CpabError::invalid(format!(
                "mask weights at pixel ({}, {}) sum to zero",
                p / width,
                p % width
            )));
        }
        for k in 0..count {
            data[k * plane + p] = raw[k * plane + p] / sum;
        }
    }
    ConfidenceMaps::new(count, height, width, data)
}

/// Soft masks from keypoint proximity.
///
/// Local map `k` gets a Gaussian bump of width `sigma` around the centroid of
/// driving set `k`; the background and global maps get constant weights. The
/// result is normalized per pixel.
pub fn keypoint_soft_masks(
    centroids: &[Point2<f64>],
    height: usize,
    width: usize,
    bounds: DomainBounds,
    sigma: f64,
    background_weight: f64,
    global_weight: f64,
) -> Result<ConfidenceMaps> {
    if !(sigma > 0.0 && background_weight >= 0.0 && global_weight >= 0.0) {
        return Err(CpabError::invalid("mask width must be positive and constant weights non-negative"));
    }
    let count = centroids.len() + 2;
    let grid = crate::flow::pixel_grid(height, width, &bounds);
    let plane = height * width;
    let mut raw = vec![0.0; count * plane];
    for (p, x) in grid.iter().enumerate() {
        raw[p] = background_weight;
        for (k, c) in centroids.iter().enumerate() {
            raw[(k + 1) * plane + p] = (-(x - c).norm_squared() / (2.0 * sigma * sigma)).exp();
        }
        raw[(count - 1) * plane + p] = global_weight;
    }
    normalize_masks(count, height, width, &raw)
}

/// Applies an affine map to every pixel center, clamping to the domain.
pub fn apply_affine_grid(a: &Matrix2x3<f64>, height: usize, width: usize, bounds: DomainBounds) -> Result<DenseFlow> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CpabError::invalid("affine map has non-finite entries"));
    }
    DenseFlow::from_fn(height, width, bounds, |p| bounds.clamp(&apply_affine(a, p)))
}

/// `T(p) = M₀(p)·T^A(p) + Σₖ Mₖ(p)·Tₖ(p)` for `flows = [T₁, …, T_{N+1}]`.
pub fn compose_dense_flow(background: &Matrix2x3<f64>, flows: &[DenseFlow], masks: &ConfidenceMaps) -> Result<DenseFlow> {
    let first = flows.first().ok_or_else(|| CpabError::invalid("at least one flow is required"))?;
    if let Some(i) = flows.iter().position(|f| !f.same_grid(first)) {
        return Err(CpabError::invalid(format!("flow {i} has a different grid than flow 0")));
    }
    if masks.count() != flows.len() + 1 {
        return Err(CpabError::invalid(format!(
            "{} flows need {} masks, got {}",
            flows.len(),
            flows.len() + 1,
            masks.count()
        )));
    }
    let (h, w) = (first.height(), first.width());
    if masks.height() != h || masks.width() != w {
        return Err(CpabError::invalid(format!(
            "masks are {}x{} but flows are {h}x{w}",
            masks.height(),
            masks.width()
        )));
    }
    let bg = apply_affine_grid(background, h, w, *first.bounds())?;
    let plane = h * w;
    let m = masks.data();
    let map: Vec<Point2<f64>> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let mut acc = bg.map()[p].coords * m[p];
            for (k, f) in flows.iter().enumerate() {
                acc += f.map()[p].coords * m[(k + 1) * plane + p];
            }
            Point2::from(acc)
        })
        .collect();
    DenseFlow::from_map(h, w, *first.bounds(), map)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP_TOL {
        r
    } else {
        v
    }
}

/// Backward warp: output pixel `p` is the bilinear sample of `src` at `flow(p)`, border-clamped.
pub fn warp_image(src: &Image, flow: &DenseFlow) -> Image {
    let (sh, sw, c) = (src.height, src.width, src.channels);
    let b = flow.bounds();
    let (h, w) = (flow.height(), flow.width());
    let mut out = vec![0.0; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(row, line)| {
        for col in 0..w {
            let p = flow.get(row, col);
            let sx = snap((p.x - b.xmin) / b.width() * sw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let sy = snap((p.y - b.ymin) / b.height() * sh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (p00, p01, p10, p11) = (src.pixel(y0, x0), src.pixel(y0, x1), src.pixel(y1, x0), src.pixel(y1, x1));
            for ch in 0..c {
                let top = (1.0 - fx) * p00[ch] + fx * p01[ch];
                let bottom = (1.0 - fx) * p10[ch] + fx * p11[ch];
                line[col * c + ch] = (1.0 - fy) * top + fy * bottom;
            }
        }
    });
    Image { height: h, width: w, channels: c, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> DomainBounds {
        DomainBounds::unit()
    }

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        Image::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        // N = 1: three maps over a single pixel
        let m = normalize_masks(3, 1, 1, &[2.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.data(), &[0.5, 0.25, 0.25]);
        let u = ConfidenceMaps::uniform(12, 2, 3).unwrap();
        assert!(u.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let already = [0.2, 0.7, 0.8, 0.3];
        let n = normalize_masks(2, 1, 2, &already).unwrap();
        for (a, b) in n.data().iter().zip(already) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalize_errors() {
        let err = normalize_masks(2, 1, 2, &[1.0, 0.0, 1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("pixel (0, 1)"), "{err}");
        assert!(normalize_masks(2, 1, 1, &[-1.0, 2.0]).is_err());
        assert!(normalize_masks(2, 1, 1, &[1.0]).is_err());
    }

    #[test]
    fn maps_validation() {
        assert!(ConfidenceMaps::new(2, 1, 1, vec![0.5, 0.49]).is_err());
        assert!(ConfidenceMaps::new(2, 1, 1, vec![0.5, 0.49995]).is_ok());
        assert!(ConfidenceMaps::new(2, 1, 1, vec![1.5, -0.5]).is_err());
        assert!(ConfidenceMaps::one_hot(3, 3, 2, 2).is_err());
    }

    #[test]
    fn one_hot_selects_flow() {
        let f1 = DenseFlow::from_fn(4, 5, unit(), |p| Point2::new(p.x * 0.9, p.y + 0.01)).unwrap();
        let f2 = DenseFlow::from_fn(4, 5, unit(), |p| Point2::new(p.y, p.x)).unwrap();
        let a = Matrix2x3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0);
        for (k, expected) in [(1, &f1), (2, &f2)] {
            let masks = ConfidenceMaps::one_hot(3, k, 4, 5).unwrap();
            let out = compose_dense_flow(&a, &[f1.clone(), f2.clone()], &masks).unwrap();
            assert_eq!(&out, expected);
        }
    }

    #[test]
    fn background_only_identity() {
        let f = DenseFlow::from_fn(3, 3, unit(), |p| Point2::new(p.y, p.x)).unwrap();
        let masks = ConfidenceMaps::one_hot(2, 0, 3, 3).unwrap();
        let out = compose_dense_flow(&Matrix2x3::identity(), &[f], &masks).unwrap();
        assert_eq!(out, DenseFlow::identity(3, 3, unit()).unwrap());
    }

    #[test]
    fn identical_flows_any_split() {
        let f = DenseFlow::from_fn(3, 4, unit(), |p| Point2::new(0.5 * p.x + 0.2, p.y)).unwrap();
        let raw: Vec<f64> = (0..36).map(|i| if i < 12 { 0.0 } else { (i % 5) as f64 + 0.5 }).collect();
        let masks = normalize_masks(3, 3, 4, &raw).unwrap();
        let out = compose_dense_flow(&Matrix2x3::identity(), &[f.clone(), f.clone()], &masks).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn compose_shape_errors() {
        let f = DenseFlow::identity(3, 3, unit()).unwrap();
        let g = DenseFlow::identity(3, 4, unit()).unwrap();
        let m = ConfidenceMaps::uniform(3, 3, 3).unwrap();
        let a = Matrix2x3::identity();
        assert!(compose_dense_flow(&a, &[f.clone(), g], &m).is_err());
        assert!(compose_dense_flow(&a, &[f.clone()], &m).is_err());
        assert!(compose_dense_flow(&a, &[], &m).is_err());
        let m2 = ConfidenceMaps::uniform(2, 2, 3).unwrap();
        assert!(compose_dense_flow(&a, &[f], &m2).is_err());
    }

    #[test]
    fn affine_grid_examples() {
        let id = apply_affine_grid(&Matrix2x3::identity(), 4, 6, unit()).unwrap();
        assert_eq!(id, DenseFlow::identity(4, 6, unit()).unwrap());
        let shift = apply_affine_grid(&Matrix2x3::new(1.0, 0.0, 0.1, 0.0, 1.0, 0.0), 4, 6, unit()).unwrap();
        for (a, b) in shift.map().iter().zip(id.map()) {
            assert!((a.x - (b.x + 0.1).min(1.0)).abs() < 1e-15 && a.y == b.y);
        }
        let scale = apply_affine_grid(&Matrix2x3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0), 4, 4, unit()).unwrap();
        // centers 0.125, 0.375, 0.625, 0.875 → 0.25, 0.75, 1 (clamped), 1
        let xs: Vec<f64> = (0..4).map(|c| scale.get(0, c).x).collect();
        assert_eq!(xs, vec![0.25, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn warp_identity_exact() {
        let img = ramp(5, 7);
        let out = warp_image(&img, &DenseFlow::identity(5, 7, unit()).unwrap());
        assert_eq!(out, img);
    }

    #[test]
    fn warp_one_pixel_shift() {
        let (h, w) = (4, 6);
        let img = ramp(h, w);
        let flow = DenseFlow::from_fn(h, w, unit(), |p| Point2::new(p.x + 1.0 / w as f64, p.y)).unwrap();
        let out = warp_image(&img, &flow);
        for r in 0..h {
            for c in 0..w {
                assert_eq!(out.pixel(r, c), img.pixel(r, (c + 1).min(w - 1)));
            }
        }
    }

    #[test]
    fn warp_constant_flow() {
        let img = ramp(6, 6);
        let target = Point2::new(DomainBounds::unit().pixel_center_x(2, 6), DomainBounds::unit().pixel_center_y(4, 6));
        let flow = DenseFlow::from_fn(3, 8, unit(), |_| target).unwrap();
        let out = warp_image(&img, &flow);
        assert_eq!(out.height(), 3);
        assert!(out.data().iter().all(|&v| v == img.pixel(4, 2)[0]));
    }

    #[test]
    fn warp_bilinear_midpoint() {
        let img = Image::new(1, 2, 1, vec![0.2, 0.6]).unwrap();
        let flow = DenseFlow::from_fn(1, 1, unit(), |_| Point2::new(0.5, 0.5)).unwrap();
        assert!((warp_image(&img, &flow).data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn soft_masks_normalized() {
        let c = [Point2::new(0.2, 0.2), Point2::new(0.8, 0.7)];
        let m = keypoint_soft_masks(&c, 8, 8, unit(), 0.1, 0.1, 0.2).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.weight(1, 1, 1) > m.weight(2, 1, 1));
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.2]).is_err());
        let img = Image::from_u8(1, 2, 3, &[0, 128, 255, 1, 2, 3]).unwrap();
        assert_eq!(img.to_u8(), vec![0, 128, 255, 1, 2, 3]);
    }
}
