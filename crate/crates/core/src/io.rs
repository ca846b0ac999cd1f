//! File formats: keypoint/affine JSON, images (PNG, PPM/PGM), mask stacks and flows.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use nalgebra::Matrix2x3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dense_motion::{normalize_masks, ConfidenceMaps, Image};
use crate::error::{CpabError, Result};
use crate::fit::KeypointSet;
use crate::flow::DenseFlow;

/// `{"sets": [[[x, y], …], …]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub sets: Vec<KeypointSet>,
}

/// `{"A": [[a11, a12, a13], [a21, a22, a23]]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFile {
    #[serde(rename = "A")]
    pub a: [[f64; 3]; 2],
}

impl AffineFile {
    pub fn matrix(&self) -> Matrix2x3<f64> {
        Matrix2x3::from_fn(|r, c| self.a[r][c])
    }

    pub fn from_matrix(m: &Matrix2x3<f64>) -> Self {
        Self { a: [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]] }
    }
}

/// Mask weights as stored on disk, before validation or normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMaps {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<f64>>,
}

impl RawMaps {
    fn flat(&self) -> Result<Vec<f64>> {
        if self.maps.iter().any(|m| m.len() != self.height * self.width) {
            return Err(CpabError::Format("mask array size does not match height x width".into()));
        }
        Ok(self.maps.concat())
    }

    pub fn normalized(&self) -> Result<ConfidenceMaps> {
        normalize_masks(self.maps.len(), self.height, self.width, &self.flat()?)
    }

    pub fn validated(&self) -> Result<ConfidenceMaps> {
        ConfidenceMaps::new(self.maps.len(), self.height, self.width, self.flat()?)
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Loads a flow from `.flo` (unit bounds) or `.json`.
pub fn load_flow(path: impl AsRef<Path>) -> Result<DenseFlow> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "flo" => DenseFlow::load_flo(path),
        "json" => read_json(path),
        other => Err(CpabError::Format(format!("unknown flow extension '.{other}' (expected .flo or .json)"))),
    }
}

pub fn save_flow(path: impl AsRef<Path>, flow: &DenseFlow) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "flo" => flow.save_flo(path),
        "json" => write_json(path, flow),
        other => Err(CpabError::Format(format!("unknown flow extension '.{other}' (expected .flo or .json)"))),
    }
}

/// Loads a PNG or PNM image; grayscale stays single-channel, everything else becomes RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            Image::from_u8(h, w, 1, img.to_luma8().as_raw())
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            Image::new(h, w, 1, g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        _ => Image::from_u8(h, w, 3, img.to_rgb8().as_raw()),
    }
}

/// Writes an 8-bit image; `.png`, or `.pgm`/`.ppm`/`.pnm` (binary unless `ascii`).
pub fn save_image(path: impl AsRef<Path>, img: &Image, ascii: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_u8();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = if img.channels() == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let file = BufWriter::new(fs::File::create(path)?);
    match extension(path).as_str() {
        "png" => image::codecs::png::PngEncoder::new(file).write_image(&bytes, w, h, color)?,
        "pgm" | "ppm" | "pnm" => {
            let encoding = if ascii { SampleEncoding::Ascii } else { SampleEncoding::Binary };
            let subtype = if img.channels() == 1 {
                PnmSubtype::Graymap(encoding)
            } else {
                PnmSubtype::Pixmap(encoding)
            };
            PnmEncoder::new(file).with_subtype(subtype).write_image(&bytes, w, h, color)?
        }
        other => return Err(CpabError::Format(format!("unknown image extension '.{other}'"))),
    }
    Ok(())
}

/// Writes a grayscale byte buffer as PNG.
pub fn save_gray_png(path: impl AsRef<Path>, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    image::codecs::png::PngEncoder::new(file).write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(())
}

struct PnmTokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> PnmTokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.data[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token().ok_or_else(|| CpabError::Format("unexpected end of PGM data".into()))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CpabError::Format(format!("bad PGM number '{}'", String::from_utf8_lossy(t))))
    }
}

/// Parses concatenated PGM pages (`P2` or `P5`, 8- or 16-bit) into weights scaled by `maxval`.
pub fn read_pgm_stack(data: &[u8]) -> Result<RawMaps> {
    let mut tok = PnmTokens { data, pos: 0 };
    let mut maps = Vec::new();
    let mut shape = None;
    loop {
        tok.skip_space();
        if tok.pos >= data.len() {
            break;
        }
        let magic = tok.token().unwrap_or_default();
        let binary = match magic {
            b"P5" => true,
            b"P2" => false,
            _ => return Err(CpabError::Format("mask stack pages must be P2 or P5 PGM".into())),
        };
        let (w, h, maxval) = (tok.number()?, tok.number()?, tok.number()?);
        if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
            return Err(CpabError::Format(format!("bad PGM header {w}x{h} maxval {maxval}")));
        }
        if *shape.get_or_insert((h, w)) != (h, w) {
            return Err(CpabError::Format("mask stack pages differ in size".into()));
        }
        let scale = maxval as f64;
        let mut page = Vec::with_capacity(w * h);
        if binary {
            tok.pos += 1; // single whitespace after maxval
            let bytes_per = if maxval > 255 { 2 } else { 1 };
            let end = tok.pos + w * h * bytes_per;
            if end > data.len() {
                return Err(CpabError::Format("truncated PGM page".into()));
            }
            for c in data[tok.pos..end].chunks_exact(bytes_per) {
                let v = if bytes_per == 2 { u16::from_be_bytes([c[0], c[1]]) as usize } else { c[0] as usize };
                page.push(v as f64 / scale);
            }
            tok.pos = end;
        } else {
            for _ in 0..w * h {
                page.push(tok.number()? as f64 / scale);
            }
        }
        maps.push(page);
    }
    let (height, width) = shape.ok_or_else(|| CpabError::Format("empty mask stack".into()))?;
    Ok(RawMaps { height, width, maps })
}

/// Writes maps as concatenated 16-bit binary PGM pages.
pub fn write_pgm_stack(maps: &ConfidenceMaps) -> Vec<u8> {
    let (h, w) = (maps.height(), maps.width());
    let mut out = Vec::new();
    for page in maps.data().chunks(h * w) {
        out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
        for v in page {
            out.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
        }
    }
    out
}

/// Loads masks from `.json` or a multi-page `.pgm`; `normalize` rescales each pixel to sum 1.
pub fn load_masks(path: impl AsRef<Path>, normalize: bool) -> Result<ConfidenceMaps> {
    let path = path.as_ref();
    let raw = match extension(path).as_str() {
        "json" => read_json::<RawMaps>(path)?,
        "pgm" => read_pgm_stack(&fs::read(path)?)?,
        other => return Err(CpabError::Format(format!("unknown mask extension '.{other}'"))),
    };
    if normalize {
        raw.normalized()
    } else {
        raw.validated()
    }
}

/// Flow visualization: displacement magnitude as a grayscale PNG.
pub fn save_flow_png(path: impl AsRef<Path>, flow: &DenseFlow) -> Result<()> {
    save_gray_png(path, flow.height(), flow.width(), &flow.magnitude_image())
}
