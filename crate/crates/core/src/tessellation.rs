//! Regular grid partition of the image domain and the point-to-cell index function.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};

/// Axis-aligned rectangle that the tessellation covers, in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct DomainBounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl DomainBounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let finite = [xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite());
        if !finite || xmin >= xmax || ymin >= ymax {
            return Err(CpabError::invalid(format!(
                "bounds must satisfy xmin < xmax and ymin < ymax, got [{xmin}, {xmax}, {ymin}, {ymax}]"
            )));
        }
        Ok(Self { xmin, xmax, ymin, ymax })
    }

    /// The unit square `[0, 1]²`.
    pub const fn unit() -> Self {
        Self { xmin: 0.0, xmax: 1.0, ymin: 0.0, ymax: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn clamp(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new(p.x.clamp(self.xmin, self.xmax), p.y.clamp(self.ymin, self.ymax))
    }

    /// Normalized x coordinate of the center of pixel column `px` in an image `width` wide.
    pub fn pixel_center_x(&self, px: usize, width: usize) -> f64 {
        self.xmin + (px as f64 + 0.5) / width as f64 * self.width()
    }

    pub fn pixel_center_y(&self, py: usize, height: usize) -> f64 {
        self.ymin + (py as f64 + 0.5) / height as f64 * self.height()
    }
}

impl Default for DomainBounds {
    fn default() -> Self {
        Self::unit()
    }
}

impl TryFrom<[f64; 4]> for DomainBounds {
    type Error = CpabError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<DomainBounds> for [f64; 4] {
    fn from(b: DomainBounds) -> Self {
        [b.xmin, b.xmax, b.ymin, b.ymax]
    }
}

/// A shared border between two adjacent cells, `lower < upper`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub lower: usize,
    pub upper: usize,
    pub start: Point2<f64>,
    pub end: Point2<f64>,
}

impl Edge {
    pub fn midpoint(&self) -> Point2<f64> {
        nalgebra::center(&self.start, &self.end)
    }
}

/// Which side of the domain a boundary segment lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// A cell border lying on the domain boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundarySegment {
    pub cell: usize,
    pub side: Side,
    pub start: Point2<f64>,
    pub end: Point2<f64>,
}

/// Regular `nx × ny` grid of equal rectangular cells over `bounds`.
///
/// Cells are numbered row-major: `id = row * nx + col`, with row 0 at `ymin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TessellationRepr")]
pub struct Tessellation {
    nx: usize,
    ny: usize,
    bounds: DomainBounds,
}

#[derive(Deserialize)]
struct TessellationRepr {
    nx: usize,
    ny: usize,
    #[serde(default)]
    bounds: DomainBounds,
}

impl TryFrom<TessellationRepr> for Tessellation {
    type Error = CpabError;

    fn try_from(r: TessellationRepr) -> Result<Self> {
        Tessellation::new(r.nx, r.ny, r.bounds)
    }
}

impl Tessellation {
    pub fn new(nx: usize, ny: usize, bounds: DomainBounds) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(CpabError::invalid(format!(
                "cell counts must be positive, got {nx}x{ny}"
            )));
        }
        let bounds = DomainBounds::new(bounds.xmin, bounds.xmax, bounds.ymin, bounds.ymax)?;
        Ok(Self { nx, ny, bounds })
    }

    /// Tessellation of the unit square.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, DomainBounds::unit())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn bounds(&self) -> &DomainBounds {
        &self.bounds
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_width(&self) -> f64 {
        self.bounds.width() / self.nx as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.bounds.height() / self.ny as f64
    }

    /// Index of the cell containing `p`, after clamping `p` to the domain.
    ///
    /// Points on a shared border belong to the cell with the smaller index.
    pub fn cell_index(&self, p: &Point2<f64>) -> usize {
        let col = axis_slot(p.x, self.bounds.xmin, self.bounds.xmax, self.nx);
        let row = axis_slot(p.y, self.bounds.ymin, self.bounds.ymax, self.ny);
        row * self.nx + col
    }

    /// Like [`cell_index`](Self::cell_index) but rejects points outside the domain.
    pub fn cell_index_strict(&self, p: &Point2<f64>) -> Result<usize> {
        if !self.bounds.contains(p) {
            return Err(CpabError::invalid(format!(
                "point ({}, {}) lies outside the domain",
                p.x, p.y
            )));
        }
        Ok(self.cell_index(p))
    }

    /// `(col, row)` of a cell id.
    pub fn cell_position(&self, id: usize) -> (usize, usize) {
        (id % self.nx, id / self.nx)
    }

    /// Corners `(min, max)` of a cell's rectangle.
    pub fn cell_rect(&self, id: usize) -> (Point2<f64>, Point2<f64>) {
        let (col, row) = self.cell_position(id);
        let (x0, x1) = self.x_line(col);
        let (y0, y1) = self.y_line(row);
        (Point2::new(x0, y0), Point2::new(x1, y1))
    }

    fn x_line(&self, col: usize) -> (f64, f64) {
        (self.grid_x(col), self.grid_x(col + 1))
    }

    fn y_line(&self, row: usize) -> (f64, f64) {
        (self.grid_y(row), self.grid_y(row + 1))
    }

    /// x coordinate of the k-th vertical grid line, exact at both ends.
    fn grid_x(&self, k: usize) -> f64 {
        if k == self.nx {
            self.bounds.xmax
        } else {
            self.bounds.xmin + k as f64 * self.cell_width()
        }
    }

    fn grid_y(&self, k: usize) -> f64 {
        if k == self.ny {
            self.bounds.ymax
        } else {
            self.bounds.ymin + k as f64 * self.cell_height()
        }
    }

    /// All interior shared edges, ordered by lower cell id, right neighbour before upper.
    pub fn interior_edges(&self) -> Vec<Edge> {
        let mut edges = Vec::with_capacity(2 * self.n_cells());
        for id in 0..self.n_cells() {
            let (col, row) = self.cell_position(id);
            let (_, x1) = self.x_line(col);
            let (y0, y1) = self.y_line(row);
            let (x0, _) = self.x_line(col);
            if col + 1 < self.nx {
                edges.push(Edge {
                    lower: id,
                    upper: id + 1,
                    start: Point2::new(x1, y0),
                    end: Point2::new(x1, y1),
                });
            }
            if row + 1 < self.ny {
                edges.push(Edge {
                    lower: id,
                    upper: id + self.nx,
                    start: Point2::new(x0, y1),
                    end: Point2::new(x1, y1),
                });
            }
        }
        edges
    }

    /// Cell borders lying on the domain boundary, in cell-id order.
    pub fn boundary_segments(&self) -> Vec<BoundarySegment> {
        let mut segs = Vec::new();
        for id in 0..self.n_cells() {
            let (col, row) = self.cell_position(id);
            let (x0, x1) = self.x_line(col);
            let (y0, y1) = self.y_line(row);
            let mut push = |side, start, end| segs.push(BoundarySegment { cell: id, side, start, end });
            if col == 0 {
                push(Side::Left, Point2::new(x0, y0), Point2::new(x0, y1));
            }
            if col + 1 == self.nx {
                push(Side::Right, Point2::new(x1, y0), Point2::new(x1, y1));
            }
            if row == 0 {
                push(Side::Bottom, Point2::new(x0, y0), Point2::new(x1, y0));
            }
            if row + 1 == self.ny {
                push(Side::Top, Point2::new(x0, y1), Point2::new(x1, y1));
            }
        }
        segs
    }
}

/// Slot of `v` along one axis split into `n` equal parts; exact borders go to the lower slot.
fn axis_slot(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    let u = (v.clamp(lo, hi) - lo) * n as f64 / (hi - lo);
    let slot = u.ceil() as isize - 1;
    slot.clamp(0, n as isize - 1) as usize
}
