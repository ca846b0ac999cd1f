//! Integration of CPA velocity fields into CPAB transformations.
//!
//! Trajectories advance in `n_steps` fixed steps of size `δ = t / n_steps`.
//! Each step applies the exact flow of the affine map of the cell the point
//! currently occupies, `x ← exp(τ·Â_c)·x̃`. A step whose endpoint would leave
//! the cell is split where the chord crosses the cell border and resumes in
//! the neighbouring cell for the remaining time, so within-step border
//! crossings cost only a third-order local error.
//!
//! A step that would leave the domain pins the exiting coordinate to the
//! boundary and continues with the sliding flow, i.e. the exponential with the
//! pinned row of `Â_c` zeroed. Points travelling along the boundary therefore
//! follow the clamped dynamics instead of being clamped after the fact.

use nalgebra::{Matrix2x3, Matrix3, Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};
use crate::expm::matrix_exponential_3x3;
use crate::field::CpaField;
use crate::flow::{pixel_grid, DenseFlow};
use crate::tessellation::Tessellation;

/// Step count used while fitting θ.
pub const FIT_STEPS: usize = 32;
/// Step count used when exporting final flows.
pub const EXPORT_STEPS: usize = 64;

/// Point lists shorter than this are integrated on the calling thread.
const PARALLEL_MIN_POINTS: usize = 256;

/// Border crossings handled exactly within one step; any further ones finish in the current cell.
const MAX_SPLITS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub n_steps: usize,
    /// Integration time; the transformation itself is `t = 1`.
    pub t: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { n_steps: FIT_STEPS, t: 1.0 }
    }
}

impl IntegrationConfig {
    pub fn with_steps(n_steps: usize) -> Self {
        Self { n_steps, ..Self::default() }
    }

    pub fn export() -> Self {
        Self::with_steps(EXPORT_STEPS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(CpabError::invalid("n_steps must be at least 1"));
        }
        if !self.t.is_finite() || self.t < 0.0 {
            return Err(CpabError::invalid(format!("integration time must be finite and >= 0, got {}", self.t)));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.t / self.n_steps as f64
    }
}

/// Per-cell step maps `exp(δ·Â_c)` for one field and step size, ready to apply to many points.
#[derive(Clone, Debug)]
pub struct FlowIntegrator {
    tess: Tessellation,
    affine: Vec<Matrix2x3<f64>>,
    steps: Vec<CellStep>,
    n_steps: usize,
    delta: f64,
}

/// Full-step maps of one cell, indexed by the pinned axis: free, x pinned, y pinned.
#[derive(Clone, Debug)]
struct CellStep([Matrix2x3<f64>; 3]);

fn slot(pinned: Option<usize>) -> usize {
    pinned.map_or(0, |axis| axis + 1)
}

/// First crossing of the chord `x → q` out of the rectangle `[lo, hi]`:
/// `(fraction along the chord, axis, leaves through the upper side)`.
/// Axes in `skip` are ignored.
fn chord_exit(
    x: &Point2<f64>,
    q: &Point2<f64>,
    lo: &Point2<f64>,
    hi: &Point2<f64>,
    skip: Option<usize>,
) -> Option<(f64, usize, bool)> {
    let mut best: Option<(f64, usize, bool)> = None;
    for axis in 0..2 {
        if skip == Some(axis) {
            continue;
        }
        let (a, b) = (x[axis], q[axis]);
        let hit = if b > hi[axis] {
            Some(((hi[axis] - a) / (b - a), true))
        } else if b < lo[axis] {
            Some(((lo[axis] - a) / (b - a), false))
        } else {
            None
        };
        if let Some((s, up)) = hit {
            let s = s.clamp(0.0, 1.0);
            if best.map_or(true, |(t, _, _)| s < t) {
                best = Some((s, axis, up));
            }
        }
    }
    best
}

fn step_map(a: &Matrix2x3<f64>, delta: f64, pinned_row: Option<usize>) -> Result<Matrix2x3<f64>> {
    let mut lift = Matrix3::zeros();
    lift.fixed_view_mut::<2, 3>(0, 0).copy_from(&(a * delta));
    if let Some(r) = pinned_row {
        lift.row_mut(r).fill(0.0);
    }
    matrix_exponential_3x3(&lift).map(|e| e.fixed_view::<2, 3>(0, 0).into_owned())
}

impl FlowIntegrator {
    pub fn new(field: &CpaField, cfg: &IntegrationConfig) -> Result<Self> {
        cfg.validate()?;
        let delta = cfg.step_size();
        let steps = field
            .affine()
            .iter()
            .map(|a| Ok(CellStep([step_map(a, delta, None)?, step_map(a, delta, Some(0))?, step_map(a, delta, Some(1))?])))
            .collect::<Result<Vec<_>>>()
            .map_err(numeric)?;
        Ok(Self { tess: *field.tessellation(), affine: field.affine().to_vec(), steps, n_steps: cfg.n_steps, delta })
    }

    fn flow_map(&self, cell: usize, tau: f64, pinned: Option<usize>) -> Result<Matrix2x3<f64>> {
        if tau == self.delta {
            Ok(self.steps[cell].0[slot(pinned)])
        } else {
            step_map(&self.affine[cell], tau, pinned).map_err(numeric)
        }
    }

    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    fn step(&self, p: &Point2<f64>) -> Result<Point2<f64>> {
        let b = self.tess.bounds();
        let (nx, ny) = (self.tess.nx(), self.tess.ny());
        let mut x = *p;
        let mut cell = self.tess.cell_index(&x);
        let mut left = self.delta;
        let mut pinned: Option<usize> = None;
        for _ in 0..MAX_SPLITS {
            let q = Point2::from(self.flow_map(cell, left, pinned)? * Vector3::new(x.x, x.y, 1.0));
            let (lo, hi) = self.tess.cell_rect(cell);
            let Some((frac, axis, up)) = chord_exit(&x, &q, &lo, &hi, pinned) else {
                return Ok(b.clamp(&q));
            };
            let tau = frac * left;
            if tau > 0.0 {
                x = Point2::from(self.flow_map(cell, tau, pinned)? * Vector3::new(x.x, x.y, 1.0));
                left -= tau;
            }
            let (col, row) = self.tess.cell_position(cell);
            let (slot_pos, slots) = if axis == 0 { (col, nx) } else { (row, ny) };
            let leaves_domain = if up { slot_pos + 1 == slots } else { slot_pos == 0 };
            if leaves_domain {
                if pinned.is_some() {
                    // Sliding into a corner: nothing is left to move.
                    return Ok(b.clamp(&q));
                }
                x[axis] = if axis == 0 {
                    if up { b.xmax } else { b.xmin }
                } else if up {
                    b.ymax
                } else {
                    b.ymin
                };
                pinned = Some(axis);
            } else {
                let next = if up { slot_pos + 1 } else { slot_pos - 1 };
                cell = if axis == 0 { row * nx + next } else { next * nx + col };
            }
            if left <= 0.0 {
                break;
            }
        }
        let q = self.flow_map(cell, left, pinned)? * Vector3::new(x.x, x.y, 1.0);
        Ok(b.clamp(&Point2::from(q)))
    }

    /// Transformed location of `p`.
    pub fn apply(&self, p: &Point2<f64>) -> Result<Point2<f64>> {
        let mut x = self.tess.bounds().clamp(p);
        for _ in 0..self.n_steps {
            x = self.step(&x)?;
        }
        check_finite(&x)?;
        Ok(x)
    }

    /// All `n_steps + 1` positions along the discrete trajectory from `p`.
    pub fn trajectory(&self, p: &Point2<f64>) -> Result<Vec<Point2<f64>>> {
        let mut x = self.tess.bounds().clamp(p);
        let mut path = Vec::with_capacity(self.n_steps + 1);
        path.push(x);
        for _ in 0..self.n_steps {
            x = self.step(&x)?;
            check_finite(&x)?;
            path.push(x);
        }
        Ok(path)
    }

    /// Element-wise [`apply`](Self::apply); errors name the offending index.
    pub fn apply_all(&self, pts: &[Point2<f64>]) -> Result<Vec<Point2<f64>>> {
        let one = |(i, p): (usize, &Point2<f64>)| {
            self.apply(p)
                .map_err(|e| CpabError::NumericFailure(format!("point {i}: {e}")))
        };
        if pts.len() < PARALLEL_MIN_POINTS {
            pts.iter().enumerate().map(one).collect()
        } else {
            pts.par_iter().enumerate().map(one).collect()
        }
    }

    /// Backward-warp map over an H×W pixel-center grid.
    pub fn grid(&self, height: usize, width: usize) -> Result<DenseFlow> {
        if height == 0 || width == 0 {
            return Err(CpabError::invalid(format!("grid size must be positive, got {height}x{width}")));
        }
        let bounds = *self.tess.bounds();
        let map = self.apply_all(&pixel_grid(height, width, &bounds))?;
        DenseFlow::from_map(height, width, bounds, map)
    }
}

fn numeric(e: CpabError) -> CpabError {
    match e {
        CpabError::InvalidArgument(m) => CpabError::NumericFailure(m),
        other => other,
    }
}

fn check_finite(p: &Point2<f64>) -> Result<()> {
    if p.x.is_finite() && p.y.is_finite() {
        Ok(())
    } else {
        Err(CpabError::NumericFailure("trajectory left the finite range; theta is too large".into()))
    }
}

/// `T^θ(x)`: the field's flow at time `cfg.t` starting from `x`.
pub fn integrate_point(field: &CpaField, x: &Point2<f64>, cfg: &IntegrationConfig) -> Result<Point2<f64>> {
    FlowIntegrator::new(field, cfg)?.apply(x)
}

pub fn transform_points(field: &CpaField, pts: &[Point2<f64>], cfg: &IntegrationConfig) -> Result<Vec<Point2<f64>>> {
    FlowIntegrator::new(field, cfg)?.apply_all(pts)
}

pub fn transform_grid(field: &CpaField, height: usize, width: usize, cfg: &IntegrationConfig) -> Result<DenseFlow> {
    FlowIntegrator::new(field, cfg)?.grid(height, width)
}
