//! Continuity constraints for piecewise-affine velocity fields and the
//! orthonormal basis of the fields that satisfy them.
//!
//! Each cell `c` carries an affine map `A_c ∈ ℝ^{2×3}`. The unknowns are all
//! `A_c` stacked into one vector of length `6·n_cells`: cell by cell in
//! ascending id, each cell row-major `(a11, a12, a13, a21, a22, a23)`.

use nalgebra::{DMatrix, DVector, Point2};
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};
use crate::tessellation::{Side, Tessellation};

/// Number of unknowns per cell.
pub const PARAMS_PER_CELL: usize = 6;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Column of the `component`-th output row of `A_cell`, coefficient `j`.
#[inline]
pub fn param_index(cell: usize, component: usize, j: usize) -> usize {
    cell * PARAMS_PER_CELL + component * 3 + j
}

/// Linear equality constraints `L · vec(A) = 0`.
#[derive(Clone, Debug)]
pub struct ConstraintMatrix {
    tess: Tessellation,
    zero_boundary: bool,
    matrix: DMatrix<f64>,
}

impl ConstraintMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    pub fn zero_boundary(&self) -> bool {
        self.zero_boundary
    }
}

/// Builds the continuity constraints of a tessellation.
///
/// Every interior edge contributes four rows: the two neighbouring affine maps
/// must agree at both edge endpoints, in both output components. With
/// `zero_boundary` set, every boundary cell side also gets two rows forcing the
/// normal velocity component to vanish at its endpoints.
pub fn build_constraint_matrix(tess: &Tessellation, zero_boundary: bool) -> ConstraintMatrix {
    let cols = PARAMS_PER_CELL * tess.n_cells();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();

    for edge in tess.interior_edges() {
        for p in [edge.start, edge.end] {
            for component in 0..2 {
                let mut row = Vec::with_capacity(6);
                for (j, h) in homogeneous(&p).into_iter().enumerate() {
                    row.push((param_index(edge.lower, component, j), h));
                    row.push((param_index(edge.upper, component, j), -h));
                }
                rows.push(row);
            }
        }
    }

    if zero_boundary {
        for seg in tess.boundary_segments() {
            let component = match seg.side {
                Side::Left | Side::Right => 0,
                Side::Bottom | Side::Top => 1,
            };
            for p in [seg.start, seg.end] {
                let row = homogeneous(&p)
                    .into_iter()
                    .enumerate()
                    .map(|(j, h)| (param_index(seg.cell, component, j), h))
                    .collect();
                rows.push(row);
            }
        }
    }

    let mut matrix = DMatrix::zeros(rows.len(), cols);
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            matrix[(r, c)] += v;
        }
    }
    ConstraintMatrix { tess: *tess, zero_boundary, matrix }
}

fn homogeneous(p: &Point2<f64>) -> [f64; 3] {
    [p.x, p.y, 1.0]
}

/// Orthonormal basis of the continuous piecewise-affine velocity fields on a tessellation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct CpaBasis {
    tess: Tessellation,
    zero_boundary: bool,
    /// `(6·n_cells) × d`, orthonormal columns.
    b: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    tess: Tessellation,
    d: usize,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(default)]
    zero_boundary: bool,
}

impl TryFrom<BasisRepr> for CpaBasis {
    type Error = CpabError;

    fn try_from(r: BasisRepr) -> Result<Self> {
        let rows = PARAMS_PER_CELL * r.tess.n_cells();
        if r.d == 0 || r.b.len() != rows * r.d {
            return Err(CpabError::Format(format!(
                "basis matrix has {} entries, expected {rows}x{}",
                r.b.len(),
                r.d
            )));
        }
        if r.b.iter().any(|v| !v.is_finite()) {
            return Err(CpabError::Format("basis contains non-finite entries".into()));
        }
        Ok(CpaBasis {
            tess: r.tess,
            zero_boundary: r.zero_boundary,
            b: DMatrix::from_row_slice(rows, r.d, &r.b),
        })
    }
}

impl From<CpaBasis> for BasisRepr {
    fn from(basis: CpaBasis) -> Self {
        let d = basis.dim();
        let b = basis.b.transpose().as_slice().to_vec();
        BasisRepr { tess: basis.tess, d, b, zero_boundary: basis.zero_boundary }
    }
}

impl CpaBasis {
    /// Constraint matrix and null-space basis in one step.
    pub fn new(tess: &Tessellation, zero_boundary: bool) -> Result<Self> {
        compute_basis(&build_constraint_matrix(tess, zero_boundary))
    }

    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    pub fn zero_boundary(&self) -> bool {
        self.zero_boundary
    }

    /// Dimension `d` of the velocity-field space.
    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `B · θ`, the stacked affine parameters for `theta`.
    pub fn combine(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(CpabError::invalid(format!(
                "theta has length {}, basis dimension is {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(&self.b * DVector::from_column_slice(theta))
    }
}

/// Orthonormal basis of `null(L)` from a singular value decomposition.
///
/// Null vectors are taken in factorization order (the trailing right singular
/// vectors), and each is sign-normalized so its largest-magnitude entry is positive.
pub fn compute_basis(constraints: &ConstraintMatrix) -> Result<CpaBasis> {
    let n = constraints.cols();
    let l = constraints.matrix();

    let b = if l.nrows() == 0 {
        DMatrix::identity(n, n)
    } else {
        // Pad to at least n rows so the factorization yields a full n×n V.
        let padded = if l.nrows() < n {
            let mut m = DMatrix::zeros(n, n);
            m.rows_mut(0, l.nrows()).copy_from(l);
            m
        } else {
            l.clone()
        };
        let svd = padded.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| CpabError::Internal("SVD did not return right singular vectors".into()))?;
        let sigma = &svd.singular_values;
        let sigma_max = sigma.max();
        let rank = sigma.iter().filter(|&&s| s > RANK_TOLERANCE * sigma_max).count();
        let d = n - rank;
        let mut b = DMatrix::zeros(n, d);
        for k in 0..d {
            b.set_column(k, &v_t.row(rank + k).transpose());
        }
        b
    };

    let mut b = b;
    if b.ncols() == 0 {
        return Err(CpabError::Internal(format!(
            "constraint null space is empty for a {}x{} tessellation",
            constraints.tess.nx(),
            constraints.tess.ny()
        )));
    }
    for mut col in b.column_iter_mut() {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }

    Ok(CpaBasis { tess: constraints.tess, zero_boundary: constraints.zero_boundary, b })
}
