//! Parameter vectors θ and the piecewise-affine velocity fields they select.

use nalgebra::{Matrix2x3, Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::{CpaBasis, PARAMS_PER_CELL};
use crate::error::{CpabError, Result};
use crate::tessellation::Tessellation;

/// Coefficients of a velocity field in a [`CpaBasis`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaRepr", into = "ThetaRepr")]
pub struct Theta {
    values: Vec<f64>,
    tess: Tessellation,
    zero_boundary: bool,
}

#[derive(Serialize, Deserialize)]
struct ThetaRepr {
    d: usize,
    theta: Vec<f64>,
    tess: Tessellation,
    #[serde(default)]
    zero_boundary: bool,
}

impl TryFrom<ThetaRepr> for Theta {
    type Error = CpabError;

    fn try_from(r: ThetaRepr) -> Result<Self> {
        if r.d != r.theta.len() {
            return Err(CpabError::Format(format!(
                "theta declares d = {} but has {} values",
                r.d,
                r.theta.len()
            )));
        }
        Theta::from_parts(r.theta, r.tess, r.zero_boundary)
    }
}

impl From<Theta> for ThetaRepr {
    fn from(t: Theta) -> Self {
        ThetaRepr { d: t.values.len(), theta: t.values, tess: t.tess, zero_boundary: t.zero_boundary }
    }
}

impl Theta {
    /// θ for `basis`; fails on a length mismatch or non-finite values.
    pub fn new(values: Vec<f64>, basis: &CpaBasis) -> Result<Self> {
        if values.len() != basis.dim() {
            return Err(CpabError::invalid(format!(
                "theta has length {}, basis dimension is {}",
                values.len(),
                basis.dim()
            )));
        }
        Self::from_parts(values, *basis.tessellation(), basis.zero_boundary())
    }

    fn from_parts(values: Vec<f64>, tess: Tessellation, zero_boundary: bool) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CpabError::invalid(format!("theta[{i}] is not finite")));
        }
        Ok(Self { values, tess, zero_boundary })
    }

    /// The identity transformation.
    pub fn zeros(basis: &CpaBasis) -> Self {
        Self { values: vec![0.0; basis.dim()], tess: *basis.tessellation(), zero_boundary: basis.zero_boundary() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    pub fn zero_boundary(&self) -> bool {
        self.zero_boundary
    }

    /// `s · θ`, which integrates to the same flow run for time `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_parts(self.values.iter().map(|v| v * s).collect(), self.tess, self.zero_boundary)
    }

    /// Checks that this θ parameterizes `basis`.
    pub fn check_basis(&self, basis: &CpaBasis) -> Result<()> {
        if self.dim() != basis.dim()
            || self.tess != *basis.tessellation()
            || self.zero_boundary != basis.zero_boundary()
        {
            return Err(CpabError::invalid(format!(
                "theta (d = {}, {}x{}) does not match basis (d = {}, {}x{})",
                self.dim(),
                self.tess.nx(),
                self.tess.ny(),
                basis.dim(),
                basis.tessellation().nx(),
                basis.tessellation().ny()
            )));
        }
        Ok(())
    }
}

/// A continuous piecewise-affine velocity field: one 2×3 affine map per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CpaField {
    tess: Tessellation,
    affine: Vec<Matrix2x3<f64>>,
}

impl CpaField {
    /// Field from explicit per-cell maps. Continuity is not checked.
    pub fn from_affine(tess: Tessellation, affine: Vec<Matrix2x3<f64>>) -> Result<Self> {
        if affine.len() != tess.n_cells() {
            return Err(CpabError::invalid(format!(
                "expected {} affine maps, got {}",
                tess.n_cells(),
                affine.len()
            )));
        }
        if affine.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(CpabError::invalid("affine maps contain non-finite entries"));
        }
        Ok(Self { tess, affine })
    }

    /// The zero field on `tess`.
    pub fn zero(tess: Tessellation) -> Self {
        Self { tess, affine: vec![Matrix2x3::zeros(); tess.n_cells()] }
    }

    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    pub fn affine(&self) -> &[Matrix2x3<f64>] {
        &self.affine
    }

    /// Velocity `A_{Idx(x)} · (x, y, 1)ᵀ`, with `x` clamped to the domain.
    pub fn velocity(&self, p: &Point2<f64>) -> Vector2<f64> {
        let q = self.tess.bounds().clamp(p);
        self.velocity_in_cell(self.tess.cell_index(&q), &q)
    }

    /// Velocity of cell `cell`'s affine map at `p`, regardless of where `p` lies.
    pub fn velocity_in_cell(&self, cell: usize, p: &Point2<f64>) -> Vector2<f64> {
        self.affine[cell] * Vector3::new(p.x, p.y, 1.0)
    }

    /// Largest velocity norm over the domain.
    ///
    /// Each cell's speed is a convex function, so its maximum sits at a cell corner.
    pub fn max_speed(&self) -> f64 {
        (0..self.tess.n_cells())
            .flat_map(|c| {
                let (lo, hi) = self.tess.cell_rect(c);
                [lo, Point2::new(hi.x, lo.y), Point2::new(lo.x, hi.y), hi]
                    .map(|corner| self.velocity_in_cell(c, &corner).norm())
            })
            .fold(0.0, f64::max)
    }
}

/// `A_θ = vec⁻¹(B·θ)`, split into per-cell 2×3 blocks.
pub fn theta_to_field(theta: &Theta, basis: &CpaBasis) -> Result<CpaField> {
    theta.check_basis(basis)?;
    field_from_values(theta.values(), basis)
}

/// [`theta_to_field`] for a raw coefficient slice.
pub fn field_from_values(values: &[f64], basis: &CpaBasis) -> Result<CpaField> {
    let stacked = basis.combine(values)?;
    let affine = stacked
        .as_slice()
        .chunks_exact(PARAMS_PER_CELL)
        .map(Matrix2x3::from_row_slice)
        .collect();
    CpaField::from_affine(*basis.tessellation(), affine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_field(a: [f64; 6]) -> CpaField {
        let t = Tessellation::unit(1, 1).unwrap();
        CpaField::from_affine(t, vec![Matrix2x3::from_row_slice(&a)]).unwrap()
    }

    #[test]
    fn zero_theta_gives_zero_field() {
        let basis = CpaBasis::new(&Tessellation::unit(3, 3).unwrap(), false).unwrap();
        let field = theta_to_field(&Theta::zeros(&basis), &basis).unwrap();
        assert!(field.affine().iter().all(|a| a.iter().all(|&v| v == 0.0)));
        assert_eq!(field.velocity(&Point2::new(0.3, 0.8)), Vector2::zeros());
    }

    #[test]
    fn standard_basis_vector_unvectorizes_column() {
        let basis = CpaBasis::new(&Tessellation::unit(1, 1).unwrap(), false).unwrap();
        for i in 0..6 {
            let mut v = vec![0.0; 6];
            v[i] = 1.0;
            let field = field_from_values(&v, &basis).unwrap();
            let col = basis.matrix().column(i);
            let expected = Matrix2x3::from_row_slice(col.as_slice());
            assert_eq!(field.affine()[0], expected);
        }
    }

    #[test]
    fn constant_and_linear_fields() {
        let f = unit_field([0.0, 0.0, 0.1, 0.0, 0.0, 0.0]);
        assert_eq!(f.velocity(&Point2::new(0.7, 0.2)), Vector2::new(0.1, 0.0));
        let g = unit_field([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.velocity(&Point2::new(0.2, 0.3)), Vector2::new(0.2, 0.3));
        assert_abs_diff_eq!(g.max_speed(), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let basis = CpaBasis::new(&Tessellation::unit(2, 1).unwrap(), false).unwrap();
        let other = CpaBasis::new(&Tessellation::unit(1, 1).unwrap(), false).unwrap();
        assert!(Theta::new(vec![0.0; 6], &basis).is_err());
        let theta = Theta::zeros(&other);
        assert!(theta_to_field(&theta, &basis).is_err());
        assert!(Theta::new(vec![f64::NAN; 8], &basis).is_err());
    }

    #[test]
    fn theta_json_schema() {
        let basis = CpaBasis::new(&Tessellation::unit(2, 1).unwrap(), false).unwrap();
        let theta = Theta::new((0..8).map(|i| i as f64 * 0.1).collect(), &basis).unwrap();
        let v: serde_json::Value = serde_json::to_value(&theta).unwrap();
        assert_eq!(v["d"], 8);
        assert_eq!(v["zero_boundary"], false);
        assert_eq!(v["tess"]["nx"], 2);
        let back: Theta = serde_json::from_value(v).unwrap();
        assert_eq!(back, theta);
        let bad = r#"{"d":3,"theta":[0.0],"tess":{"nx":1,"ny":1}}"#;
        assert!(serde_json::from_str::<Theta>(bad).is_err());
    }
}
