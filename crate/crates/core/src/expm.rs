//! Matrix exponential of homogeneous 3×3 affine lifts.

use nalgebra::Matrix3;

use crate::error::{CpabError, Result};

/// Coefficients of the diagonal [6/6] Padé approximant of `exp`:
/// `c_k = (12 - k)! 6! / (12! k! (6 - k)!)`.
const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Norm bound for the scaled matrix; the [6/6] truncation error there is below 1e-16.
const SCALED_NORM_MAX: f64 = 0.5;

/// `exp(M)` for `M = [[L, t], [0, 0]]` by scaling and squaring with a degree-6 Padé approximant.
///
/// The bottom row of the result is exactly `(0, 0, 1)`.
pub fn matrix_exponential_3x3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CpabError::invalid("matrix exponential input has non-finite entries"));
    }
    if m.row(2).iter().any(|&v| v != 0.0) {
        return Err(CpabError::invalid("homogeneous lift must have a zero bottom row"));
    }

    let norm = m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let squarings = if norm > SCALED_NORM_MAX {
        (norm / SCALED_NORM_MAX).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings);

    let eye = Matrix3::identity();
    let mut numer = eye;
    let mut denom = eye;
    let mut power = eye;
    for (k, &c) in PADE6.iter().enumerate().skip(1) {
        power *= a;
        let term = power * c;
        numer += term;
        if k % 2 == 0 {
            denom += term;
        } else {
            denom -= term;
        }
    }

    let mut e = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| CpabError::NumericFailure("Pade denominator is singular".into()))?;
    for _ in 0..squarings {
        e = e * e;
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(CpabError::NumericFailure("matrix exponential overflowed".into()));
    }
    e[(2, 0)] = 0.0;
    e[(2, 1)] = 0.0;
    e[(2, 2)] = 1.0;
    Ok(e)
}
