//! Thin-plate-spline keypoint warps, the comparison baseline for CPAB motion.

use nalgebra::{DMatrix, Matrix2x3, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{CpabError, Result};
use crate::flow::DenseFlow;
use crate::tessellation::DomainBounds;

/// Radial kernel `U(r) = r² log r²`, `U(0) = 0`, as a function of `r²`.
fn kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Smallest-to-largest singular value ratio accepted for the control layout.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    control_src: Vec<Point2<f64>>,
    control_dst: Vec<Point2<f64>>,
    /// Rows `(x, y, 1)` coefficients of each output coordinate.
    affine: Matrix2x3<f64>,
    weights: Vec<Vector2<f64>>,
    regularization: f64,
}

impl TpsTransform {
    pub fn affine(&self) -> &Matrix2x3<f64> {
        &self.affine
    }

    pub fn weights(&self) -> &[Vector2<f64>] {
        &self.weights
    }

    pub fn control_src(&self) -> &[Point2<f64>] {
        &self.control_src
    }

    pub fn control_dst(&self) -> &[Point2<f64>] {
        &self.control_dst
    }

    pub fn apply(&self, p: &Point2<f64>) -> Point2<f64> {
        let mut out = self.affine * nalgebra::Vector3::new(p.x, p.y, 1.0);
        for (c, w) in self.control_src.iter().zip(&self.weights) {
            out += w * kernel((p - c).norm_squared());
        }
        Point2::from(out)
    }

    /// Largest control-point interpolation error.
    pub fn control_residual(&self) -> f64 {
        self.control_src
            .iter()
            .zip(&self.control_dst)
            .map(|(s, d)| (self.apply(s) - d).amax())
            .fold(0.0, f64::max)
    }
}

/// Solves the TPS system `[[K + λI, P], [Pᵀ, 0]]·[w; a] = [dst; 0]` with `P = [1 x y]`.
pub fn tps_fit(control_src: &[Point2<f64>], control_dst: &[Point2<f64>], regularization: f64) -> Result<TpsTransform> {
    let k = control_src.len();
    if control_dst.len() != k {
        return Err(CpabError::invalid("TPS needs equally many source and destination controls"));
    }
    if k < 3 {
        return Err(CpabError::RankDeficient(format!("TPS needs at least 3 controls, got {k}")));
    }
    if !(regularization.is_finite() && regularization >= 0.0) {
        return Err(CpabError::invalid("TPS regularization must be non-negative"));
    }
    if control_src.iter().chain(control_dst).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(CpabError::invalid("TPS controls must be finite"));
    }

    let p = DMatrix::from_fn(k, 3, |r, c| match c {
        0 => 1.0,
        1 => control_src[r].x,
        _ => control_src[r].y,
    });
    let sv = p.clone().singular_values();
    if !(sv.min() > COLLINEAR_TOL * sv.max()) {
        return Err(CpabError::RankDeficient("TPS control points are collinear".into()));
    }

    let n = k + 3;
    let mut system = DMatrix::zeros(n, n);
    for i in 0..k {
        for j in 0..k {
            system[(i, j)] = kernel((control_src[i] - control_src[j]).norm_squared());
        }
        system[(i, i)] += regularization;
    }
    system.view_mut((0, k), (k, 3)).copy_from(&p);
    system.view_mut((k, 0), (3, k)).copy_from(&p.transpose());

    let mut rhs = DMatrix::zeros(n, 2);
    for (i, d) in control_dst.iter().enumerate() {
        rhs[(i, 0)] = d.x;
        rhs[(i, 1)] = d.y;
    }
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CpabError::RankDeficient("TPS system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(CpabError::RankDeficient("TPS system is singular".into()));
    }

    let weights = (0..k).map(|i| Vector2::new(sol[(i, 0)], sol[(i, 1)])).collect();
    // sol rows k..k+3 hold coefficients of (1, x, y).
    let affine = Matrix2x3::from_fn(|r, c| match c {
        0 => sol[(k + 1, r)],
        1 => sol[(k + 2, r)],
        _ => sol[(k, r)],
    });
    Ok(TpsTransform {
        control_src: control_src.to_vec(),
        control_dst: control_dst.to_vec(),
        affine,
        weights,
        regularization,
    })
}

/// Evaluates the TPS map at every pixel center.
pub fn tps_transform_grid(t: &TpsTransform, height: usize, width: usize, bounds: DomainBounds) -> Result<DenseFlow> {
    DenseFlow::from_fn(height, width, bounds, |p| t.apply(p))
}

/// Mean of `‖J(p) − I‖_F` over interior pixels, `J` the central-difference Jacobian of the map.
pub fn distortion_score(flow: &DenseFlow) -> Result<f64> {
    let (h, w) = (flow.height(), flow.width());
    if h < 3 || w < 3 {
        return Err(CpabError::invalid(format!("distortion needs a flow of at least 3x3, got {h}x{w}")));
    }
    let hx = 2.0 * flow.bounds().width() / w as f64;
    let hy = 2.0 * flow.bounds().height() / h as f64;
    let mut total = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let dx = (flow.get(r, c + 1) - flow.get(r, c - 1)) / hx;
            let dy = (flow.get(r + 1, c) - flow.get(r - 1, c)) / hy;
            let j = [dx.x - 1.0, dy.x, dx.y, dy.y - 1.0];
            total += j.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    Ok(total / ((h - 2) * (w - 2)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Point2<f64>> {
        v.iter().map(|&[x, y]| Point2::new(x, y)).collect()
    }

    const CTRL: [[f64; 2]; 5] = [[0.2, 0.2], [0.8, 0.25], [0.5, 0.55], [0.25, 0.8], [0.75, 0.85]];

    #[test]
    fn identity_controls() {
        let c = pts(&CTRL);
        let t = tps_fit(&c, &c, 0.0).unwrap();
        assert!(t.weights().iter().all(|w| w.amax() < 1e-12));
        assert!((t.affine() - Matrix2x3::identity()).amax() < 1e-12);
    }

    #[test]
    fn affine_controls_have_no_bending() {
        let a = Matrix2x3::new(0.9, 0.1, 0.05, -0.2, 1.1, 0.02);
        let src = pts(&CTRL);
        let dst: Vec<_> = src.iter().map(|p| crate::flow::apply_affine(&a, p)).collect();
        let t = tps_fit(&src, &dst, 0.0).unwrap();
        assert!(t.weights().iter().all(|w| w.amax() <= 1e-8));
        assert!((t.affine() - a).amax() <= 1e-10);
    }

    #[test]
    fn interpolates_and_side_conditions() {
        let src = pts(&CTRL);
        let dst = pts(&[[0.25, 0.18], [0.79, 0.3], [0.45, 0.6], [0.3, 0.77], [0.7, 0.9]]);
        let t = tps_fit(&src, &dst, 0.0).unwrap();
        assert!(t.control_residual() < 1e-8);
        let sum: Vector2<f64> = t.weights().iter().sum();
        let sx: Vector2<f64> = t.weights().iter().zip(&src).map(|(w, p)| w * p.x).sum();
        let sy: Vector2<f64> = t.weights().iter().zip(&src).map(|(w, p)| w * p.y).sum();
        assert!(sum.amax() < 1e-8 && sx.amax() < 1e-8 && sy.amax() < 1e-8);
    }

    #[test]
    fn regularization_smooths() {
        let src = pts(&CTRL);
        let dst = pts(&[[0.25, 0.18], [0.79, 0.3], [0.45, 0.6], [0.3, 0.77], [0.7, 0.9]]);
        let t = tps_fit(&src, &dst, 1.0).unwrap();
        assert!(t.control_residual() > 1e-4);
    }

    #[test]
    fn collinear_rejected() {
        let line = pts(&[[0.1, 0.1], [0.2, 0.2], [0.3, 0.3], [0.4, 0.4]]);
        assert!(matches!(tps_fit(&line, &line, 0.0), Err(CpabError::RankDeficient(_))));
        assert!(matches!(tps_fit(&line[..2], &line[..2], 0.0), Err(CpabError::RankDeficient(_))));
    }

    #[test]
    fn grids() {
        let c = pts(&CTRL);
        let id = tps_fit(&c, &c, 0.0).unwrap();
        let g = tps_transform_grid(&id, 8, 8, DomainBounds::unit()).unwrap();
        assert!(g.max_abs_diff(&DenseFlow::identity(8, 8, DomainBounds::unit()).unwrap()) < 1e-12);

        let shifted: Vec<_> = c.iter().map(|p| Point2::new(p.x + 0.1, p.y - 0.05)).collect();
        let tr = tps_fit(&c, &shifted, 0.0).unwrap();
        let g = tps_transform_grid(&tr, 5, 5, DomainBounds::unit()).unwrap();
        for (a, b) in g.map().iter().zip(DenseFlow::identity(5, 5, DomainBounds::unit()).unwrap().map()) {
            assert!((a.x - b.x - 0.1).abs() < 1e-12 && (a.y - b.y + 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn distortion_examples() {
        let b = DomainBounds::unit();
        let id = DenseFlow::identity(6, 7, b).unwrap();
        assert!(distortion_score(&id).unwrap() < 1e-12);
        let tr = DenseFlow::from_fn(6, 7, b, |p| Point2::new(p.x + 0.3, p.y - 0.1)).unwrap();
        assert!(distortion_score(&tr).unwrap() < 1e-12);
        let sc = DenseFlow::from_fn(6, 7, b, |p| Point2::new(2.0 * p.x, 2.0 * p.y)).unwrap();
        assert!((distortion_score(&sc).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(distortion_score(&DenseFlow::identity(2, 5, b).unwrap()).is_err());
    }
}
