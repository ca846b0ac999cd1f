//! Property tests for the library's invariants.

mod common;

use approx::assert_abs_diff_eq;
use cpab::basis::CpaBasis;
use cpab::dense_motion::{compose_dense_flow, normalize_masks, warp_image, Image};
use cpab::expm::matrix_exponential_3x3;
use cpab::field::{field_from_values, Theta};
use cpab::fit::{fit_affine_background, KeypointSet};
use cpab::flow::{apply_affine, DenseFlow};
use cpab::integrate::{FlowIntegrator, IntegrationConfig};
use cpab::tessellation::{DomainBounds, Tessellation};
use cpab::tps::{distortion_score, tps_fit};
use nalgebra::{Matrix2x3, Matrix3, Point2};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn point() -> impl Strategy<Value = Point2<f64>> {
    (unit(), unit()).prop_map(|(x, y)| Point2::new(x, y))
}

fn tess() -> impl Strategy<Value = Tessellation> {
    (1usize..=6, 1usize..=6).prop_map(|(nx, ny)| Tessellation::unit(nx, ny).unwrap())
}

fn coeffs(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, d)
}

fn basis_and_values() -> impl Strategy<Value = (CpaBasis, Vec<f64>)> {
    tess().prop_flat_map(|t| {
        let basis = CpaBasis::new(&t, false).unwrap();
        let d = basis.dim();
        (Just(basis), coeffs(d))
    })
}

/// Floor-based cell lookup; only valid away from interior borders.
fn floor_cell(t: &Tessellation, p: &Point2<f64>) -> usize {
    let col = ((p.x * t.nx() as f64).floor() as usize).min(t.nx() - 1);
    let row = ((p.y * t.ny() as f64).floor() as usize).min(t.ny() - 1);
    row * t.nx() + col
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cell_index_matches_floor_and_contains_point(t in tess(), p in point()) {
        let id = t.cell_index(&p);
        prop_assert!(id < t.n_cells());
        let (lo, hi) = t.cell_rect(id);
        prop_assert!(p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y);
        let on_border = |v: f64, n: usize| ((v * n as f64).round() - v * n as f64).abs() < 1e-9;
        if !on_border(p.x, t.nx()) && !on_border(p.y, t.ny()) {
            prop_assert_eq!(id, floor_cell(&t, &p));
        }
    }

    #[test]
    fn shared_borders_go_to_the_smaller_cell(t in tess(), k in 1usize..6, y in unit()) {
        prop_assume!(k < t.nx());
        let x = k as f64 / t.nx() as f64;
        let p = Point2::new(x, y);
        let id = t.cell_index(&p);
        prop_assert_eq!(id % t.nx(), k - 1);
    }

    #[test]
    fn velocity_is_linear_in_theta((basis, a) in basis_and_values(), s in -2.0..2.0f64, p in point()) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
        let va = field_from_values(&a, &basis).unwrap().velocity(&p);
        let vb = field_from_values(&b, &basis).unwrap().velocity(&p);
        let vs = field_from_values(&sum, &basis).unwrap().velocity(&p);
        prop_assert!((vs - (va * s + vb)).amax() < 1e-12);
    }

    #[test]
    fn velocity_is_continuous_across_edges((basis, v) in basis_and_values(), s in unit()) {
        let field = field_from_values(&v, &basis).unwrap();
        for e in basis.tessellation().interior_edges() {
            let p = Point2::from(e.start.coords * (1.0 - s) + e.end.coords * s);
            let jump = field.velocity_in_cell(e.lower, &p) - field.velocity_in_cell(e.upper, &p);
            prop_assert!(jump.amax() < 1e-9);
        }
    }

    #[test]
    fn transforms_stay_in_the_domain((basis, v) in basis_and_values(), p in point(), n in 1usize..40) {
        let field = field_from_values(&v, &basis).unwrap();
        let q = FlowIntegrator::new(&field, &IntegrationConfig::with_steps(n)).unwrap().apply(&p).unwrap();
        prop_assert!(DomainBounds::unit().contains(&q));
    }

    #[test]
    fn zero_theta_is_the_identity(t in tess(), p in point()) {
        let basis = CpaBasis::new(&t, false).unwrap();
        let field = cpab::field::theta_to_field(&Theta::zeros(&basis), &basis).unwrap();
        let q = FlowIntegrator::new(&field, &IntegrationConfig::default()).unwrap().apply(&p).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn expm_inverse(a in prop::array::uniform6(-2.0..2.0f64)) {
        let mut m = Matrix3::zeros();
        m.fixed_view_mut::<2, 3>(0, 0).copy_from(&Matrix2x3::from_row_slice(&a));
        let prod = matrix_exponential_3x3(&m).unwrap() * matrix_exponential_3x3(&(-m)).unwrap();
        prop_assert!((prod - Matrix3::identity()).amax() < 1e-10);
    }

    #[test]
    fn warp_preserves_convex_combinations(
        h in 2usize..8,
        w in 2usize..8,
        seed in any::<u64>(),
        a in 0.0..=1.0f64,
    ) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let mut img = |c| Image::new(h, w, c, (0..h * w * c).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let (x, y) = (img(3), img(3));
        let flow = DenseFlow::from_fn(h, w, DomainBounds::unit(), |p| Point2::new(p.y * 0.7 + 0.1, p.x * 0.9)).unwrap();
        let mixed = Image::new(h, w, 3, x.data().iter().zip(y.data()).map(|(u, v)| a * u + (1.0 - a) * v).collect()).unwrap();
        let (wx, wy, wm) = (warp_image(&x, &flow), warp_image(&y, &flow), warp_image(&mixed, &flow));
        for ((m, u), v) in wm.data().iter().zip(wx.data()).zip(wy.data()) {
            prop_assert!((m - (a * u + (1.0 - a) * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn distortion_ignores_translations(dx in -0.5..0.5f64, dy in -0.5..0.5f64, k in 0.5..1.5f64) {
        let b = DomainBounds::unit();
        let base = DenseFlow::from_fn(9, 11, b, |p| Point2::new(k * p.x + 0.1 * p.y * p.y, p.y - 0.2 * p.x)).unwrap();
        let moved = DenseFlow::from_fn(9, 11, b, |p| {
            let q = Point2::new(k * p.x + 0.1 * p.y * p.y, p.y - 0.2 * p.x);
            Point2::new(q.x + dx, q.y + dy)
        })
        .unwrap();
        assert_abs_diff_eq!(distortion_score(&base).unwrap(), distortion_score(&moved).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn flo_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let disp: Vec<[f64; 2]> = (0..h * w).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]).collect();
        let flow = DenseFlow::from_displacements(h, w, DomainBounds::unit(), &disp).unwrap();
        let mut buf = Vec::new();
        flow.write_flo(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 8 * h * w);
        let back = DenseFlow::read_flo(buf.as_slice(), DomainBounds::unit()).unwrap();
        for (a, b) in back.displacements().iter().zip(&disp) {
            prop_assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn composite_lies_between_components(seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let (h, w) = (5, 6);
        let flows: Vec<DenseFlow> = (0..2)
            .map(|_| {
                let s = r.gen_range(0.5..1.0);
                DenseFlow::from_fn(h, w, DomainBounds::unit(), |p| Point2::new(p.x * s, 1.0 - p.y * s)).unwrap()
            })
            .collect();
        let raw: Vec<f64> = (0..3 * h * w).map(|_| r.gen_range(0.01..1.0)).collect();
        let masks = normalize_masks(3, h, w, &raw).unwrap();
        let bg = Matrix2x3::new(1.0, 0.0, 0.05, 0.0, 1.0, -0.05);
        let out = compose_dense_flow(&bg, &flows, &masks).unwrap();
        let bgf = cpab::dense_motion::apply_affine_grid(&bg, h, w, DomainBounds::unit()).unwrap();
        for p in 0..h * w {
            let comps = [bgf.map()[p], flows[0].map()[p], flows[1].map()[p]];
            let o = out.map()[p];
            for axis in 0..2 {
                let lo = comps.iter().map(|c| c[axis]).fold(f64::INFINITY, f64::min);
                let hi = comps.iter().map(|c| c[axis]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o[axis] >= lo - 1e-12 && o[axis] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn affine_background_is_recovered(a in prop::array::uniform6(-1.0..1.0f64), pts in prop::collection::vec(point(), 4..12)) {
        let xs = pts.iter().map(|p| p.x);
        let spread = xs.clone().fold(f64::NEG_INFINITY, f64::max) - xs.fold(f64::INFINITY, f64::min);
        let area = pts.windows(3).map(|t| ((t[1] - t[0]).perp(&(t[2] - t[0]))).abs()).fold(0.0, f64::max);
        prop_assume!(spread > 0.1 && area > 1e-2);
        let m = Matrix2x3::from_row_slice(&a);
        let dst: Vec<_> = pts.iter().map(|p| apply_affine(&m, p)).collect();
        let fit = fit_affine_background(&pts, &dst).unwrap();
        prop_assert!((fit - m).amax() < 1e-8);
    }

    #[test]
    fn tps_interpolates_any_layout(pts in prop::collection::vec(point(), 4..15), seed in any::<u64>()) {
        use rand::Rng;
        let area = pts.windows(3).map(|t| ((t[1] - t[0]).perp(&(t[2] - t[0]))).abs()).fold(0.0, f64::max);
        let min_gap = pts
            .iter()
            .enumerate()
            .flat_map(|(i, a)| pts[i + 1..].iter().map(move |b| (a - b).norm()))
            .fold(f64::INFINITY, f64::min);
        prop_assume!(area > 1e-2 && min_gap > 1e-2);
        let mut r = common::rng(seed);
        let dst: Vec<_> = pts.iter().map(|p| Point2::new(p.x + r.gen_range(-0.1..0.1), p.y + r.gen_range(-0.1..0.1))).collect();
        let t = tps_fit(&pts, &dst, 0.0).unwrap();
        prop_assert!(t.control_residual() < 1e-8);
    }

    #[test]
    fn keypoint_json_roundtrip(pts in prop::collection::vec(point(), 0..8)) {
        let set = KeypointSet::new(pts).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        prop_assert_eq!(serde_json::from_str::<KeypointSet>(&text).unwrap(), set);
    }
}
