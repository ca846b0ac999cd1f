//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use cpab::basis::CpaBasis;
use cpab::field::{field_from_values, CpaField, Theta};
use nalgebra::{Matrix3, Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random θ scaled so the field's largest speed equals `speed`.
pub fn random_theta(basis: &CpaBasis, rng: &mut ChaCha8Rng, speed: f64) -> Theta {
    let raw: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let field = field_from_values(&raw, basis).unwrap();
    let s = speed / field.max_speed();
    Theta::new(raw.iter().map(|v| v * s).collect(), basis).unwrap()
}

pub fn random_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Point2<f64> {
    Point2::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

/// Velocity of the clamped flow: the field at the clamped position with any
/// component pushing further out of the domain removed.
fn projected_velocity(field: &CpaField, x: &Point2<f64>) -> Vector2<f64> {
    let b = field.tessellation().bounds();
    let q = b.clamp(x);
    let mut v = field.velocity(&q);
    if (q.x <= b.xmin && v.x < 0.0) || (q.x >= b.xmax && v.x > 0.0) {
        v.x = 0.0;
    }
    if (q.y <= b.ymin && v.y < 0.0) || (q.y >= b.ymax && v.y > 0.0) {
        v.y = 0.0;
    }
    v
}

/// Adaptive Dormand-Prince 5(4) integration of dx/dt = v(x) over [0, t],
/// with local error control on the embedded 4th-order solution.
pub fn ode_oracle(field: &CpaField, x0: &Point2<f64>, t_end: f64, tol: f64) -> Point2<f64> {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let bounds = *field.tessellation().bounds();
    let mut x = bounds.clamp(x0);
    let mut t = 0.0;
    let mut h = 1e-3_f64.min(t_end);
    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        let mut k = [Vector2::zeros(); 7];
        for s in 0..7 {
            let mut xs = x.coords;
            for j in 0..s {
                xs += h * A[s][j] * k[j];
            }
            k[s] = projected_velocity(field, &Point2::from(xs));
        }
        let mut x5 = x.coords;
        let mut x4 = x.coords;
        for s in 0..7 {
            x5 += h * B5[s] * k[s];
            x4 += h * B4[s] * k[s];
        }
        let err = (x5 - x4).amax();
        if err <= tol || h < 1e-12 {
            t += h;
            x = bounds.clamp(&Point2::from(x5));
        }
        let factor = if err == 0.0 { 4.0 } else { (0.9 * (tol / err).powf(0.2)).clamp(0.1, 4.0) };
        h = (h * factor).max(1e-13);
    }
    x
}

/// Exact single-cell flow: Π(exp(t·Â)·x̃) via a long Taylor series with scaling and squaring.
pub fn single_cell_exact(field: &CpaField, x: &Point2<f64>, t: f64) -> Point2<f64> {
    let a = field.affine()[0] * t;
    let mut m = Matrix3::zeros();
    m.fixed_view_mut::<2, 3>(0, 0).copy_from(&a);
    let s = 8;
    let scaled = m / f64::powi(2.0, s);
    let mut sum = Matrix3::identity();
    let mut term = Matrix3::identity();
    for k in 1..30 {
        term = term * scaled / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    let r = sum * nalgebra::Vector3::new(x.x, x.y, 1.0);
    Point2::new(r.x, r.y)
}
