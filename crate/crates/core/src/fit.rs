//! Keypoint-driven inference of θ.
//!
//! The transformation maps driving keypoints onto source keypoints (it is a
//! backward warp), so the objective is the mean L1 distance between
//! `T^θ(kp_drv)` and `kp_src`. θ starts at zero and is refined by a first-order
//! optimizer using central finite-difference gradients.

use nalgebra::{DMatrix, Matrix2x3, Point2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CpaBasis;
use crate::error::{CpabError, Result};
use crate::field::{field_from_values, Theta};
use crate::integrate::{FlowIntegrator, IntegrationConfig, FIT_STEPS};

/// Ordered 2-D control points in normalized coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct KeypointSet {
    points: Vec<Point2<f64>>,
}

impl KeypointSet {
    pub fn new(points: Vec<Point2<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(CpabError::invalid(format!("keypoint {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All points of several sets, in order.
    pub fn concat(sets: &[KeypointSet]) -> KeypointSet {
        KeypointSet { points: sets.iter().flat_map(|s| s.points.iter().copied()).collect() }
    }
}

impl TryFrom<Vec<[f64; 2]>> for KeypointSet {
    type Error = CpabError;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(v.into_iter().map(|[x, y]| Point2::new(x, y)).collect())
    }
}

impl From<KeypointSet> for Vec<[f64; 2]> {
    fn from(s: KeypointSet) -> Self {
        s.points.into_iter().map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainGradientDescent,
    /// Adam with β₁ = 0.9, β₂ = 0.999.
    AdaptiveMoment,
}

/// Step-size schedule over the iteration budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `learning_rate` to `learning_rate / 100` at the last iteration.
    #[default]
    Cosine,
}

impl LrSchedule {
    const FLOOR: f64 = 0.01;

    pub fn rate(self, base: f64, iteration: usize, iterations: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = iteration as f64 / (iterations.max(2) - 1) as f64;
                let floor = base * Self::FLOOR;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub fd_epsilon: f64,
    pub n_steps_fit: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.05,
            optimizer: Optimizer::AdaptiveMoment,
            fd_epsilon: 1e-5,
            n_steps_fit: FIT_STEPS,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.iterations == 0 || self.n_steps_fit == 0 || !positive(self.learning_rate) || !positive(self.fd_epsilon)
        {
            return Err(CpabError::invalid(format!("fit configuration must be positive and finite: {self:?}")));
        }
        Ok(())
    }

    pub fn integration(&self) -> IntegrationConfig {
        IntegrationConfig::with_steps(self.n_steps_fit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Best θ seen, not necessarily the last iterate.
    pub theta: Theta,
    /// Loss at θ = 0.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after each optimizer step. Shorter than `iterations` only when `failure` is set.
    pub loss_trace: Vec<f64>,
    /// Number of optimizer steps taken to reach `theta` (0 = the identity start).
    pub best_iteration: usize,
    /// Set when a numeric failure stopped the fit early.
    pub failure: Option<String>,
}

/// Keypoint alignment objective for one pair of point lists.
pub struct KeypointObjective<'a> {
    basis: &'a CpaBasis,
    src: &'a [Point2<f64>],
    drv: &'a [Point2<f64>],
    cfg: IntegrationConfig,
}

impl<'a> KeypointObjective<'a> {
    pub fn new(
        basis: &'a CpaBasis,
        kp_src: &'a KeypointSet,
        kp_drv: &'a KeypointSet,
        cfg: IntegrationConfig,
    ) -> Result<Self> {
        if kp_src.is_empty() || kp_drv.is_empty() {
            return Err(CpabError::invalid("keypoint sets must not be empty"));
        }
        if kp_src.len() != kp_drv.len() {
            return Err(CpabError::invalid(format!(
                "keypoint sets differ in length: {} source vs {} driving",
                kp_src.len(),
                kp_drv.len()
            )));
        }
        let bounds = basis.tessellation().bounds();
        for (name, set) in [("source", kp_src), ("driving", kp_drv)] {
            if let Some(i) = set.points().iter().position(|p| !bounds.contains(p)) {
                return Err(CpabError::invalid(format!("{name} keypoint {i} lies outside the domain")));
            }
        }
        cfg.validate()?;
        Ok(Self { basis, src: kp_src.points(), drv: kp_drv.points(), cfg })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Mean over keypoints of `|Δx| + |Δy|` between `T^θ(drv)` and `src`.
    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        let field = field_from_values(theta, self.basis)?;
        let integ = FlowIntegrator::new(&field, &self.cfg)?;
        let mut total = 0.0;
        for (d, s) in self.drv.iter().zip(self.src) {
            let t = integ.apply(d)?;
            total += (t.x - s.x).abs() + (t.y - s.y).abs();
        }
        Ok(total / self.src.len() as f64)
    }

    /// Central differences `(L(θ + εeᵢ) − L(θ − εeᵢ)) / 2ε`, components evaluated in parallel.
    pub fn gradient(&self, theta: &[f64], eps: f64) -> Result<Vec<f64>> {
        (0..theta.len())
            .into_par_iter()
            .map(|i| {
                let mut probe = theta.to_vec();
                probe[i] = theta[i] + eps;
                let up = self.loss(&probe)?;
                probe[i] = theta[i] - eps;
                let down = self.loss(&probe)?;
                Ok((up - down) / (2.0 * eps))
            })
            .collect()
    }
}

pub fn loss_kp(
    theta: &Theta,
    kp_src: &KeypointSet,
    kp_drv: &KeypointSet,
    basis: &CpaBasis,
    cfg: &IntegrationConfig,
) -> Result<f64> {
    theta.check_basis(basis)?;
    KeypointObjective::new(basis, kp_src, kp_drv, *cfg)?.loss(theta.values())
}

pub fn grad_loss_kp(
    theta: &Theta,
    kp_src: &KeypointSet,
    kp_drv: &KeypointSet,
    basis: &CpaBasis,
    cfg: &IntegrationConfig,
    fd_epsilon: f64,
) -> Result<Vec<f64>> {
    theta.check_basis(basis)?;
    if !(fd_epsilon.is_finite() && fd_epsilon > 0.0) {
        return Err(CpabError::invalid("finite-difference step must be positive"));
    }
    KeypointObjective::new(basis, kp_src, kp_drv, *cfg)?.gradient(theta.values(), fd_epsilon)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(d: usize) -> Self {
        Self { m: vec![0.0; d], v: vec![0.0; d], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits θ so that `T^θ(kp_drv) ≈ kp_src`, starting from the identity.
pub fn fit_theta(kp_src: &KeypointSet, kp_drv: &KeypointSet, basis: &CpaBasis, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let objective = KeypointObjective::new(basis, kp_src, kp_drv, cfg.integration())?;
    let d = basis.dim();

    let mut theta = vec![0.0; d];
    let initial_loss = objective.loss(&theta)?;
    let mut best = (initial_loss, theta.clone(), 0);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut adam = Adam::new(d);
    let mut failure = None;

    let mut current = initial_loss;
    for it in 0..cfg.iterations {
        // Zero is the global minimum; finite-difference noise at the kink would only push θ away.
        if current == 0.0 {
            trace.push(0.0);
            continue;
        }
        let step = objective.gradient(&theta, cfg.fd_epsilon).and_then(|g| {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CpabError::NumericFailure("non-finite gradient".into()));
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, it, cfg.iterations);
            match cfg.optimizer {
                Optimizer::AdaptiveMoment => adam.step(&mut theta, &g, lr),
                Optimizer::PlainGradientDescent => theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= lr * gi),
            }
            objective.loss(&theta)
        });
        match step {
            Ok(loss) => {
                current = loss;
                trace.push(loss);
                if loss < best.0 {
                    best = (loss, theta.clone(), it + 1);
                }
            }
            Err(e) => {
                failure = Some(format!("iteration {it}: {e}"));
                break;
            }
        }
    }

    let (final_loss, values, best_iteration) = best;
    Ok(FitResult {
        theta: Theta::new(values, basis)?,
        initial_loss,
        final_loss,
        loss_trace: trace,
        best_iteration,
        failure,
    })
}

fn check_set_pairs(src: &[KeypointSet], drv: &[KeypointSet]) -> Result<()> {
    if src.len() != drv.len() {
        return Err(CpabError::invalid(format!(
            "{} source sets but {} driving sets",
            src.len(),
            drv.len()
        )));
    }
    if let Some(i) = src.iter().zip(drv).position(|(s, d)| s.len() != d.len()) {
        return Err(CpabError::invalid(format!("keypoint set {i} differs in size between source and driving")));
    }
    Ok(())
}

/// One global θ fit over all keypoint pairs combined.
pub fn fit_global(
    kp_src_sets: &[KeypointSet],
    kp_drv_sets: &[KeypointSet],
    global_basis: &CpaBasis,
    cfg: &FitConfig,
) -> Result<FitResult> {
    check_set_pairs(kp_src_sets, kp_drv_sets)?;
    fit_theta(&KeypointSet::concat(kp_src_sets), &KeypointSet::concat(kp_drv_sets), global_basis, cfg)
}

/// Independent fits, one per keypoint-set pair, run concurrently.
pub fn fit_sets(
    kp_src_sets: &[KeypointSet],
    kp_drv_sets: &[KeypointSet],
    basis: &CpaBasis,
    cfg: &FitConfig,
) -> Result<Vec<FitResult>> {
    check_set_pairs(kp_src_sets, kp_drv_sets)?;
    kp_src_sets
        .par_iter()
        .zip(kp_drv_sets)
        .map(|(s, d)| fit_theta(s, d, basis, cfg))
        .collect()
}

/// Relative singular-value cutoff for the affine least-squares design.
const AFFINE_RANK_TOL: f64 = 1e-10;

/// Least-squares affine map `A` minimizing `Σ ‖A·x̃_src − x_dst‖²`.
pub fn fit_affine_background(src_pts: &[Point2<f64>], dst_pts: &[Point2<f64>]) -> Result<Matrix2x3<f64>> {
    if src_pts.len() != dst_pts.len() {
        return Err(CpabError::invalid("affine fit needs equally many source and destination points"));
    }
    if src_pts.len() < 3 {
        return Err(CpabError::RankDeficient(format!(
            "affine fit needs at least 3 point pairs, got {}",
            src_pts.len()
        )));
    }
    let n = src_pts.len();
    let design = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => src_pts[r].x,
        1 => src_pts[r].y,
        _ => 1.0,
    });
    let target = DMatrix::from_fn(n, 2, |r, c| if c == 0 { dst_pts[r].x } else { dst_pts[r].y });
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > AFFINE_RANK_TOL * smax) {
        return Err(CpabError::RankDeficient("affine fit points are collinear".into()));
    }
    let params = svd
        .solve(&target, 0.0)
        .map_err(|e| CpabError::Internal(format!("affine least squares failed: {e}")))?;
    Ok(Matrix2x3::from_fn(|r, c| params[(c, r)]))
}
