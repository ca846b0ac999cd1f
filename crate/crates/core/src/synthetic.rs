//! Seeded end-to-end harness: ground-truth θ*, keypoints, CPAB and TPS fits, and a comparison report.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::CpaBasis;
use crate::error::{CpabError, Result};
use crate::field::{field_from_values, theta_to_field, Theta};
use crate::fit::{fit_global, fit_sets, FitConfig, KeypointSet};
use crate::flow::DenseFlow;
use crate::integrate::{FlowIntegrator, IntegrationConfig};
use crate::tessellation::Tessellation;
use crate::tps::{distortion_score, tps_fit, tps_transform_grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub local_tess: [usize; 2],
    pub global_tess: [usize; 2],
    pub n_sets: usize,
    pub points_per_set: usize,
    /// Half-width of the uniform noise added to source keypoints.
    pub noise: f64,
    /// Largest velocity magnitude of the ground-truth field.
    pub max_speed: f64,
    /// Driving keypoints are drawn uniformly from `[margin, 1 - margin]²`.
    pub margin: f64,
    /// Grid on which flows, distortion and inverse consistency are evaluated.
    pub grid: [usize; 2],
    pub tps_regularization: f64,
    pub fit: FitConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            local_tess: [4, 4],
            global_tess: [6, 6],
            n_sets: 10,
            points_per_set: 5,
            noise: 0.0,
            max_speed: 0.3,
            margin: 0.15,
            grid: [64, 64],
            tps_regularization: 0.0,
            fit: FitConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.n_sets == 0 || self.points_per_set == 0 {
            return Err(CpabError::invalid("need at least one keypoint set with at least one point"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return Err(CpabError::invalid("noise and max_speed must be finite and non-negative"));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(CpabError::invalid("margin must lie in [0, 0.5)"));
        }
        if self.grid[0] < 3 || self.grid[1] < 3 {
            return Err(CpabError::invalid("evaluation grid must be at least 3x3"));
        }
        Ok(())
    }
}

/// Uniform coefficients in `[-1, 1]`, rescaled so the field's largest speed is `max_speed`.
pub fn random_theta<R: Rng>(basis: &CpaBasis, rng: &mut R, max_speed: f64) -> Result<Theta> {
    let raw: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let speed = field_from_values(&raw, basis)?.max_speed();
    let scale = if speed > 0.0 { max_speed / speed } else { 0.0 };
    Theta::new(raw.iter().map(|v| v * scale).collect(), basis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub theta_star: Theta,
    pub kp_src: Vec<KeypointSet>,
    pub kp_drv: Vec<KeypointSet>,
}

/// Draws θ* on the global basis and keypoints with `kp_src = T^{θ*}(kp_drv) + noise`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Separate stream so the noise level does not shift the other draws.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let tess = Tessellation::unit(cfg.global_tess[0], cfg.global_tess[1])?;
    let basis = CpaBasis::new(&tess, false)?;
    let theta_star = random_theta(&basis, &mut rng, cfg.max_speed)?;
    let integ = FlowIntegrator::new(&theta_to_field(&theta_star, &basis)?, &cfg.fit.integration())?;
    let bounds = tess.bounds();

    let (mut kp_src, mut kp_drv) = (Vec::new(), Vec::new());
    for _ in 0..cfg.n_sets {
        let drv: Vec<Point2<f64>> = (0..cfg.points_per_set)
            .map(|_| {
                Point2::new(
                    rng.gen_range(cfg.margin..=1.0 - cfg.margin),
                    rng.gen_range(cfg.margin..=1.0 - cfg.margin),
                )
            })
            .collect();
        let mut src = integ.apply_all(&drv)?;
        if cfg.noise > 0.0 {
            for p in &mut src {
                let jitter = Point2::new(
                    p.x + noise_rng.gen_range(-cfg.noise..=cfg.noise),
                    p.y + noise_rng.gen_range(-cfg.noise..=cfg.noise),
                );
                *p = bounds.clamp(&jitter);
            }
        }
        kp_src.push(KeypointSet::new(src)?);
        kp_drv.push(KeypointSet::new(drv)?);
    }
    Ok(SyntheticData { theta_star, kp_src, kp_drv })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpabReport {
    pub d: usize,
    pub initial_loss: f64,
    /// Mean L1 keypoint residual at the fitted θ.
    pub keypoint_residual: f64,
    pub best_iteration: usize,
    pub distortion: f64,
    /// `max ‖T^{−θ}(T^θ(x)) − x‖∞` over the evaluation grid. Points whose trajectories reach the
    /// boundary are pinned there and cannot be recovered, so outward-pushing fields score high.
    pub inverse_consistency: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsReport {
    /// Mean L1 keypoint residual.
    pub keypoint_residual: f64,
    /// Largest per-coordinate control interpolation error.
    pub max_control_residual: f64,
    pub distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `‖θ̂ − θ*‖₂`; θ is only identified up to what the keypoints constrain.
    pub theta_error: f64,
    /// Largest grid-map difference between the fitted and ground-truth transformations.
    pub flow_error: f64,
    pub ground_truth_distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub config: SyntheticConfig,
    pub n_points: usize,
    pub global: CpabReport,
    /// Final keypoint residual of each per-set fit on the local basis.
    pub local_residuals: Vec<f64>,
    pub tps: TpsReport,
    pub recovery: Option<RecoveryReport>,
    pub theta_global: Theta,
}

fn inverse_consistency(basis: &CpaBasis, theta: &Theta, cfg: &IntegrationConfig, grid: [usize; 2]) -> Result<f64> {
    let fwd = FlowIntegrator::new(&theta_to_field(theta, basis)?, cfg)?;
    let back = FlowIntegrator::new(&theta_to_field(&theta.scaled(-1.0)?, basis)?, cfg)?;
    let mapped = fwd.grid(grid[0], grid[1])?;
    let round = back.apply_all(mapped.map())?;
    let id = DenseFlow::identity(grid[0], grid[1], *basis.tessellation().bounds())?;
    Ok(round.iter().zip(id.map()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
}

/// Fits both methods to the given keypoints and compares them; `theta_star` adds recovery metrics.
pub fn compare(
    kp_src: &[KeypointSet],
    kp_drv: &[KeypointSet],
    theta_star: Option<&Theta>,
    cfg: &SyntheticConfig,
) -> Result<SyntheticReport> {
    cfg.validate()?;
    let [h, w] = cfg.grid;
    let export = IntegrationConfig::export();
    let global_basis = CpaBasis::new(&Tessellation::unit(cfg.global_tess[0], cfg.global_tess[1])?, false)?;
    let local_basis = CpaBasis::new(&Tessellation::unit(cfg.local_tess[0], cfg.local_tess[1])?, false)?;

    let global_fit = fit_global(kp_src, kp_drv, &global_basis, &cfg.fit)?;
    let global_flow = FlowIntegrator::new(&theta_to_field(&global_fit.theta, &global_basis)?, &export)?.grid(h, w)?;
    let global = CpabReport {
        d: global_basis.dim(),
        initial_loss: global_fit.initial_loss,
        keypoint_residual: global_fit.final_loss,
        best_iteration: global_fit.best_iteration,
        distortion: distortion_score(&global_flow)?,
        inverse_consistency: inverse_consistency(&global_basis, &global_fit.theta, &export, cfg.grid)?,
        failure: global_fit.failure.clone(),
    };

    let local_residuals = fit_sets(kp_src, kp_drv, &local_basis, &cfg.fit)?.iter().map(|r| r.final_loss).collect();

    let src_all = KeypointSet::concat(kp_src);
    let drv_all = KeypointSet::concat(kp_drv);
    let tps = tps_fit(drv_all.points(), src_all.points(), cfg.tps_regularization)?;
    let tps_flow = tps_transform_grid(&tps, h, w, *global_basis.tessellation().bounds())?;
    let tps_residual = drv_all
        .points()
        .iter()
        .zip(src_all.points())
        .map(|(d, s)| {
            let t = tps.apply(d);
            (t.x - s.x).abs() + (t.y - s.y).abs()
        })
        .sum::<f64>()
        / drv_all.len() as f64;
    let tps = TpsReport {
        keypoint_residual: tps_residual,
        max_control_residual: tps.control_residual(),
        distortion: distortion_score(&tps_flow)?,
    };

    let recovery = match theta_star {
        Some(star) => {
            star.check_basis(&global_basis)?;
            let truth = FlowIntegrator::new(&theta_to_field(star, &global_basis)?, &export)?.grid(h, w)?;
            let theta_error = star
                .values()
                .iter()
                .zip(global_fit.theta.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Some(RecoveryReport {
                theta_error,
                flow_error: global_flow.max_abs_diff(&truth),
                ground_truth_distortion: distortion_score(&truth)?,
            })
        }
        None => None,
    };

    Ok(SyntheticReport {
        config: cfg.clone(),
        n_points: src_all.len(),
        global,
        local_residuals,
        tps,
        recovery,
        theta_global: global_fit.theta,
    })
}

/// [`generate`] followed by [`compare`].
pub fn run(cfg: &SyntheticConfig) -> Result<(SyntheticData, SyntheticReport)> {
    let data = generate(cfg)?;
    let report = compare(&data.kp_src, &data.kp_drv, Some(&data.theta_star), cfg)?;
    Ok((data, report))
}
