mod args;
mod manifest;

use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use cpab::basis::CpaBasis;
use cpab::dense_motion::{compose_dense_flow, keypoint_soft_masks, warp_image, ConfidenceMaps};
use cpab::field::{theta_to_field, Theta};
use cpab::fit::{fit_affine_background, fit_global, fit_sets, fit_theta, FitResult, KeypointSet};
use cpab::flow::DenseFlow;
use cpab::integrate::{transform_grid, IntegrationConfig};
use cpab::io::{self, AffineFile, KeypointFile};
use cpab::synthetic::{self, SyntheticConfig};
use cpab::tessellation::{DomainBounds, Tessellation};
use cpab::tps::{distortion_score, tps_fit, tps_transform_grid};
use cpab::CpabError;
use nalgebra::Point2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use args::{Cli, Command, ComposeArgs, FitArgs, FlowArgs, MaskMode, SyntheticArgs, TpsArgs, WarpArgs};
use manifest::RunManifest;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, kind: "invalid_argument", message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: EXIT_INPUT, kind: "io", message: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CpabError> for CliError {
    fn from(e: CpabError) -> Self {
        let code = if e.is_input_error() { EXIT_INPUT } else { EXIT_NUMERIC };
        Self { code, kind: e.kind(), message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Wraps a library error with the file it came from.
fn at<T>(path: &Path, r: cpab::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn read_json<T: DeserializeOwned>(m: &mut RunManifest, path: &Path) -> CliResult<T> {
    let bytes = m.input(path)?;
    at(path, serde_json::from_slice(&bytes).map_err(CpabError::from))
}

fn write_json<T: Serialize>(m: &mut RunManifest, path: &Path, value: &T) -> CliResult<()> {
    at(path, io::write_json(path, value))?;
    m.output(path);
    Ok(())
}

fn tracked<T>(m: &mut RunManifest, path: &Path, load: impl FnOnce(&Path) -> cpab::Result<T>) -> CliResult<T> {
    m.input(path)?;
    at(path, load(path))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return fail(&CliError::input(msg.trim()));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind, "message": e.message, "exit_code": e.code }));
    ExitCode::from(e.code)
}

fn run(cli: &Cli) -> CliResult<()> {
    let config = serde_json::to_value(&cli.command).map_err(|e| CliError::input(e.to_string()))?;
    let mut m = RunManifest::new(cli.command.name(), config);
    let result = match &cli.command {
        Command::Basis(a) => cmd_basis(&mut m, a.nx, a.ny, a.zero_boundary, &a.out),
        Command::Fit(a) => cmd_fit(&mut m, a),
        Command::Flow(a) => cmd_flow(&mut m, a),
        Command::Warp(a) => cmd_warp(&mut m, a),
        Command::Compose(a) => cmd_compose(&mut m, a),
        Command::Tps(a) => cmd_tps(&mut m, a),
        Command::Synthetic(a) => cmd_synthetic(&mut m, a),
    };
    // The manifest is written even for failed fits so the partial run is documented.
    if let Some(path) = &cli.manifest {
        at(path, io::write_json(path, &m))?;
    }
    result
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_basis(m: &mut RunManifest, nx: usize, ny: usize, zero_boundary: bool, out: &Path) -> CliResult<()> {
    let tess = Tessellation::unit(nx, ny)?;
    let basis = m.time("basis", || CpaBasis::new(&tess, zero_boundary))?;
    write_json(m, out, &basis)?;
    print_summary(json!({ "nx": nx, "ny": ny, "zero_boundary": zero_boundary, "d": basis.dim() }));
    Ok(())
}

fn write_trace(m: &mut RunManifest, path: &Path, results: &[FitResult]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["iteration".to_string()];
    if results.len() == 1 {
        header.push("loss".into());
    } else {
        header.extend((0..results.len()).map(|i| format!("set_{i}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    let rows = results.iter().map(|r| r.loss_trace.len()).max().unwrap_or(0);
    for it in 0..=rows {
        let mut rec = vec![it.to_string()];
        for r in results {
            let v = if it == 0 { Some(r.initial_loss) } else { r.loss_trace.get(it - 1).copied() };
            rec.push(v.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    m.output(path);
    Ok(())
}

fn cmd_fit(m: &mut RunManifest, a: &FitArgs) -> CliResult<()> {
    let src: KeypointFile = read_json(m, &a.src)?;
    let drv: KeypointFile = read_json(m, &a.drv)?;
    let basis: CpaBasis = read_json(m, &a.basis)?;
    let cfg = a.fit.config();

    let results = if a.global {
        vec![m.time("fit_global", || fit_global(&src.sets, &drv.sets, &basis, &cfg))?]
    } else if let Some(i) = a.set {
        let n = src.sets.len().min(drv.sets.len());
        if i >= n {
            return Err(CliError::input(format!("--set {i} out of range: files hold {n} sets")));
        }
        vec![m.time("fit_set", || fit_theta(&src.sets[i], &drv.sets[i], &basis, &cfg))?]
    } else {
        m.time("fit_all_sets", || fit_sets(&src.sets, &drv.sets, &basis, &cfg))?
    };

    let label = |i: usize| if results.len() == 1 { String::new() } else { format!("set_{i}.") };
    for (i, r) in results.iter().enumerate() {
        m.loss(format!("{}initial_loss", label(i)), r.initial_loss);
        m.loss(format!("{}final_loss", label(i)), r.final_loss);
    }

    if a.all_sets {
        let thetas: Vec<&Theta> = results.iter().map(|r| &r.theta).collect();
        write_json(m, &a.out, &thetas)?;
        if let Some(p) = &a.result {
            write_json(m, p, &results)?;
        }
    } else {
        write_json(m, &a.out, &results[0].theta)?;
        if let Some(p) = &a.result {
            write_json(m, p, &results[0])?;
        }
    }
    if let Some(p) = &a.trace {
        write_trace(m, p, &results)?;
    }

    let summary: Vec<_> = results
        .iter()
        .map(|r| json!({ "initial_loss": r.initial_loss, "final_loss": r.final_loss, "best_iteration": r.best_iteration }))
        .collect();
    print_summary(json!({ "d": basis.dim(), "fits": summary }));

    if let Some((i, f)) = results.iter().enumerate().find_map(|(i, r)| r.failure.as_ref().map(|f| (i, f))) {
        return Err(CliError {
            code: EXIT_NUMERIC,
            kind: "numeric_failure",
            message: format!("fit {i} stopped early ({f}); best θ so far was written"),
        });
    }
    Ok(())
}

fn save_flow(m: &mut RunManifest, out: &Path, png: Option<&Path>, flow: &DenseFlow) -> CliResult<()> {
    at(out, io::save_flow(out, flow))?;
    m.output(out);
    if let Some(p) = png {
        at(p, io::save_flow_png(p, flow))?;
        m.output(p);
    }
    Ok(())
}

fn cmd_flow(m: &mut RunManifest, a: &FlowArgs) -> CliResult<()> {
    let theta: Theta = read_json(m, &a.theta)?;
    let basis = match &a.basis {
        Some(p) => {
            let b: CpaBasis = read_json(m, p)?;
            at(p, theta.check_basis(&b))?;
            b
        }
        None => m.time("basis", || CpaBasis::new(theta.tessellation(), theta.zero_boundary()))?,
    };
    let field = theta_to_field(&theta, &basis)?;
    let cfg = IntegrationConfig::with_steps(a.n_steps);
    let flow = m.time("integrate", || transform_grid(&field, a.height, a.width, &cfg))?;
    save_flow(m, &a.out, a.png.as_deref(), &flow)?;
    print_summary(json!({ "height": a.height, "width": a.width, "n_steps": a.n_steps, "max_speed": field.max_speed() }));
    Ok(())
}

fn cmd_warp(m: &mut RunManifest, a: &WarpArgs) -> CliResult<()> {
    let img = tracked(m, &a.image, |p| io::load_image(p))?;
    let flow = tracked(m, &a.flow, |p| io::load_flow(p))?;
    let out = m.time("warp", || warp_image(&img, &flow));
    at(&a.out, io::save_image(&a.out, &out, a.ascii))?;
    m.output(&a.out);
    print_summary(json!({ "height": out.height(), "width": out.width(), "channels": out.channels() }));
    Ok(())
}

fn centroid(set: &KeypointSet) -> CliResult<Point2<f64>> {
    if set.is_empty() {
        return Err(CliError::input("keypoint set is empty"));
    }
    let sum = set.points().iter().fold(nalgebra::Vector2::zeros(), |acc, p| acc + p.coords);
    Ok(Point2::from(sum / set.len() as f64))
}

fn cmd_compose(m: &mut RunManifest, a: &ComposeArgs) -> CliResult<()> {
    let flows =
        a.flows.iter().map(|p| tracked(m, p, |p| io::load_flow(p))).collect::<CliResult<Vec<DenseFlow>>>()?;
    let (h, w, bounds) = (flows[0].height(), flows[0].width(), *flows[0].bounds());

    let background = match (&a.background, &a.bg_src, &a.bg_drv) {
        (Some(p), _, _) => read_json::<AffineFile>(m, p)?.matrix(),
        (None, Some(s), Some(d)) => {
            let src = KeypointSet::concat(&read_json::<KeypointFile>(m, s)?.sets);
            let drv = KeypointSet::concat(&read_json::<KeypointFile>(m, d)?.sets);
            // Same direction as the flows: driving frame → source frame.
            fit_affine_background(drv.points(), src.points())?
        }
        _ => return Err(CliError::input("a background affine map or keypoints are required")),
    };

    let count = flows.len() + 1;
    let masks = match (&a.masks, a.mask_mode) {
        (Some(p), _) => {
            let normalize = a.normalize;
            tracked(m, p, |p| io::load_masks(p, normalize))?
        }
        (None, Some(MaskMode::OneHot)) => ConfidenceMaps::one_hot(count, a.mask_index, h, w)?,
        (None, Some(MaskMode::Uniform)) => ConfidenceMaps::uniform(count, h, w)?,
        (None, Some(MaskMode::Keypoints)) => {
            let path = a.drv.as_ref().ok_or_else(|| CliError::input("--mask-mode keypoints needs --drv"))?;
            let drv: KeypointFile = read_json(m, path)?;
            if drv.sets.len() + 1 != flows.len() {
                return Err(CliError::input(format!(
                    "keypoint masks expect {} local flows plus one global flow, got {} flows",
                    drv.sets.len(),
                    flows.len()
                )));
            }
            let centroids = drv.sets.iter().map(centroid).collect::<CliResult<Vec<_>>>()?;
            keypoint_soft_masks(&centroids, h, w, bounds, a.sigma, a.bg_weight, a.global_weight)?
        }
        (None, None) => return Err(CliError::input("masks or --mask-mode are required")),
    };

    let composed = m.time("compose", || compose_dense_flow(&background, &flows, &masks))?;
    save_flow(m, &a.out, None, &composed)?;
    if let Some(p) = &a.masks_out {
        fs::write(p, io::write_pgm_stack(&masks)).map_err(|e| CliError::io(p, e))?;
        m.output(p);
    }
    print_summary(json!({ "height": h, "width": w, "flows": flows.len(), "masks": masks.count() }));
    Ok(())
}

fn cmd_tps(m: &mut RunManifest, a: &TpsArgs) -> CliResult<()> {
    let src = KeypointSet::concat(&read_json::<KeypointFile>(m, &a.src)?.sets);
    let drv = KeypointSet::concat(&read_json::<KeypointFile>(m, &a.drv)?.sets);
    if src.len() != drv.len() {
        return Err(CliError::input(format!("{} source vs {} driving keypoints", src.len(), drv.len())));
    }
    let t = m.time("tps_fit", || tps_fit(drv.points(), src.points(), a.lambda))?;
    let flow = m.time("tps_grid", || tps_transform_grid(&t, a.height, a.width, DomainBounds::unit()))?;
    let report = json!({
        "controls": src.len(),
        "lambda": a.lambda,
        "max_control_residual": t.control_residual(),
        "distortion": if a.height >= 3 && a.width >= 3 { Some(distortion_score(&flow)?) } else { None },
    });
    m.loss("max_control_residual", t.control_residual());
    save_flow(m, &a.out, a.png.as_deref(), &flow)?;
    if let Some(p) = &a.report {
        write_json(m, p, &report)?;
    }
    print_summary(report);
    Ok(())
}

fn cmd_synthetic(m: &mut RunManifest, a: &SyntheticArgs) -> CliResult<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        local_tess: a.local,
        global_tess: a.global,
        n_sets: a.sets,
        points_per_set: a.points,
        noise: a.noise,
        max_speed: a.speed,
        grid: a.grid,
        tps_regularization: a.lambda,
        fit: a.fit.config(),
        ..SyntheticConfig::default()
    };
    let report = match (&a.src, &a.drv) {
        (Some(s), Some(d)) => {
            let src: KeypointFile = read_json(m, s)?;
            let drv: KeypointFile = read_json(m, d)?;
            let star = a.theta_star.as_ref().map(|p| read_json::<Theta>(m, p)).transpose()?;
            m.time("compare", || synthetic::compare(&src.sets, &drv.sets, star.as_ref(), &cfg))?
        }
        _ => {
            let (data, report) = m.time("synthetic", || synthetic::run(&cfg))?;
            if let Some(dir) = &a.fixture_dir {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                write_json(m, &dir.join("kp_src.json"), &KeypointFile { sets: data.kp_src })?;
                write_json(m, &dir.join("kp_drv.json"), &KeypointFile { sets: data.kp_drv })?;
                write_json(m, &dir.join("theta_star.json"), &data.theta_star)?;
            }
            report
        }
    };
    m.loss("cpab_keypoint_residual", report.global.keypoint_residual);
    m.loss("tps_keypoint_residual", report.tps.keypoint_residual);
    write_json(m, &a.out, &report)?;
    print_summary(json!({
        "cpab_keypoint_residual": report.global.keypoint_residual,
        "tps_keypoint_residual": report.tps.keypoint_residual,
        "cpab_distortion": report.global.distortion,
        "tps_distortion": report.tps.distortion,
        "inverse_consistency": report.global.inverse_consistency,
    }));
    Ok(())
}
