//! Regenerates the files under `fixtures/`. Usage: `cargo run -p cpab-core --example make_fixtures [DIR]`.

use std::path::PathBuf;

use cpab::basis::CpaBasis;
use cpab::dense_motion::Image;
use cpab::field::Theta;
use cpab::flow::DenseFlow;
use cpab::io::{self, KeypointFile};
use cpab::synthetic::{generate, SyntheticConfig};
use cpab::tessellation::{DomainBounds, Tessellation};

/// Seed of the shipped synthetic keypoint fixture.
const SYNTHETIC_SEED: u64 = 7;

fn pattern(height: usize, width: usize, channels: usize) -> Image {
    let mut bytes = Vec::with_capacity(height * width * channels);
    for r in 0..height {
        for c in 0..width {
            for k in 0..channels {
                let checker = if (r / 4 + c / 4) % 2 == 0 { 40 } else { 0 };
                bytes.push(((r * 7 + c * 5 + k * 60 + checker) % 256) as u8);
            }
        }
    }
    Image::from_u8(height, width, channels, &bytes).expect("pattern size")
}

fn main() -> cpab::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures"));
    for sub in ["images", "flows", "theta", "synthetic"] {
        std::fs::create_dir_all(root.join(sub))?;
    }

    io::save_image(root.join("images/pattern.png"), &pattern(24, 32, 3), false)?;
    io::save_image(root.join("images/pattern_gray.pgm"), &pattern(16, 16, 1), false)?;

    // Every output pixel reads the source pixel one column to its right.
    let disp = vec![[1.0, 0.0]; 24 * 32];
    DenseFlow::from_displacements(24, 32, DomainBounds::unit(), &disp)?.save_flo(root.join("flows/shift_right_1px.flo"))?;

    // Constant velocity (0.1, -0.05) projected onto the 4x4 basis; translations lie in every span.
    let basis = CpaBasis::new(&Tessellation::unit(4, 4)?, false)?;
    let target: Vec<f64> = (0..basis.tessellation().n_cells()).flat_map(|_| [0.0, 0.0, 0.1, 0.0, 0.0, -0.05]).collect();
    let values: Vec<f64> = (0..basis.dim())
        .map(|j| basis.matrix().column(j).iter().zip(&target).map(|(b, t)| b * t).sum())
        .collect();
    io::write_json(root.join("theta/translation_4x4.json"), &Theta::new(values, &basis)?)?;

    let data = generate(&SyntheticConfig { seed: SYNTHETIC_SEED, ..SyntheticConfig::default() })?;
    io::write_json(root.join("synthetic/kp_src.json"), &KeypointFile { sets: data.kp_src })?;
    io::write_json(root.join("synthetic/kp_drv.json"), &KeypointFile { sets: data.kp_drv })?;
    io::write_json(root.join("synthetic/theta_star.json"), &data.theta_star)?;
    println!("fixtures written to {}", root.display());
    Ok(())
}
