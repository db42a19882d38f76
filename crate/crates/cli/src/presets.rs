use std::f64::consts::{E, PI};
use std::path::PathBuf;

use dpcam_core::model::Basis;
use dpcam_core::recon::Tau;

use crate::config::{ExperimentConfig, SolverSettings};
use crate::error::{CliError, Result};

pub const PRESETS: &[&str] = &[
    "paper-16x16",
    "paper-16x16-position",
    "paper-16x16-momentum",
    "paper-24x24",
    "paper-32x32",
    "desk-steering",
];

/// Fractions 0, 0.025, ..., 0.5.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 0.025).collect()
}

/// Paper resolutions: the pump fills a quarter of the detector edge, the
/// correlation width stays well under a pixel, and the momentum pitch
/// `1/(4σpσc)` makes the momentum table the mirror of the position one.
fn paper(side: usize, m: usize, bases: Vec<Basis>, name: &str) -> ExperimentConfig {
    let sigma_p = side as f64 / 4.0;
    let sigma_c = 0.1;
    ExperimentConfig {
        name: name.to_string(),
        side,
        bases,
        sigma_p,
        sigma_c,
        position_pitch: 1.0,
        momentum_pitch: 1.0 / (4.0 * sigma_p * sigma_c),
        m,
        flux: 5000.0,
        t_aq: 1.0,
        tau: Tau::Auto,
        thresholds: default_thresholds(),
        replicas: 1,
        master_seed: 1,
        out_dir: PathBuf::from("runs").join(name),
        solver: SolverSettings::default(),
        save_patterns: false,
    }
}

/// Side 8 with `σp/σc = 8` and `n·dx·dk = 4πe`. With `dk` also equal to the
/// mirror pitch `1/(4σpσc)` this fixes `σc = √(n/(128πe))`.
fn desk_steering() -> ExperimentConfig {
    let side = 8;
    let n = (side * side) as f64;
    let sigma_c = (n / (128.0 * PI * E)).sqrt();
    let mut c = paper(side, 1500, vec![Basis::Position, Basis::Momentum], "desk-steering");
    c.sigma_c = sigma_c;
    c.sigma_p = 8.0 * sigma_c;
    c.position_pitch = 1.0;
    c.momentum_pitch = 4.0 * PI * E / n;
    c.replicas = 10;
    c
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let both = || vec![Basis::Position, Basis::Momentum];
    Ok(match name {
        "paper-16x16" => paper(16, 2500, both(), name),
        "paper-16x16-position" => paper(16, 2500, vec![Basis::Position], name),
        "paper-16x16-momentum" => paper(16, 2500, vec![Basis::Momentum], name),
        "paper-24x24" => paper(24, 10_000, both(), name),
        "paper-32x32" => paper(32, 30_000, both(), name),
        "desk-steering" => desk_steering(),
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    })
}
