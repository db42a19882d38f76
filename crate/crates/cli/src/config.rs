use std::path::{Path, PathBuf};

use dpcam_core::model::{Basis, BiphotonParams, GridSpec};
use dpcam_core::recon::{SolverConfig, Tau};
use dpcam_core::rng::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::presets;

/// Solver knobs exposed to experiment files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub rel_obj_tol: f64,
    pub debias: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            max_iters: d.max_iters,
            rel_obj_tol: d.rel_obj_tol,
            debias: d.debias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Pixels per detector edge; each detector has `side²` pixels.
    pub side: usize,
    pub bases: Vec<Basis>,
    pub sigma_p: f64,
    pub sigma_c: f64,
    pub position_pitch: f64,
    pub momentum_pitch: f64,
    /// Number of mask pairs.
    pub m: usize,
    /// Detected-photon budget per pattern.
    pub flux: f64,
    pub t_aq: f64,
    pub tau: Tau,
    pub thresholds: Vec<f64>,
    pub replicas: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub solver: SolverSettings,
    /// Also write the mask file for every replica and basis.
    pub save_patterns: bool,
}

/// Stream ids under a replica seed. Position and momentum draw from
/// disjoint ranges so adding a basis never shifts the other's numbers.
const PATTERN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

fn basis_offset(basis: Basis) -> u64 {
    match basis {
        Basis::Position => 0x10,
        Basis::Momentum => 0x20,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub replica: u64,
    pub patterns: u64,
    pub noise: u64,
}

/// `replica = derive_seed(master, r)`, then
/// `patterns = derive_seed(replica, basis + 0)` and
/// `noise = derive_seed(replica, basis + 1)` with basis offsets 0x10
/// (position) and 0x20 (momentum).
pub fn seeds_for(master: u64, replica: usize, basis: Basis) -> Seeds {
    let r = derive_seed(master, replica as u64);
    Seeds {
        replica: r,
        patterns: derive_seed(r, basis_offset(basis) + PATTERN_STREAM),
        noise: derive_seed(r, basis_offset(basis) + NOISE_STREAM),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.side == 0 {
            return bad("side must be at least 1".into());
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.bases.is_empty() {
            return bad("at least one basis is required".into());
        }
        if !(self.flux > 0.0 && self.flux.is_finite()) {
            return bad(format!("flux must be positive, got {}", self.flux));
        }
        if !(self.t_aq > 0.0) {
            return bad(format!("t_aq must be positive, got {}", self.t_aq));
        }
        if self.thresholds.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("threshold fractions must lie in [0, 1]".into());
        }
        if self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return bad("threshold fractions must be ascending".into());
        }
        BiphotonParams::new(self.sigma_p, self.sigma_c).map_err(|e| CliError::Config(e.to_string()))?;
        for b in &self.bases {
            self.grid(*b)?;
        }
        self.solver_config(false).validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn params(&self) -> BiphotonParams {
        BiphotonParams {
            sigma_p: self.sigma_p,
            sigma_c: self.sigma_c,
        }
    }

    pub fn pitch(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Position => self.position_pitch,
            Basis::Momentum => self.momentum_pitch,
        }
    }

    pub fn grid(&self, basis: Basis) -> Result<GridSpec> {
        GridSpec::new(self.side, self.pitch(basis), basis).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Pixels per detector.
    pub fn n(&self) -> usize {
        self.side * self.side
    }

    pub fn solver_config(&self, sweep: bool) -> SolverConfig {
        SolverConfig {
            tau: self.tau,
            max_iters: self.solver.max_iters,
            rel_obj_tol: self.solver.rel_obj_tol,
            nonneg: true,
            // flux sweeps skip the refit for speed
            debias: self.solver.debias && !sweep,
        }
    }

    /// SHA-256 of the canonical JSON form. The output directory is left
    /// out so the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let keyed = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&keyed).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy restricted to one basis.
    pub fn for_basis(&self, basis: Basis) -> Self {
        Self {
            bases: vec![basis],
            ..self.clone()
        }
    }
}

/// Partial config as read from a TOML file; every field overrides the preset.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub side: Option<usize>,
    pub bases: Option<Vec<Basis>>,
    pub sigma_p: Option<f64>,
    pub sigma_c: Option<f64>,
    pub position_pitch: Option<f64>,
    pub momentum_pitch: Option<f64>,
    pub m: Option<usize>,
    pub flux: Option<f64>,
    pub t_aq: Option<f64>,
    pub tau: Option<Tau>,
    pub thresholds: Option<Vec<f64>>,
    pub replicas: Option<usize>,
    pub master_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub solver: Option<SolverSettings>,
    pub save_patterns: Option<bool>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn apply(self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(name, side, bases, sigma_p, sigma_c, position_pitch, momentum_pitch, m, flux, t_aq, tau, thresholds, replicas, master_seed, out_dir, solver, save_patterns);
    }
}

/// Command-line overrides, applied last.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub flux: Option<f64>,
    pub m: Option<usize>,
    pub tau: Option<Tau>,
    pub thresholds: Option<Vec<f64>>,
    pub replicas: Option<usize>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_PRESET: &str = "paper-16x16";

/// Preset (flag, then file, then default), then file fields, then flags.
pub fn resolve(preset: Option<&str>, file: Option<ConfigFile>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let file = file.unwrap_or_default();
    let name = preset.or(file.preset.as_deref()).unwrap_or(DEFAULT_PRESET).to_string();
    let mut config = presets::preset(&name)?;
    file.apply(&mut config);
    if let Some(v) = overrides.seed {
        config.master_seed = v;
    }
    if let Some(v) = overrides.flux {
        config.flux = v;
    }
    if let Some(v) = overrides.m {
        config.m = v;
    }
    if let Some(v) = overrides.tau {
        config.tau = v;
    }
    if let Some(v) = &overrides.thresholds {
        config.thresholds = v.clone();
    }
    if let Some(v) = overrides.replicas {
        config.replicas = v;
    }
    if let Some(v) = &overrides.out {
        config.out_dir = v.clone();
    }
    config.validate()?;
    Ok(config)
}

/// `auto` or a positive number.
pub fn parse_tau(s: &str) -> std::result::Result<Tau, String> {
    if s.trim().eq_ignore_ascii_case("auto") {
        return Ok(Tau::Auto);
    }
    let v: f64 = s.trim().parse().map_err(|_| format!("expected `auto` or a number, got {s:?}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(Tau::Value(v))
    } else {
        Err(format!("tau must be positive, got {v}"))
    }
}

/// Comma-separated fractions.
pub fn parse_fractions(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad fraction {t:?}")))
        .collect()
}
