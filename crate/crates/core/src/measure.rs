//! Photon-counting measurement simulation, raster-scan baselines and
//! noise diagnostics.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::mse;
use crate::error::{param, Error, Result};
use crate::model::JointDistribution;
use crate::recon::{normalize, solve_bpdn, NormalizeMode, SolverConfig};
use crate::rng::{derive_seed, Stream};
use crate::sensing::SensingOperator;

/// Coincidence counts for one pattern sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub counts: Vec<u64>,
    /// Detected-photon budget per pattern.
    pub flux: f64,
    /// Acquisition time per pattern in seconds.
    pub t_aq: f64,
    pub seed: u64,
    /// Pixels per detector.
    pub n: usize,
}

impl MeasurementRecord {
    pub fn m(&self) -> usize {
        self.counts.len()
    }

    pub fn y(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.counts.iter().sum::<u64>() as f64 / self.m().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub t_aq: f64,
    /// Expected background counts per pattern (dark counts, accidentals).
    pub background: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            t_aq: 1.0,
            background: 0.0,
        }
    }
}

const INVERSION_LIMIT: f64 = 10.0;

/// Exact Poisson draw: sequential inversion below mean 10, Hörmann's
/// transformed rejection with squeeze (PTRS) above.
pub fn sample_poisson(mean: f64, rng: &mut Stream) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    if mean < INVERSION_LIMIT {
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u = rng.uniform();
        let mut k = 0u64;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        return k;
    }
    let smu = mean.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    let log_mean = mean.ln();
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * log_mean - libm::lgamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// `yᵢ ~ Poisson(flux · (A X)ᵢ)` with pure shot noise.
pub fn simulate_measurements(
    joint: &JointDistribution,
    op: &SensingOperator,
    flux: f64,
    seed: u64,
) -> Result<MeasurementRecord> {
    simulate_with(joint, op, flux, seed, SimOptions::default())
}

/// As [`simulate_measurements`], with acquisition metadata and an optional
/// constant background rate. Row `i` draws from stream `derive_seed(seed, i)`.
pub fn simulate_with(
    joint: &JointDistribution,
    op: &SensingOperator,
    flux: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<MeasurementRecord> {
    if !(flux > 0.0 && flux.is_finite()) {
        return param(format!("flux must be positive, got {flux}"));
    }
    if !(opts.background >= 0.0) || !(opts.t_aq > 0.0) {
        return param("background must be nonnegative and t_aq positive");
    }
    if joint.n() != op.n() {
        return Err(Error::Dimension {
            expected: op.n(),
            got: joint.n(),
        });
    }
    let ax = op.forward_apply(&joint.to_vec())?;
    let counts = ax
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut rng = Stream::new(derive_seed(seed, i as u64));
            sample_poisson(flux * v.max(0.0) + opts.background, &mut rng)
        })
        .collect();
    Ok(MeasurementRecord {
        counts,
        flux,
        t_aq: opts.t_aq,
        seed,
        n: op.n(),
    })
}

/// Joint raster-scan time `n³·SNR²/Φ` in seconds.
pub fn raster_scan_time(n: usize, snr: f64, flux: f64) -> Result<f64> {
    if n == 0 || !(snr > 0.0) || !(flux > 0.0) {
        return param("raster_scan_time needs positive n, snr and flux");
    }
    let n = n as f64;
    Ok(n * n * n * snr * snr / flux)
}

/// Acquisition-time advantage over raster scanning, `n²/log2(n)`.
pub fn compressive_advantage(n: usize) -> Result<f64> {
    if n < 2 {
        return param("compressive_advantage needs n ≥ 2");
    }
    let nf = n as f64;
    Ok(nf * nf / nf.log2())
}

/// `std(y)/√mean(y)`; reconstructions need this above some β > 1.
pub fn noise_margin(record: &MeasurementRecord) -> Result<f64> {
    noise_margin_counts(&record.y())
}

pub fn noise_margin_counts(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return param("noise margin needs at least two measurements");
    }
    let m = y.len() as f64;
    let mean = y.iter().sum::<f64>() / m;
    if !(mean > 0.0) {
        return Err(Error::Undefined("noise margin of an all-zero record".into()));
    }
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    Ok(var.sqrt() / mean.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxSweepResult {
    pub flux_grid: Vec<f64>,
    /// NaN where the grid point failed.
    pub mse: Vec<f64>,
    pub beta_margin: Vec<f64>,
    pub errors: Vec<Option<String>>,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn sweep_point(
    joint: &JointDistribution,
    op: &SensingOperator,
    flux: f64,
    config: &SolverConfig,
    seed: u64,
) -> (Result<f64>, f64) {
    let record = match simulate_measurements(joint, op, flux, seed) {
        Ok(r) => r,
        Err(e) => return (Err(e), f64::NAN),
    };
    let margin = noise_margin(&record).unwrap_or(f64::NAN);
    let score = solve_bpdn(op, &record.y(), config).and_then(|result| {
        let recon = normalize(
            &result.x_hat,
            NormalizeMode::PerFlux(flux),
            joint.grid_signal,
            joint.grid_idler,
        )?;
        mse(&recon, joint)
    });
    (score, margin)
}

/// Simulate, reconstruct and score at each flux. Point `k` uses noise seed
/// `derive_seed(seed, k)`; failures are recorded without stopping the sweep.
pub fn flux_sweep(
    joint: &JointDistribution,
    op: &SensingOperator,
    flux_grid: &[f64],
    config: &SolverConfig,
    seed: u64,
) -> Result<FluxSweepResult> {
    config.validate()?;
    if flux_grid.windows(2).any(|w| w[1] < w[0]) {
        return param("flux grid must be ascending");
    }
    let points: Vec<(Result<f64>, f64)> = flux_grid
        .par_iter()
        .enumerate()
        .map(|(k, &flux)| sweep_point(joint, op, flux, config, derive_seed(seed, k as u64)))
        .collect();
    let mut out = FluxSweepResult {
        flux_grid: flux_grid.to_vec(),
        mse: Vec::with_capacity(points.len()),
        beta_margin: Vec::with_capacity(points.len()),
        errors: Vec::with_capacity(points.len()),
    };
    for (score, margin) in points {
        out.beta_margin.push(margin);
        match score {
            Ok(e) => {
                out.mse.push(e);
                out.errors.push(None);
            }
            Err(e) => {
                out.mse.push(f64::NAN);
                out.errors.push(Some(e.to_string()));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats

pub fn write_record<W: Write>(mut w: W, r: &MeasurementRecord) -> std::io::Result<()> {
    writeln!(w, "# m: {}", r.m())?;
    writeln!(w, "# n: {}", r.n)?;
    writeln!(w, "# flux: {:e}", r.flux)?;
    writeln!(w, "# t_aq: {:e}", r.t_aq)?;
    writeln!(w, "# seed: {}", r.seed)?;
    for c in &r.counts {
        writeln!(w, "{c}")?;
    }
    Ok(())
}

pub fn read_record<R: BufRead>(r: R) -> Result<MeasurementRecord> {
    let mut m = None;
    let mut n = None;
    let mut flux = None;
    let mut t_aq = None;
    let mut seed = None;
    let mut counts = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.split_once(':') {
                let v = v.trim();
                match k.trim() {
                    "m" => m = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                    "n" => n = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                    "flux" => flux = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                    "t_aq" => t_aq = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                    "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                    _ => {}
                }
            }
            continue;
        }
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        counts.push(t.parse::<u64>().map_err(|e| bad(e.to_string()))?);
    }
    let missing = |what: &str| Error::Parse {
        line: 0,
        msg: format!("missing {what} header"),
    };
    let m = m.ok_or_else(|| missing("m"))?;
    if counts.len() != m {
        return Err(Error::Parse {
            line: 0,
            msg: format!("header says m = {m} but found {} counts", counts.len()),
        });
    }
    Ok(MeasurementRecord {
        counts,
        flux: flux.ok_or_else(|| missing("flux"))?,
        t_aq: t_aq.ok_or_else(|| missing("t_aq"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        n: n.ok_or_else(|| missing("n"))?,
    })
}

/// CSV with columns `flux,mse,beta_margin`.
pub fn write_sweep_csv<W: Write>(mut w: W, s: &FluxSweepResult) -> std::io::Result<()> {
    writeln!(w, "flux,mse,beta_margin")?;
    for ((f, e), b) in s.flux_grid.iter().zip(&s.mse).zip(&s.beta_margin) {
        writeln!(w, "{f:e},{e:e},{b:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{position_joint_pdf, BiphotonParams, Basis, GridSpec};
    use crate::sensing::{generate_patterns, PatternSet};
    use approx::assert_relative_eq;

    #[test]
    fn raster_examples() {
        let day = 86_400.0;
        let t = raster_scan_time(576, 10.0, 4000.0).unwrap();
        assert!((t / day - 55.3).abs() < 0.1, "{}", t / day);
        assert_relative_eq!(t, 576f64.powi(3) * 100.0 / 4000.0, max_relative = 1e-15);
        let t = raster_scan_time(1024, 10.0, 4000.0).unwrap();
        assert!((t / day - 310.7).abs() < 0.1, "{}", t / day);
        assert_eq!(raster_scan_time(1, 1.0, 1.0).unwrap(), 1.0);
        assert!(raster_scan_time(0, 1.0, 1.0).is_err());
        assert!(raster_scan_time(4, 1.0, 0.0).is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compressive_advantage(2).unwrap(), 4.0);
        assert_eq!(compressive_advantage(4).unwrap(), 8.0);
        let a = compressive_advantage(1024).unwrap();
        assert!((a - 104_857.6).abs() < 1e-6);
        assert!(compressive_advantage(1).is_err());
    }

    #[test]
    fn noise_margin_cases() {
        assert_eq!(noise_margin_counts(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!(noise_margin_counts(&[0.0, 0.0]).is_err());
        assert!(noise_margin_counts(&[1.0]).is_err());
        let mut rng = Stream::new(derive_seed(5, 5));
        let y: Vec<f64> = (0..20_000).map(|_| sample_poisson(400.0, &mut rng) as f64).collect();
        let r = noise_margin_counts(&y).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r}");
    }

    fn poisson_moments(mean: f64, draws: usize, seed: u64) -> (f64, f64) {
        let mut rng = Stream::new(derive_seed(seed, 0));
        let xs: Vec<f64> = (0..draws).map(|_| sample_poisson(mean, &mut rng) as f64).collect();
        let m = xs.iter().sum::<f64>() / draws as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (draws as f64 - 1.0);
        (m, v)
    }

    #[test]
    fn poisson_moments_across_regimes() {
        for (mean, seed) in [(0.3, 1), (3.0, 2), (9.9, 3), (10.0, 4), (57.0, 5), (1250.0, 6), (1e5, 7)] {
            let draws = 40_000;
            let (m, v) = poisson_moments(mean, draws, seed);
            let se = (mean / draws as f64).sqrt();
            assert!((m - mean).abs() < 5.0 * se, "mean {mean}: {m}");
            assert!((v / mean - 1.0).abs() < 0.05, "mean {mean}: var {v}");
        }
    }

    #[test]
    fn poisson_pmf_small_mean() {
        // empirical frequencies against the pmf at mean 2
        let mut rng = Stream::new(99);
        let draws = 200_000;
        let mut hist = [0usize; 8];
        for _ in 0..draws {
            let k = sample_poisson(2.0, &mut rng) as usize;
            if k < 8 {
                hist[k] += 1;
            }
        }
        let mut pmf = (-2.0f64).exp();
        for (k, &h) in hist.iter().enumerate() {
            if k > 0 {
                pmf *= 2.0 / k as f64;
            }
            let f = h as f64 / draws as f64;
            let se = (pmf * (1.0 - pmf) / draws as f64).sqrt();
            assert!((f - pmf).abs() < 5.0 * se + 1e-6, "k={k}: {f} vs {pmf}");
        }
    }

    #[test]
    fn simulate_rejects_bad_flux() {
        let g = GridSpec::new(2, 1.0, Basis::Position).unwrap();
        let j = position_joint_pdf(&BiphotonParams::new(1.0, 0.5).unwrap(), &g).unwrap();
        let op = SensingOperator::new(generate_patterns(1, 5, 4).unwrap());
        assert!(simulate_measurements(&j, &op, 0.0, 1).is_err());
        assert!(simulate_measurements(&j, &op, -1.0, 1).is_err());
        let wrong = SensingOperator::new(generate_patterns(1, 5, 9).unwrap());
        assert!(simulate_measurements(&j, &wrong, 10.0, 1).is_err());
    }

    #[test]
    fn dark_rows_stay_dark() {
        // support only at (u=0, v=0); row 0 masks exclude it
        let g = GridSpec::new(2, 1.0, Basis::Position).unwrap();
        let mut p = ndarray::Array2::zeros((4, 4));
        p[[0, 0]] = 1.0;
        let j = JointDistribution::new(g, g, p).unwrap();
        let pats = PatternSet::from_rows(&[vec![0, 1, 1, 1], vec![1, 0, 0, 0]], &[vec![0, 1, 1, 1], vec![1, 1, 0, 0]], 0).unwrap();
        let op = SensingOperator::new(pats);
        for seed in 0..20 {
            let r = simulate_measurements(&j, &op, 1e4, seed).unwrap();
            assert_eq!(r.counts[0], 0);
            assert!(r.counts[1] > 0);
        }
    }

    #[test]
    fn background_adds_counts() {
        let g = GridSpec::new(2, 1.0, Basis::Position).unwrap();
        let mut p = ndarray::Array2::zeros((4, 4));
        p[[0, 0]] = 1.0;
        let j = JointDistribution::new(g, g, p).unwrap();
        let pats = PatternSet::from_rows(&vec![vec![0, 1, 1, 1]; 400], &vec![vec![0, 1, 1, 1]; 400], 0).unwrap();
        let op = SensingOperator::new(pats);
        let opts = SimOptions {
            t_aq: 1.5,
            background: 20.0,
        };
        let r = simulate_with(&j, &op, 100.0, 3, opts).unwrap();
        assert!((r.mean() - 20.0).abs() < 5.0 * (20.0f64 / 400.0).sqrt());
        assert_eq!(r.t_aq, 1.5);
    }

    #[test]
    fn record_round_trip() {
        let r = MeasurementRecord {
            counts: vec![0, 5, 1250, 17],
            flux: 5000.0,
            t_aq: 1.0,
            seed: 12,
            n: 256,
        };
        let mut buf = Vec::new();
        write_record(&mut buf, &r).unwrap();
        assert_eq!(read_record(buf.as_slice()).unwrap(), r);
        let truncated = "# m: 3\n# n: 4\n# flux: 1e0\n# t_aq: 1e0\n# seed: 0\n1\n2\n";
        assert!(read_record(truncated.as_bytes()).is_err());
    }

    #[test]
    fn log_spacing() {
        let g = log_spaced(50.0, 5e4, 8);
        assert_eq!(g.len(), 8);
        assert_relative_eq!(g[0], 50.0, max_relative = 1e-12);
        assert_relative_eq!(g[7], 5e4, max_relative = 1e-12);
        for w in g.windows(2) {
            assert_relative_eq!(w[1] / w[0], 10f64.powf(3.0 / 7.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn sweep_csv_layout() {
        let s = FluxSweepResult {
            flux_grid: vec![50.0, 500.0],
            mse: vec![1e-5, f64::NAN],
            beta_margin: vec![0.5, 2.0],
            errors: vec![None, Some("boom".into())],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "flux,mse,beta_margin\n5e1,1e-5,5e-1\n5e2,NaN,2e0\n");
    }
}
