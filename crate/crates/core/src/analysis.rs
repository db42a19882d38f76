//! Entropic and statistical analysis of joint distributions.

use std::f64::consts::{E, PI};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::model::{
    fedorov_capacity, pair_kernel, pixel_coords, BiphotonParams, Dims, JointDistribution, Party, Quadrature,
    NORM_TOL,
};
use crate::nelder_mead::{self, Options};

fn entropy_bits(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

/// Plug-in mutual information `H(u) + H(v) − H(u, v)` in bits.
pub fn mutual_information(joint: &JointDistribution) -> Result<f64> {
    mutual_information_matrix(joint.matrix())
}

/// Mutual information of a raw probability matrix (must sum to 1 within 1e-9).
pub fn mutual_information_matrix(p: &Array2<f64>) -> Result<f64> {
    let total: f64 = p.sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized(total));
    }
    if p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return param("probabilities must be finite and nonnegative");
    }
    let hu = entropy_bits(p.rows().into_iter().map(|r| r.sum()));
    let hv = entropy_bits(p.columns().into_iter().map(|c| c.sum()));
    let huv = entropy_bits(p.iter().copied());
    let n = p.nrows().min(p.ncols()).max(1) as f64;
    Ok((hu + hv - huv).clamp(0.0, n.log2()))
}

/// Capacity of an `n`-pixel channel with perfect correlations and uniform marginals.
pub fn max_capacity(n: usize) -> Result<f64> {
    if n == 0 {
        return param("n must be at least 1");
    }
    Ok((n as f64).log2())
}

/// Zero every entry below `fraction · max(p)` and renormalize.
pub fn apply_threshold(joint: &JointDistribution, fraction: f64) -> Result<JointDistribution> {
    if !(0.0..=1.0).contains(&fraction) {
        return param(format!("threshold fraction must lie in [0, 1], got {fraction}"));
    }
    if fraction == 0.0 {
        return Ok(joint.clone());
    }
    let p = joint.matrix();
    let max = p.iter().fold(0.0f64, |m, &x| m.max(x));
    let cut = fraction * max;
    let kept = p.mapv(|x| if x < cut { 0.0 } else { x });
    if !kept.iter().any(|x| *x > 0.0) {
        return Err(Error::NoSignal(format!("threshold {fraction} removed every entry")));
    }
    JointDistribution::from_weights(joint.grid_signal, joint.grid_idler, kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub fractions: Vec<f64>,
    pub mi: Vec<f64>,
}

impl ThresholdCurve {
    /// `(fraction, mi)` at the maximum mutual information.
    pub fn peak(&self) -> (f64, f64) {
        self.fractions
            .iter()
            .zip(&self.mi)
            .fold((0.0, f64::NEG_INFINITY), |best, (&f, &m)| if m > best.1 { (f, m) } else { best })
    }
}

pub fn threshold_sweep(joint: &JointDistribution, fractions: &[f64]) -> Result<ThresholdCurve> {
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return param("threshold fractions must be ascending");
    }
    let mi = fractions
        .iter()
        .map(|&f| mutual_information(&apply_threshold(joint, f)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdCurve {
        fractions: fractions.to_vec(),
        mi,
    })
}

/// Trailing moving average over `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    if values.len() < w {
        return values.to_vec();
    }
    values.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// True when the smoothed sequence rises to a single peak and then falls
/// (either side may be flat, but the peak must exceed the first value).
pub fn is_rise_then_fall(values: &[f64], window: usize) -> bool {
    let s = smooth(values, window);
    if s.len() < 2 {
        return false;
    }
    let peak = s
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > s[best] { i } else { best });
    let rising = s[..=peak].windows(2).all(|w| w[1] >= w[0]);
    let falling = s[peak..].windows(2).all(|w| w[1] <= w[0]);
    peak > 0 && rising && falling
}

/// Mean of squared entry differences over all `n²` entries.
pub fn mse(recon: &JointDistribution, ideal: &JointDistribution) -> Result<f64> {
    let (a, b) = (recon.matrix(), ideal.matrix());
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: b.len(),
            got: a.len(),
        });
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `1 / (n·√mse)`; infinite for a perfect reconstruction.
pub fn snr_estimate(n: usize, mse: f64) -> Result<f64> {
    if n == 0 || !(mse >= 0.0) {
        return param(format!("snr needs n ≥ 1 and mse ≥ 0 (n={n}, mse={mse})"));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / (n as f64 * mse.sqrt()))
}

/// Classical bound `2·log2(n·dx·dk / (π e))` on `I_x + I_k`.
pub fn steering_bound(n: usize, d_x: f64, d_k: f64) -> Result<f64> {
    let arg = n as f64 * d_x * d_k / (PI * E);
    if !(arg > 0.0 && arg.is_finite()) {
        return Err(Error::Undefined(format!(
            "steering bound needs n·dx·dk > 0 (n={n}, dx={d_x}, dk={d_k})"
        )));
    }
    Ok(2.0 * arg.log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringVerdict {
    pub i_x: f64,
    pub i_k: f64,
    pub bound: f64,
    pub violated: bool,
    pub margin: f64,
}

pub fn steering_test(i_x: f64, i_k: f64, bound: f64) -> SteeringVerdict {
    let margin = i_x + i_k - bound;
    SteeringVerdict {
        i_x,
        i_k,
        bound,
        violated: margin > 0.0,
        margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileAxis {
    /// Marginal over `col_s + col_i` (and `row_s + row_i`).
    Sum,
    /// Marginal over `col_s − col_i`, offset by `side − 1`.
    Difference,
}

/// Anti-diagonal (or diagonal) profiles along the two transverse axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisProfiles {
    /// Along pixel columns.
    pub horizontal: Vec<f64>,
    /// Along pixel rows.
    pub vertical: Vec<f64>,
}

pub fn anti_diagonal_profile(joint: &JointDistribution, axis: ProfileAxis) -> Result<AxisProfiles> {
    let p = joint.matrix();
    if p.nrows() != p.ncols() {
        return param("profile needs a square joint distribution");
    }
    let side = joint.side();
    let len = 2 * side - 1;
    let mut horizontal = vec![0.0; len];
    let mut vertical = vec![0.0; len];
    let bin = |a: usize, b: usize| match axis {
        ProfileAxis::Sum => a + b,
        ProfileAxis::Difference => a + side - 1 - b,
    };
    for ((u, v), &val) in p.indexed_iter() {
        let (cu, ru) = pixel_coords(u, side);
        let (cv, rv) = pixel_coords(v, side);
        horizontal[bin(cu, cv)] += val;
        vertical[bin(ru, rv)] += val;
    }
    Ok(AxisProfiles { horizontal, vertical })
}

/// Standard deviation (in bins) of a least-squares Gaussian fitted to a
/// 1D profile.
pub fn profile_width(profile: &[f64]) -> Result<f64> {
    let total: f64 = profile.iter().sum();
    if !(total > 0.0) || profile.len() < 3 {
        return Err(Error::FitFailed("profile is empty".into()));
    }
    let mean = profile.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / total;
    let var = profile
        .iter()
        .enumerate()
        .map(|(k, v)| (k as f64 - mean).powi(2) * v)
        .sum::<f64>()
        / total;
    let peak = profile
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > profile[b] { i } else { b });
    let data_sq: f64 = profile.iter().map(|v| v * v).sum();
    let cost = |t: &[f64]| {
        let (mu, w) = (t[0], t[1].exp());
        let model: Vec<f64> = (0..profile.len())
            .map(|k| (-(k as f64 - mu).powi(2) / (2.0 * w * w)).exp())
            .collect();
        let dm: f64 = model.iter().zip(profile).map(|(m, d)| m * d).sum();
        let mm: f64 = model.iter().map(|m| m * m).sum();
        if mm == 0.0 {
            return f64::INFINITY;
        }
        data_sq - dm * dm / mm
    };
    let starts = [var.sqrt().max(0.3), 0.5, 1.0, 3.0];
    let best = starts
        .iter()
        .map(|&w0| nelder_mead::minimize(cost, &[peak as f64, w0.ln()], 0.25, Options::default()))
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("non-empty starts");
    Ok(best.x[1].exp())
}

/// Widths along the two transverse axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisWidths {
    pub horizontal: f64,
    pub vertical: f64,
}

/// Width in pixels of the correlation peak in the sum or difference
/// profile, fitted as a Gaussian on top of the floor an uncorrelated source
/// with the same marginals would produce.
///
/// Reconstructions carry a weak uncorrelated floor spread over the whole
/// profile; fitting it explicitly keeps the peak width from absorbing it.
pub fn correlation_width(joint: &JointDistribution, axis: ProfileAxis) -> Result<AxisWidths> {
    let profiles = anti_diagonal_profile(joint, axis)?;
    let side = joint.side();
    let (mut cs, mut rs, mut ci, mut ri) = (vec![0.0; side], vec![0.0; side], vec![0.0; side], vec![0.0; side]);
    for ((u, v), &val) in joint.matrix().indexed_iter() {
        let (cu, ru) = pixel_coords(u, side);
        let (cv, rv) = pixel_coords(v, side);
        cs[cu] += val;
        rs[ru] += val;
        ci[cv] += val;
        ri[rv] += val;
    }
    let floor = |s: &[f64], i: &[f64]| {
        let mut h = vec![0.0; 2 * side - 1];
        for (a, sa) in s.iter().enumerate() {
            for (b, ib) in i.iter().enumerate() {
                let k = match axis {
                    ProfileAxis::Sum => a + b,
                    ProfileAxis::Difference => a + side - 1 - b,
                };
                h[k] += sa * ib;
            }
        }
        h
    };
    Ok(AxisWidths {
        horizontal: peak_over_floor(&profiles.horizontal, &floor(&cs, &ci))?,
        vertical: peak_over_floor(&profiles.vertical, &floor(&rs, &ri))?,
    })
}

/// Nonnegative least-squares amplitudes for `data ≈ a·g + b·h`; returns the
/// residual and `a`.
fn two_term_fit(data: &[f64], g: &[f64], h: &[f64]) -> (f64, f64) {
    let (gg, hh, gh) = (dot(g, g), dot(h, h), dot(g, h));
    let (gd, hd, dd) = (dot(g, data), dot(h, data), dot(data, data));
    let residual = |a: f64, b: f64| dd - 2.0 * (a * gd + b * hd) + a * a * gg + 2.0 * a * b * gh + b * b * hh;
    let mut best = (dd, 0.0);
    let det = gg * hh - gh * gh;
    if det > 1e-12 * gg * hh {
        let a = (gd * hh - hd * gh) / det;
        let b = (hd * gg - gd * gh) / det;
        if a >= 0.0 && b >= 0.0 {
            best = (residual(a, b), a);
        }
    }
    if gg > 0.0 {
        let a = (gd / gg).max(0.0);
        let r = residual(a, 0.0);
        if r < best.0 {
            best = (r, a);
        }
    }
    if hh > 0.0 {
        let b = (hd / hh).max(0.0);
        let r = residual(0.0, b);
        if r < best.0 {
            best = (r, 0.0);
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn peak_over_floor(profile: &[f64], floor: &[f64]) -> Result<f64> {
    let total: f64 = profile.iter().sum();
    if !(total > 0.0) || profile.len() < 3 {
        return Err(Error::FitFailed("profile is empty".into()));
    }
    let peak = profile
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > profile[b] { i } else { b });
    let gauss = |mu: f64, w: f64| -> Vec<f64> {
        (0..profile.len())
            .map(|k| (-(k as f64 - mu).powi(2) / (2.0 * w * w)).exp())
            .collect()
    };
    let cost = |t: &[f64]| two_term_fit(profile, &gauss(t[0], t[1].exp()), floor).0;
    let best = [0.3f64, 0.6, 1.0, 2.0, 4.0]
        .iter()
        .map(|&w0| nelder_mead::minimize(cost, &[peak as f64, w0.ln()], 0.25, Options::default()))
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("non-empty starts");
    let w = best.x[1].exp();
    let (_, amplitude) = two_term_fit(profile, &gauss(best.x[0], w), floor);
    if !(amplitude > 0.0) {
        return Err(Error::FitFailed("no correlation peak above the uncorrelated floor".into()));
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    /// Effective correlation width in the length units of [`BiphotonParams`].
    pub sigma_ce: f64,
    /// Effective pump width in the same units.
    pub sigma_pe: f64,
    /// Scale absorbed by normalization.
    pub amplitude: f64,
    /// Residual sum of squares at the optimum.
    pub residual: f64,
    /// `σce < σpe`: the fitted state is correlated like an entangled pair.
    pub epr_regime: bool,
}

impl GaussianFit {
    pub fn params(&self) -> BiphotonParams {
        BiphotonParams {
            sigma_p: self.sigma_pe,
            sigma_c: self.sigma_ce,
        }
    }

}

const FIT_STARTS: [(f64, f64); 5] = [(1.0, 1.0), (0.5, 1.0), (2.0, 1.0), (1.0, 0.5), (1.0, 2.0)];

/// Moment estimates of the per-axis difference and sum widths, corrected
/// for uniform pixel blur.
fn moment_widths(joint: &JointDistribution) -> (f64, f64) {
    let side = joint.side();
    let (gs, gi) = (joint.grid_signal, joint.grid_idler);
    let mut m = [0.0f64; 4]; // E[d], E[d²], E[s], E[s²]
    for ((u, v), &val) in joint.matrix().indexed_iter() {
        let (cu, _) = pixel_coords(u, side);
        let (cv, _) = pixel_coords(v, side);
        let (xs, xi) = (gs.center(cu), gi.center(cv));
        let (d, s) = (xs - xi, xs + xi);
        m[0] += val * d;
        m[1] += val * d * d;
        m[2] += val * s;
        m[3] += val * s * s;
    }
    let blur = (gs.pitch * gs.pitch + gi.pitch * gi.pitch) / 12.0;
    let floor = (0.25 * gs.pitch).powi(2);
    let vd = (m[1] - m[0] * m[0] - blur).max(floor);
    let vs = (m[3] - m[2] * m[2] - blur).max(floor);
    (vd.sqrt(), vs.sqrt())
}

/// Least-squares fit of the discretized double-Gaussian model (free
/// amplitude) by Nelder-Mead from five starts.
pub fn fit_double_gaussian(joint: &JointDistribution) -> Result<GaussianFit> {
    let p = joint.matrix();
    let max = p.iter().fold(0.0f64, |a, &b| a.max(b));
    let min = p.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max - min <= 1e-12 * max {
        return Err(Error::FitFailed("input distribution is flat".into()));
    }
    let side = joint.side();
    let (gs, gi) = (joint.grid_signal, joint.grid_idler);
    let basis = joint.basis();
    let quad = Quadrature {
        panels_per_width: 2.0,
        max_panels: 64,
    };
    let data_sq: f64 = p.iter().map(|x| x * x).sum();

    // D[cu, ru, cv, rv] laid out so the row contraction is contiguous
    let n = side * side;
    let cost = |t: &[f64]| -> (f64, f64) {
        let (a, b) = (t[0].exp(), t[1].exp());
        let k = pair_kernel(a, b, &gs, &gi, quad);
        let kk: f64 = k.iter().map(|x| x * x).sum();
        let mm = kk * kk;
        if !(mm > 0.0) || !mm.is_finite() {
            return (f64::INFINITY, 0.0);
        }
        let mut dm = 0.0;
        for u in 0..n {
            let (cu, ru) = pixel_coords(u, side);
            let row = p.row(u);
            for v in 0..n {
                let (cv, rv) = pixel_coords(v, side);
                dm += row[v] * k[[cu, cv]] * k[[ru, rv]];
            }
        }
        (data_sq - dm * dm / mm, dm / mm)
    };

    let (a0, b0) = moment_widths(joint);
    let extent = 1e3 * (gs.half_extent() + gi.half_extent());
    let opts = Options {
        max_evals: 600,
        f_tol: 1e-16,
        x_tol: 1e-7,
    };
    let best = FIT_STARTS
        .iter()
        .map(|&(fa, fb)| {
            nelder_mead::minimize(
                |t| {
                    if t[0].exp() > extent || t[1].exp() > extent {
                        return f64::INFINITY;
                    }
                    cost(t).0
                },
                &[(a0 * fa).ln(), (b0 * fb).ln()],
                0.3,
                opts,
            )
        })
        .min_by(|x, y| x.f.total_cmp(&y.f))
        .expect("non-empty starts");
    if !best.f.is_finite() {
        return Err(Error::FitFailed("no finite residual found".into()));
    }
    let (diff, sum) = (best.x[0].exp(), best.x[1].exp());
    let amplitude = cost(&best.x).1;
    let params = BiphotonParams::from_axis_widths(basis, diff, sum);
    Ok(GaussianFit {
        sigma_ce: params.sigma_c,
        sigma_pe: params.sigma_p,
        amplitude,
        residual: best.f,
        epr_regime: params.sigma_c < params.sigma_p,
    })
}

/// Flat key-value analysis summary written as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub mi_x: Option<f64>,
    pub mi_k: Option<f64>,
    pub bound: Option<f64>,
    pub margin: Option<f64>,
    pub sigma_ce: Option<f64>,
    pub sigma_pe: Option<f64>,
    pub fedorov_bits: Option<f64>,
    pub mse: Option<f64>,
    pub snr: Option<f64>,
    pub threshold_used: Option<f64>,
}

/// Fedorov capacity of a fit, flagged when outside the high-ratio regime.
pub fn fitted_capacity(fit: &GaussianFit) -> Result<f64> {
    Ok(fedorov_capacity(&fit.params(), Dims::Two)?.bits)
}

/// Marginal entropy helper: `H` of one party in bits.
pub fn marginal_entropy(joint: &JointDistribution, party: Party) -> f64 {
    entropy_bits(joint.marginal(party))
}
