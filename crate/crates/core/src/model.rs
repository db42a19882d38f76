//! Discretized double-Gaussian biphoton distributions.
//!
//! Both the near-field (position) and far-field (momentum) coincidence
//! probabilities have the per-axis form
//!
//! ```text
//! |f(s, i)|^2 ∝ exp(-(s - i)^2 / (2 A^2)) · exp(-(s + i)^2 / (2 B^2))
//! ```
//!
//! with `A = σc, B = 2σp` in position space and `A = 1/(2σc), B = 1/(4σp)`
//! in momentum space. The transverse axes factor, so a `side × side` pixel
//! grid is handled by integrating one `side × side` pixel-pair kernel per
//! axis and taking the tensor product.
//!
//! Pixel `u` of a `side × side` grid sits at column `u / side`, row
//! `u % side` (pixels are listed column by column).

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Width ratio above which `σp ≫ σc` is considered satisfied.
pub const HIGH_RATIO: f64 = 10.0;

/// Tolerance used when accepting externally supplied distributions.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiphotonParams {
    /// Pump width.
    pub sigma_p: f64,
    /// Correlation width.
    pub sigma_c: f64,
}

impl BiphotonParams {
    pub fn new(sigma_p: f64, sigma_c: f64) -> Result<Self> {
        let p = Self { sigma_p, sigma_c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return param(format!("sigma_p must be positive, got {}", self.sigma_p));
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return param(format!("sigma_c must be positive, got {}", self.sigma_c));
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.sigma_p / self.sigma_c
    }

    /// True when `σp/σc ≥ 10`, where the continuous-model capacity formula applies.
    pub fn is_high_ratio(&self) -> bool {
        self.ratio() >= HIGH_RATIO
    }

    /// Per-axis `(A, B)`: standard deviations of `s - i` and `s + i`.
    pub(crate) fn axis_widths(&self, basis: Basis) -> (f64, f64) {
        match basis {
            Basis::Position => (self.sigma_c, 2.0 * self.sigma_p),
            Basis::Momentum => (0.5 / self.sigma_c, 0.25 / self.sigma_p),
        }
    }

    /// Inverse of [`axis_widths`](Self::axis_widths).
    pub(crate) fn from_axis_widths(basis: Basis, diff: f64, sum: f64) -> Self {
        match basis {
            Basis::Position => Self {
                sigma_c: diff,
                sigma_p: 0.5 * sum,
            },
            Basis::Momentum => Self {
                sigma_c: 0.5 / diff,
                sigma_p: 0.25 / sum,
            },
        }
    }

    /// Standard deviation of one party's coordinate along one axis.
    pub fn marginal_std(&self, basis: Basis) -> f64 {
        let (a, b) = self.axis_widths(basis);
        0.5 * (a * a + b * b).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Position,
    Momentum,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Position => "position",
            Basis::Momentum => "momentum",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "position" | "x" => Ok(Basis::Position),
            "momentum" | "k" => Ok(Basis::Momentum),
            other => param(format!("unknown basis {other:?}")),
        }
    }
}

/// Square detector grid. `pitch` is a length in position space and an
/// inverse length in momentum space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side: usize,
    pub pitch: f64,
    pub basis: Basis,
    /// Coordinate of the grid center, applied on both transverse axes.
    pub origin: f64,
}

impl GridSpec {
    pub fn new(side: usize, pitch: f64, basis: Basis) -> Result<Self> {
        let g = Self {
            side,
            pitch,
            basis,
            origin: 0.0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return param("grid side must be at least 1");
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return param(format!("grid pitch must be positive, got {}", self.pitch));
        }
        if !self.origin.is_finite() {
            return param("grid origin must be finite");
        }
        Ok(())
    }

    /// Pixels per detector, `side²`.
    pub fn n(&self) -> usize {
        self.side * self.side
    }

    /// Lower and upper edge of pixel `j` along one axis.
    pub fn edges(&self, j: usize) -> (f64, f64) {
        let lo = self.origin + (j as f64 - 0.5 * self.side as f64) * self.pitch;
        (lo, lo + self.pitch)
    }

    pub fn center(&self, j: usize) -> f64 {
        let (lo, hi) = self.edges(j);
        0.5 * (lo + hi)
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.side as f64 * self.pitch
    }
}

/// Split a pixel index into `(column, row)` coordinates.
#[inline]
pub fn pixel_coords(u: usize, side: usize) -> (usize, usize) {
    (u / side, u % side)
}

#[inline]
pub fn pixel_index(col: usize, row: usize, side: usize) -> usize {
    col * side + row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Signal,
    Idler,
}

/// Joint coincidence distribution `p(u, v)`; rows index signal pixels,
/// columns idler pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub grid_signal: GridSpec,
    pub grid_idler: GridSpec,
    p: Array2<f64>,
}

impl JointDistribution {
    /// Wrap a matrix that already sums to one (within [`NORM_TOL`]); it is
    /// rescaled to unit sum exactly.
    pub fn new(grid_signal: GridSpec, grid_idler: GridSpec, p: Array2<f64>) -> Result<Self> {
        let sum = check_matrix(&grid_signal, &grid_idler, &p)?;
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::Unnormalized(sum));
        }
        Ok(Self {
            grid_signal,
            grid_idler,
            p: p / sum,
        })
    }

    /// Normalize an arbitrary nonnegative matrix with positive total.
    pub fn from_weights(grid_signal: GridSpec, grid_idler: GridSpec, p: Array2<f64>) -> Result<Self> {
        let sum = check_matrix(&grid_signal, &grid_idler, &p)?;
        if !(sum > 0.0) {
            return Err(Error::NoSignal("all weights are zero".into()));
        }
        Ok(Self {
            grid_signal,
            grid_idler,
            p: p / sum,
        })
    }

    /// Rebuild from a column-major vector of length `n²`.
    pub fn from_vec(grid_signal: GridSpec, grid_idler: GridSpec, x: &[f64]) -> Result<Self> {
        let n = grid_signal.n();
        if x.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: x.len(),
            });
        }
        let p = Array2::from_shape_fn((n, n), |(u, v)| x[u + n * v]);
        Self::from_weights(grid_signal, grid_idler, p)
    }

    pub fn basis(&self) -> Basis {
        self.grid_signal.basis
    }

    pub fn side(&self) -> usize {
        self.grid_signal.side
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.p[[u, v]]
    }

    /// Column-major flattening: `x[u + n·v] = p(u, v)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let n = self.n();
        let mut x = vec![0.0; n * n];
        for ((u, v), &val) in self.p.indexed_iter() {
            x[u + n * v] = val;
        }
        x
    }

    /// Single-party marginal, `p(u) = Σ_v p(u, v)` (or the idler analogue).
    pub fn marginal(&self, party: Party) -> Vec<f64> {
        marginal(self, party)
    }
}

fn check_matrix(gs: &GridSpec, gi: &GridSpec, p: &Array2<f64>) -> Result<f64> {
    gs.validate()?;
    gi.validate()?;
    if gs.side != gi.side || gs.basis != gi.basis {
        return param("signal and idler grids must share side and basis");
    }
    let n = gs.n();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if p.nrows() != n { p.nrows() } else { p.ncols() },
        });
    }
    let mut sum = 0.0;
    for &x in p.iter() {
        if !(x >= 0.0 && x.is_finite()) {
            return param(format!("distribution entries must be finite and nonnegative, found {x}"));
        }
        sum += x;
    }
    Ok(sum)
}

pub fn marginal(joint: &JointDistribution, party: Party) -> Vec<f64> {
    let p = joint.matrix();
    match party {
        Party::Signal => p.rows().into_iter().map(|r| r.sum()).collect(),
        Party::Idler => p.columns().into_iter().map(|c| c.sum()).collect(),
    }
}

/// Pixel integration settings for the pair kernel.
///
/// The inner integral is done in closed form with `erf`; the outer one by
/// composite Gauss-Legendre with panels no wider than
/// `conditional_std / panels_per_width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub panels_per_width: f64,
    pub max_panels: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            panels_per_width: 2.0,
            max_panels: 512,
        }
    }
}

impl Quadrature {
    /// Twice as many panels as `self`.
    pub fn refined(self) -> Self {
        Self {
            panels_per_width: 2.0 * self.panels_per_width,
            max_panels: 2 * self.max_panels,
        }
    }
}

const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// `erf(hi) - erf(lo)` without cancellation in the tails.
fn erf_diff(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        libm::erfc(lo) - libm::erfc(hi)
    } else if hi <= 0.0 {
        libm::erfc(-hi) - libm::erfc(-lo)
    } else {
        libm::erf(hi) - libm::erf(lo)
    }
}

/// Unnormalized per-axis pixel-pair kernel `K[js, ji]` for difference width
/// `diff` and sum width `sum` (see the module docs).
pub fn pair_kernel(
    diff: f64,
    sum: f64,
    signal: &GridSpec,
    idler: &GridSpec,
    quad: Quadrature,
) -> Array2<f64> {
    let ia = 1.0 / (diff * diff);
    let ib = 1.0 / (sum * sum);
    // exponent = -(λ/2)(y - m x)^2 - (q/2) x^2
    let lambda = ia + ib;
    let m = (ia - ib) / lambda;
    let q = 4.0 * ia * ib / lambda;
    let cond_std = lambda.sqrt().recip();
    let scale = (0.5 * lambda).sqrt();

    let panels = ((signal.pitch * quad.panels_per_width / cond_std).ceil() as usize)
        .clamp(1, quad.max_panels.max(1));

    let mut k = Array2::zeros((signal.side, idler.side));
    for js in 0..signal.side {
        let (x0, x1) = signal.edges(js);
        let h = (x1 - x0) / panels as f64;
        // outer quadrature nodes for this signal pixel
        let mut nodes = Vec::with_capacity(panels * 8);
        for pnl in 0..panels {
            let mid = x0 + (pnl as f64 + 0.5) * h;
            let half = 0.5 * h;
            for (t, w) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()) {
                for x in [mid - half * t, mid + half * t] {
                    nodes.push((x, w * half * (-0.5 * q * x * x).exp()));
                }
            }
        }
        for ji in 0..idler.side {
            let (y0, y1) = idler.edges(ji);
            let mut acc = 0.0;
            for &(x, w) in &nodes {
                if w == 0.0 {
                    continue;
                }
                let mx = m * x;
                acc += w * erf_diff((y0 - mx) * scale, (y1 - mx) * scale);
            }
            k[[js, ji]] = acc;
        }
    }
    k
}

/// Assemble `p(u, v) = K(col_u, col_v)·K(row_u, row_v)` and normalize.
fn tensor_joint(kernel: &Array2<f64>, signal: GridSpec, idler: GridSpec) -> Result<JointDistribution> {
    let side = signal.side;
    let total: f64 = kernel.sum();
    if !(total > 0.0) {
        return Err(Error::NoSignal(
            "pixel kernel underflowed; grid does not overlap the distribution".into(),
        ));
    }
    let k = kernel / total;
    let n = side * side;
    let mut p = Array2::zeros((n, n));
    for u in 0..n {
        let (cu, ru) = pixel_coords(u, side);
        for v in 0..n {
            let (cv, rv) = pixel_coords(v, side);
            p[[u, v]] = k[[cu, cv]] * k[[ru, rv]];
        }
    }
    JointDistribution::from_weights(signal, idler, p)
}

fn check_coverage(params: &BiphotonParams, grid: &GridSpec) {
    let std = params.marginal_std(grid.basis);
    if grid.half_extent() < 4.0 * std {
        warn!(
            "{} grid half-extent {:.3} covers less than 4 marginal standard deviations ({:.3})",
            grid.basis,
            grid.half_extent(),
            4.0 * std
        );
    }
    let (a, b) = params.axis_widths(grid.basis);
    if a.min(b) < grid.pitch / 100.0 {
        warn!(
            "narrow {} width {:.3e} is below pitch/100; pixel integration may be inaccurate",
            grid.basis,
            a.min(b)
        );
    }
}

/// Joint distribution for arbitrary signal and idler grids of one basis.
pub fn joint_pdf(
    params: &BiphotonParams,
    signal: &GridSpec,
    idler: &GridSpec,
    quad: Quadrature,
) -> Result<JointDistribution> {
    params.validate()?;
    signal.validate()?;
    idler.validate()?;
    if signal.basis != idler.basis || signal.side != idler.side {
        return param("signal and idler grids must share side and basis");
    }
    check_coverage(params, signal);
    let (a, b) = params.axis_widths(signal.basis);
    let kernel = pair_kernel(a, b, signal, idler, quad);
    tensor_joint(&kernel, *signal, *idler)
}

/// Near-field (position-position) coincidence distribution.
pub fn position_joint_pdf(params: &BiphotonParams, grid: &GridSpec) -> Result<JointDistribution> {
    if grid.basis != Basis::Position {
        return param("position_joint_pdf requires a position grid");
    }
    joint_pdf(params, grid, grid, Quadrature::default())
}

/// Far-field (momentum-momentum) coincidence distribution.
pub fn momentum_joint_pdf(params: &BiphotonParams, grid: &GridSpec) -> Result<JointDistribution> {
    if grid.basis != Basis::Momentum {
        return param("momentum_joint_pdf requires a momentum grid");
    }
    joint_pdf(params, grid, grid, Quadrature::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dims {
    #[serde(rename = "1d")]
    One,
    #[serde(rename = "2d")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedorovCapacity {
    pub bits: f64,
    /// Set when `σp/σc < 10`, outside the regime where the formula holds.
    pub approximate: bool,
}

impl FedorovCapacity {
    /// Number of equivalent independent modes, `2^bits`.
    pub fn modes(&self) -> f64 {
        self.bits.exp2()
    }
}

/// Capacity in bits from the Fedorov ratio `σp²/σc²`; doubled for two
/// transverse dimensions.
pub fn fedorov_capacity(params: &BiphotonParams, dims: Dims) -> Result<FedorovCapacity> {
    params.validate()?;
    let per_axis = (params.sigma_p * params.sigma_p / (params.sigma_c * params.sigma_c)).log2();
    let bits = match dims {
        Dims::One => per_axis,
        Dims::Two => 2.0 * per_axis,
    };
    Ok(FedorovCapacity {
        bits,
        approximate: !params.is_high_ratio(),
    })
}

/// Exact mutual information (bits) of the continuous per-axis Gaussian,
/// `log2((A² + B²) / (2AB))`.
pub fn continuous_axis_mi(params: &BiphotonParams, basis: Basis) -> f64 {
    let (a, b) = params.axis_widths(basis);
    ((a * a + b * b) / (2.0 * a * b)).log2()
}

// ---------------------------------------------------------------------------
// Text serialization

fn fmt_grid(g: &GridSpec) -> String {
    format!("side={} pitch={:e} origin={:e}", g.side, g.pitch, g.origin)
}

fn parse_grid(s: &str, basis: Basis, line: usize) -> Result<GridSpec> {
    let mut side = None;
    let mut pitch = None;
    let mut origin = 0.0;
    for tok in s.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key=value, got {tok:?}"),
        })?;
        let bad = |_| Error::Parse {
            line,
            msg: format!("bad value for {k}: {v:?}"),
        };
        match k {
            "side" => side = Some(v.parse::<usize>().map_err(|_| bad(()))?),
            "pitch" => pitch = Some(v.parse::<f64>().map_err(|_| bad(()))?),
            "origin" => origin = v.parse::<f64>().map_err(|_| bad(()))?,
            _ => {}
        }
    }
    let (Some(side), Some(pitch)) = (side, pitch) else {
        return Err(Error::Parse {
            line,
            msg: "grid header needs side and pitch".into(),
        });
    };
    Ok(GridSpec {
        side,
        pitch,
        basis,
        origin,
    })
}

/// Write a joint distribution as a dense comma-separated matrix with a
/// `#`-prefixed header.
pub fn write_joint<W: Write>(
    mut w: W,
    joint: &JointDistribution,
    params: Option<&BiphotonParams>,
) -> std::io::Result<()> {
    writeln!(w, "# side: {}", joint.side())?;
    writeln!(w, "# pitch: {:e}", joint.grid_signal.pitch)?;
    writeln!(w, "# basis: {}", joint.basis())?;
    writeln!(w, "# signal: {}", fmt_grid(&joint.grid_signal))?;
    writeln!(w, "# idler: {}", fmt_grid(&joint.grid_idler))?;
    match params {
        Some(p) => writeln!(w, "# params: sigma_p={:e} sigma_c={:e}", p.sigma_p, p.sigma_c)?,
        None => writeln!(w, "# params: none")?,
    }
    let mut line = String::new();
    for row in joint.matrix().rows() {
        line.clear();
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{x:e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_joint<R: BufRead>(r: R) -> Result<(JointDistribution, Option<BiphotonParams>)> {
    let mut basis = None;
    let mut signal_hdr = None;
    let mut idler_hdr = None;
    let mut params = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if let Some(h) = line.strip_prefix('#') {
            let Some((key, val)) = h.split_once(':') else {
                continue;
            };
            let val = val.trim();
            match key.trim() {
                "basis" => basis = Some(val.parse::<Basis>()?),
                "signal" => signal_hdr = Some((val.to_string(), lineno)),
                "idler" => idler_hdr = Some((val.to_string(), lineno)),
                "params" if val != "none" => {
                    let mut sp = None;
                    let mut sc = None;
                    for tok in val.split_whitespace() {
                        match tok.split_once('=') {
                            Some(("sigma_p", v)) => sp = v.parse::<f64>().ok(),
                            Some(("sigma_c", v)) => sc = v.parse::<f64>().ok(),
                            _ => {}
                        }
                    }
                    match (sp, sc) {
                        (Some(p), Some(c)) => params = Some(BiphotonParams::new(p, c)?),
                        _ => {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: "params header needs sigma_p and sigma_c".into(),
                            })
                        }
                    }
                }
                _ => {}
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        rows.push(row);
    }
    let basis = basis.ok_or(Error::Parse {
        line: 0,
        msg: "missing basis header".into(),
    })?;
    let (sh, sl) = signal_hdr.ok_or(Error::Parse {
        line: 0,
        msg: "missing signal grid header".into(),
    })?;
    let (ih, il) = idler_hdr.ok_or(Error::Parse {
        line: 0,
        msg: "missing idler grid header".into(),
    })?;
    let gs = parse_grid(&sh, basis, sl)?;
    let gi = parse_grid(&ih, basis, il)?;
    let n = gs.n();
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected a {n}x{n} matrix"),
        });
    }
    let p = Array2::from_shape_fn((n, n), |(u, v)| rows[u][v]);
    Ok((JointDistribution::new(gs, gi, p)?, params))
}
