#![allow(dead_code)]

use dpcam_core::sensing::SensingOperator;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Composite Gauss-Legendre integral of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, rule: &[(f64, f64)]) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for &(t, w) in rule {
            acc += w * f(mid + 0.5 * h * t);
        }
    }
    acc * 0.5 * h
}

/// Dense `m × n²` matrix built from `explicit_row`.
pub fn explicit_matrix(op: &SensingOperator) -> Vec<Vec<f64>> {
    (0..op.m())
        .map(|i| op.explicit_row(i).unwrap().into_iter().map(f64::from).collect())
        .collect()
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect()
}

pub fn matvec_t(a: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.first().map_or(0, Vec::len)];
    for (row, yi) in a.iter().zip(y) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * yi;
        }
    }
    out
}
