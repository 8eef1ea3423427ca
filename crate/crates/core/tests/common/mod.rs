// Independent oracles shared by integration tests. None of them call into the
// solver under test.
#![allow(dead_code)]

use num_complex::Complex64;
use qfmux::linalg::Matrix;
use qfmux::source::SourceParams;

/// Determinant by partial-pivot LU, as (sign, ln|det|).
pub fn lu_log_det(a: &Matrix) -> (f64, f64) {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    let (mut sign, mut log) = (1.0, 0.0);
    for k in 0..n {
        let p = (k..n).max_by(|&x, &y| m[x][k].abs().total_cmp(&m[y][k].abs())).unwrap();
        if m[p][k] == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if p != k {
            m.swap(p, k);
            sign = -sign;
        }
        let piv = m[k][k];
        sign *= piv.signum();
        log += piv.abs().ln();
        for i in k + 1..n {
            let f = m[i][k] / piv;
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    (sign, log)
}

/// prod(lambda - s) as (sign, ln|.|); conjugate pairs make the result real.
pub fn eig_log_det(eigs: &[Complex64], s: f64) -> (f64, f64) {
    let mut prod = Complex64::new(1.0, 0.0);
    let mut log = 0.0;
    for l in eigs {
        let d = l - s;
        log += d.norm().ln();
        prod *= d / d.norm();
    }
    (prod.re.signum(), log)
}

pub fn shifted(a: &Matrix, s: f64) -> Matrix {
    let mut b = a.clone();
    for i in 0..b.rows() {
        b[(i, i)] -= s;
    }
    b
}

fn excess(params: &[SourceParams], rc: f64, u: f64) -> f64 {
    params.iter().map(|p| p.inverse_rate(u).unwrap()).sum::<f64>() - rc
}

/// Common utility by exhaustive grid scan with adaptive refinement of the
/// cell holding the sign change.
pub fn grid_scan_equilibrium(params: &[SourceParams], rc: f64, lo: f64, hi: f64) -> (f64, Vec<f64>) {
    let (mut lo, mut hi) = (lo, hi);
    loop {
        let cells = 1000;
        let h = (hi - lo) / cells as f64;
        let mut found = None;
        let mut prev = excess(params, rc, lo);
        for k in 1..=cells {
            let u = lo + h * k as f64;
            let g = excess(params, rc, u);
            if prev <= 0.0 && g >= 0.0 {
                found = Some((u - h, u));
                break;
            }
            prev = g;
        }
        let (a, b) = found.expect("grid scan found no sign change");
        let u = if excess(params, rc, a).abs() <= excess(params, rc, b).abs() { a } else { b };
        if excess(params, rc, u).abs() < 1e-9 * rc && (b - a) <= 4.0 * f64::EPSILON * u.abs().max(1.0) || b - a == 0.0 {
            return (u, params.iter().map(|p| p.inverse_rate(u).unwrap()).collect());
        }
        if (a, b) == (lo, hi) {
            return (u, params.iter().map(|p| p.inverse_rate(u).unwrap()).collect());
        }
        (lo, hi) = (a, b);
    }
}
