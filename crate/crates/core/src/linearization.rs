//! Linearized closed-loop dynamics around an equilibrium, stability
//! classification and a random search for robust gains.
//!
//! The state vector stacks, block by block over the `N` streams:
//! parameter deviations `a`, their one-slot delayed copy `ad`, the fairness
//! accumulators `phi`, the encoding accumulators `pi`, the rate estimate
//! (delay mode only), the once and twice delayed encoding rates, the twice
//! delayed utility and the buffer level. Units follow the simulator: rates in
//! kbit/s, buffers in bits.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlMode, ControllerGains};
use crate::equilibrium::solve_common_utility;
use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, Matrix};
use crate::plant::{PlantConfig, BITS_PER_KBIT};
use crate::source::{ParamNoiseSpec, SourceParams, N_PARAMS};

/// Eigenvalues farther than this from 1 cannot be structural.
pub const STRUCTURAL_GATE: f64 = 1e-6;
/// Stable means every non-structural root has modulus below `1 - STABILITY_TOL`.
pub const STABILITY_TOL: f64 = 1e-9;

/// Offsets of the state blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub n_a: usize,
    pub mode: ControlMode,
}

impl StateLayout {
    pub fn new(n: usize, mode: ControlMode) -> Self {
        StateLayout { n, n_a: N_PARAMS, mode }
    }

    pub fn a(&self) -> usize {
        0
    }
    pub fn ad(&self) -> usize {
        self.n * self.n_a
    }
    pub fn phi(&self) -> usize {
        2 * self.n * self.n_a
    }
    pub fn pi(&self) -> usize {
        self.phi() + self.n
    }
    /// Rate-estimate block, present in delay mode only.
    pub fn rate_estimate(&self) -> Option<usize> {
        match self.mode {
            ControlMode::BufferingDelay => Some(self.pi() + self.n),
            ControlMode::BufferLevel => None,
        }
    }
    pub fn red(&self) -> usize {
        self.pi() + self.n * if self.rate_estimate().is_some() { 2 } else { 1 }
    }
    pub fn redd(&self) -> usize {
        self.red() + self.n
    }
    pub fn udd(&self) -> usize {
        self.redd() + self.n
    }
    pub fn b(&self) -> usize {
        self.udd() + self.n
    }
    pub fn dim(&self) -> usize {
        self.b() + self.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub layout: StateLayout,
    pub a: Matrix,
}

impl LinearModel {
    pub fn n_streams(&self) -> usize {
        self.layout.n
    }

    pub fn state_dim(&self) -> usize {
        self.layout.dim()
    }

    /// Unit roots that carry no stability information: one per parameter
    /// random walk, plus the common mode of the fairness accumulators, whose
    /// sum the coupling leaves unchanged.
    pub fn structural_unit_count(&self) -> usize {
        self.layout.n * self.layout.n_a + 1
    }
}

/// Parameter sensitivities of the utilities, `N x N*n_a`, block diagonal.
pub fn build_xi(params: &[SourceParams], rates: &[f64]) -> Result<Matrix> {
    check_lengths(params, rates)?;
    let n = params.len();
    let mut xi = Matrix::zeros(n, n * N_PARAMS);
    for (i, (p, &r)) in params.iter().zip(rates).enumerate() {
        let g = p.param_gradient(r)?;
        for (k, v) in g.iter().enumerate() {
            xi[(i, i * N_PARAMS + k)] = *v;
        }
    }
    Ok(xi)
}

/// Rate sensitivities of the utilities, diagonal `N x N`.
pub fn build_gamma(params: &[SourceParams], rates: &[f64]) -> Result<Matrix> {
    check_lengths(params, rates)?;
    let d = params.iter().zip(rates).map(|(p, &r)| p.rate_slope(r)).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_diag(&d))
}

fn check_lengths(params: &[SourceParams], rates: &[f64]) -> Result<()> {
    if params.len() != rates.len() || params.is_empty() {
        return Err(Error::Assembly(format!("{} parameter sets but {} rates", params.len(), rates.len())));
    }
    Ok(())
}

/// State matrix of the linearized closed loop under quality-fair control.
pub fn assemble_a(gains: &ControllerGains, params: &[SourceParams], r_eq: &[f64], plant: &PlantConfig) -> Result<LinearModel> {
    check_lengths(params, r_eq)?;
    if r_eq.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Assembly("equilibrium rates must be positive".into()));
    }
    let n = params.len();
    let lay = StateLayout::new(n, gains.mode);
    let na = lay.n_a;
    let c = BITS_PER_KBIT;
    let t = plant.slot_duration;
    let ke = (gains.kp_e + gains.ki_e) / t;
    let kie = gains.ki_e / t;
    let kt = gains.kp_t + gains.ki_t;
    let xi = build_xi(params, r_eq)?;
    let gamma = build_gamma(params, r_eq)?;
    let mut a = Matrix::zeros(lay.dim(), lay.dim());
    let lmat = |i: usize, k: usize| if i == k { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };

    for k in 0..n * na {
        a[(lay.a() + k, lay.a() + k)] = 1.0;
        a[(lay.ad() + k, lay.a() + k)] = 1.0;
    }
    for i in 0..n {
        let v = 1.0 / r_eq[i];
        let (phi, pi, red, redd, udd, b) = (lay.phi() + i, lay.pi() + i, lay.red() + i, lay.redd() + i, lay.udd() + i, lay.b() + i);

        a[(phi, phi)] = 1.0;
        for k in 0..n {
            a[(phi, lay.udd() + k)] = -lmat(i, k);
        }

        a[(pi, pi)] = 1.0;
        a[(red, pi)] = -kie;
        match lay.rate_estimate() {
            Some(rt0) => {
                let rt = rt0 + i;
                a[(pi, rt)] = -plant.delay_reference * v;
                a[(pi, b)] = v / c;
                a[(rt, rt)] = 1.0 - plant.alpha;
                a[(rt, redd)] = plant.alpha;
                a[(red, rt)] = ke * plant.delay_reference * v;
                a[(red, b)] = -ke * v / c;
            }
            None => {
                a[(pi, b)] = 1.0 / c;
                a[(red, b)] = -ke / c;
            }
        }

        a[(redd, red)] = 1.0;

        for k in 0..na {
            a[(udd, lay.ad() + i * na + k)] = xi[(i, i * na + k)];
        }
        a[(udd, red)] = gamma[(i, i)];

        a[(b, b)] = 1.0;
        a[(b, redd)] = c * t;
        a[(b, phi)] = -c * t * gains.ki_t;
        for k in 0..n {
            a[(b, lay.udd() + k)] = c * t * kt * lmat(i, k);
        }
    }
    Ok(LinearModel { layout: lay, a })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub state_dim: usize,
    pub eigenvalues: Vec<(f64, f64)>,
    /// Marks the eigenvalues removed as structural unit roots.
    pub structural: Vec<bool>,
    pub structural_unit_count: usize,
    pub spectral_radius_excl: f64,
    pub margin: f64,
    pub stable: bool,
}

/// Removes the structural unit roots and judges the rest against the unit circle.
pub fn classify_stability(model: &LinearModel, eigs: &[Complex64]) -> Result<StabilityReport> {
    let dim = model.state_dim();
    if eigs.len() != dim {
        return Err(Error::Assembly(format!("{} eigenvalues for a {dim}-dimensional model", eigs.len())));
    }
    let s = model.structural_unit_count();
    let mut order: Vec<usize> = (0..dim).collect();
    let dist = |i: usize| (eigs[i] - 1.0).norm();
    order.sort_by(|&x, &y| dist(x).total_cmp(&dist(y)));
    let mut structural = vec![false; dim];
    for &i in &order[..s] {
        if dist(i) > STRUCTURAL_GATE {
            return Err(Error::Assembly(format!(
                "expected {s} structural unit roots, eigenvalue {} is {:.3e} away from 1",
                eigs[i],
                dist(i)
            )));
        }
        structural[i] = true;
    }
    let radius = (0..dim).filter(|&i| !structural[i]).map(|i| eigs[i].norm()).fold(0.0, f64::max);
    Ok(StabilityReport {
        state_dim: dim,
        eigenvalues: eigs.iter().map(|z| (z.re, z.im)).collect(),
        structural,
        structural_unit_count: s,
        spectral_radius_excl: radius,
        margin: 1.0 - radius,
        stable: radius < 1.0 - STABILITY_TOL,
    })
}

/// Eigen-decomposition and classification in one call.
pub fn analyze(model: &LinearModel) -> Result<StabilityReport> {
    classify_stability(model, &eigenvalues(&model.a)?)
}

// Orthonormal basis of the complement of the structural roots:
// zero parameter deviation and zero-sum fairness accumulators.
fn reduced_basis(lay: &StateLayout) -> Matrix {
    let dim = lay.dim();
    let n = lay.n;
    let keep: Vec<usize> = (lay.ad()..dim).filter(|&k| k < lay.phi() || k >= lay.pi()).collect();
    let cols = keep.len() + n - 1;
    let mut q = Matrix::zeros(dim, cols);
    for (c, &k) in keep.iter().enumerate() {
        q[(k, c)] = 1.0;
    }
    for m in 1..n {
        let norm = ((m * (m + 1)) as f64).sqrt();
        let c = keep.len() + m - 1;
        for i in 0..m {
            q[(lay.phi() + i, c)] = 1.0 / norm;
        }
        q[(lay.phi() + m, c)] = -(m as f64) / norm;
    }
    q
}

/// Independent stability check by propagating free responses.
///
/// Starts from random unit vectors in the invariant subspace that excludes
/// the structural roots and evaluates `|A^j x|` at doubling horizons up to
/// `horizon` by repeated squaring. Returns true when the log-norm has a
/// negative least-squares slope over the last four doublings for every trial.
pub fn decay_oracle<R: Rng + ?Sized>(model: &LinearModel, trials: usize, horizon: usize, rng: &mut R) -> bool {
    let q = reduced_basis(&model.layout);
    let reduced = q.transpose().matmul(&model.a).matmul(&q);
    decay_test(&reduced, trials, horizon, rng)
}

/// Free-response contraction test on an arbitrary square matrix.
pub fn decay_test<R: Rng + ?Sized>(a: &Matrix, trials: usize, horizon: usize, rng: &mut R) -> bool {
    let d = a.rows();
    if d == 0 {
        return true;
    }
    let levels = (horizon.max(16) as f64).log2().ceil() as usize;
    // powers[k] = A^(2^k) / exp(log_scale[k])
    let mut powers = Vec::with_capacity(levels + 1);
    let mut log_scale = Vec::with_capacity(levels + 1);
    let mut p = a.clone();
    let mut s = 0.0;
    for _ in 0..=levels {
        let m = p.max_abs();
        if m == 0.0 || !m.is_finite() {
            if m == 0.0 {
                // Nilpotent: every response vanishes.
                powers.push(p.clone());
                log_scale.push(f64::NEG_INFINITY);
                break;
            }
            return false;
        }
        p.scale(1.0 / m);
        s += m.ln();
        powers.push(p.clone());
        log_scale.push(s);
        p = p.matmul(&p);
        s *= 2.0;
    }
    if log_scale.last() == Some(&f64::NEG_INFINITY) {
        return true;
    }
    let first = levels.saturating_sub(4);
    for _ in 0..trials {
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= nx);
        let pts: Vec<(f64, f64)> = (first..=levels)
            .map(|k| {
                let y = powers[k].mul_vec(&x);
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                ((1u64 << k) as f64, ny.ln() + log_scale[k])
            })
            .collect();
        if pts.iter().any(|(_, y)| *y == f64::NEG_INFINITY) {
            continue;
        }
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if !(sxy / sxx < -1e-8) {
            return false;
        }
    }
    true
}

/// Log-uniform search ranges, `(low, high)` per gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainRanges {
    pub kp_t: (f64, f64),
    pub ki_t: (f64, f64),
    pub kp_e: (f64, f64),
    pub ki_e: (f64, f64),
}

impl GainRanges {
    pub fn for_mode(mode: ControlMode) -> Self {
        match mode {
            ControlMode::BufferingDelay => GainRanges { kp_t: (1.0, 1e3), ki_t: (0.1, 1e2), kp_e: (1.0, 1e3), ki_e: (0.01, 1e2) },
            ControlMode::BufferLevel => GainRanges { kp_t: (1.0, 1e3), ki_t: (0.1, 1e2), kp_e: (1e-3, 1.0), ki_e: (1e-4, 0.1) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("kp_t", self.kp_t), ("ki_t", self.ki_t), ("kp_e", self.kp_e), ("ki_e", self.ki_e)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("gain range {name} must satisfy 0 < low <= high, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, mode: ControlMode, rng: &mut R) -> ControllerGains {
        let mut draw = |(lo, hi): (f64, f64)| {
            let u: f64 = rng.random();
            (lo.ln() + u * (hi.ln() - lo.ln())).exp()
        };
        ControllerGains { mode, kp_t: draw(self.kp_t), ki_t: draw(self.ki_t), kp_e: draw(self.kp_e), ki_e: draw(self.ki_e) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub mode: ControlMode,
    pub n_streams: usize,
    pub realizations: usize,
    pub budget: usize,
    /// Characteristic sets are drawn around the mean of these parameters.
    pub base_params: Vec<SourceParams>,
    pub noise: ParamNoiseSpec,
    pub channel_rate: f64,
    pub plant: PlantConfig,
    pub ranges: GainRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub gains: ControllerGains,
    pub min_margin: f64,
    pub margins: Vec<f64>,
    pub realizations: Vec<Vec<SourceParams>>,
    pub candidates: usize,
    pub stable_candidates: usize,
}

/// Draws `k` random characteristic sets of `n` streams around the mean of `base`.
pub fn draw_characteristics<R: Rng + ?Sized>(
    base: &[SourceParams],
    noise: &ParamNoiseSpec,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<SourceParams>>> {
    let first = base.first().ok_or_else(|| Error::Config("no base parameters".into()))?;
    let m1 = base.iter().map(|p| p.a1).sum::<f64>() / base.len() as f64;
    let m2 = base.iter().map(|p| p.a2).sum::<f64>() / base.len() as f64;
    let (s1, s2) = (noise.sigma1_sq.sqrt(), noise.sigma2_sq.sqrt());
    (0..k)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    SourceParams::new(
                        first.model,
                        (m1 + s1 * z1).clamp(noise.a1_bounds.0, noise.a1_bounds.1),
                        (m2 + s2 * z2).clamp(noise.a2_bounds.0, noise.a2_bounds.1),
                    )
                })
                .collect()
        })
        .collect()
}

/// Smallest margin over the given equilibria, or `None` if any is unstable.
pub fn worst_margin(gains: &ControllerGains, sets: &[(Vec<SourceParams>, Vec<f64>)], plant: &PlantConfig) -> Option<f64> {
    let mut worst = f64::INFINITY;
    for (params, rates) in sets {
        let rep = assemble_a(gains, params, rates, plant).and_then(|m| analyze(&m)).ok()?;
        if !rep.stable {
            return None;
        }
        worst = worst.min(rep.margin);
    }
    Some(worst)
}

/// Random search for gains that stabilize every drawn characteristic set,
/// maximizing the worst-case margin.
pub fn tune_gains<R: Rng + ?Sized>(cfg: &TuneConfig, rng: &mut R) -> Result<TuneReport> {
    if cfg.budget == 0 {
        return Err(Error::Tuning("search budget is zero".into()));
    }
    if cfg.n_streams == 0 || cfg.realizations == 0 {
        return Err(Error::Tuning("need at least one stream and one realization".into()));
    }
    cfg.ranges.validate()?;
    let realizations = draw_characteristics(&cfg.base_params, &cfg.noise, cfg.n_streams, cfg.realizations, rng)?;
    let sets = realizations
        .iter()
        .map(|p| Ok((p.clone(), solve_common_utility(p, cfg.channel_rate)?.1)))
        .collect::<Result<Vec<_>>>()?;
    let seed: u64 = rng.random();
    let mut crng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<ControllerGains> = (0..cfg.budget).map(|_| cfg.ranges.sample(cfg.mode, &mut crng)).collect();
    let scores: Vec<Option<f64>> = candidates.par_iter().map(|g| worst_margin(g, &sets, &cfg.plant)).collect();
    let stable = scores.iter().filter(|s| s.is_some()).count();
    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|m| (i, m)))
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((i, m)),
        });
    let Some((idx, min_margin)) = best else {
        return Err(Error::Tuning(format!(
            "none of {} candidates stabilizes all {} realizations",
            cfg.budget, cfg.realizations
        )));
    };
    let gains = candidates[idx];
    let margins = sets
        .iter()
        .map(|(p, r)| Ok(analyze(&assemble_a(&gains, p, r, &cfg.plant)?)?.margin))
        .collect::<Result<Vec<_>>>()?;
    Ok(TuneReport { gains, min_margin, margins, realizations, candidates: cfg.budget, stable_candidates: stable })
}
