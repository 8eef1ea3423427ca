//! Closed-loop equilibrium: the common utility at which the streams' rates
//! exhaust the channel, and the buffer and accumulator values that hold it.

use serde::{Deserialize, Serialize};

use crate::control::{ControlMode, ControllerGains, RateLimits};
use crate::error::{Error, Result};
use crate::plant::{PlantConfig, BITS_PER_KBIT};
use crate::source::{ModelFamily, SourceParams};

const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub mode: ControlMode,
    pub channel_rate: f64,
    pub u_eq: f64,
    /// Encoding (= transmission) rates, kbit/s.
    pub r_eq: Vec<f64>,
    /// Buffer levels, bits.
    pub b_eq: Vec<f64>,
    pub pi_eq: Vec<f64>,
    pub phi_eq: Vec<f64>,
}

impl EquilibriumPoint {
    pub fn n_streams(&self) -> usize {
        self.r_eq.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub diagnostic: String,
    /// Smallest utility ceiling among bounded models.
    pub utility_cap: Option<f64>,
}

// Inverse extended to all utilities: zero below the atan domain, infinite at or above its ceiling.
fn extended_inverse(p: &SourceParams, u: f64) -> f64 {
    match p.model {
        ModelFamily::LogPsnr => (u / p.a1).exp() / p.a2,
        ModelFamily::AtanSsim => {
            let cap = p.a1 * std::f64::consts::FRAC_PI_2;
            if u <= 0.0 {
                0.0
            } else if u >= cap {
                f64::INFINITY
            } else {
                (u / p.a1).tan() / p.a2
            }
        }
    }
}

fn residual(params: &[SourceParams], channel_rate: f64, u: f64) -> f64 {
    params.iter().map(|p| extended_inverse(p, u)).sum::<f64>() - channel_rate
}

fn utility_cap(params: &[SourceParams]) -> Option<f64> {
    params.iter().filter_map(|p| p.utility_ceiling()).reduce(f64::min)
}

fn check_inputs(params: &[SourceParams], channel_rate: f64) -> Result<()> {
    if params.is_empty() {
        return Err(Error::Infeasible("no streams".into()));
    }
    if !(channel_rate.is_finite() && channel_rate > 0.0) {
        return Err(Error::Infeasible(format!("channel rate {channel_rate} must be positive")));
    }
    for p in params {
        p.validate()?;
    }
    Ok(())
}

// Grows a bracket [lo, hi] with residual(lo) < 0 <= residual(hi).
fn bracket(params: &[SourceParams], channel_rate: f64) -> Result<(f64, f64)> {
    let r0 = channel_rate / params.len() as f64;
    let u0 = params.iter().map(|p| p.utility(r0)).sum::<Result<f64>>()? / params.len() as f64;
    let scale = params.iter().map(|p| p.a1).fold(0.0, f64::max);
    let mut step = 0.1 * scale;
    let g0 = residual(params, channel_rate, u0);
    if g0 == 0.0 {
        return Ok((u0, u0));
    }
    let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
    let mut near = u0;
    for _ in 0..MAX_DOUBLINGS {
        let far = u0 + dir * step;
        let g = residual(params, channel_rate, far);
        if (g >= 0.0) == (dir > 0.0) {
            return Ok(if dir > 0.0 { (near, far) } else { (far, near) });
        }
        near = far;
        step *= 2.0;
    }
    Err(Error::Infeasible(format!(
        "no utility level balances the channel rate {channel_rate} kbit/s after {MAX_DOUBLINGS} bracket doublings"
    )))
}

/// Whether a common utility exists whose rates sum to `channel_rate`.
pub fn check_feasibility(params: &[SourceParams], channel_rate: f64) -> Feasibility {
    let cap = utility_cap(params);
    let fail = |diagnostic: String| Feasibility { feasible: false, diagnostic, utility_cap: cap };
    if let Err(e) = check_inputs(params, channel_rate) {
        return fail(e.to_string());
    }
    if params.iter().all(|p| p.model == ModelFamily::AtanSsim) {
        let c = cap.unwrap_or(f64::INFINITY);
        // Largest representable utility strictly below the lowest ceiling.
        let mut top = c;
        for _ in 0..4 {
            top = f64::from_bits(top.to_bits() - 1);
        }
        let reach = residual(params, channel_rate, top) + channel_rate;
        if !(reach > channel_rate) {
            return fail(format!(
                "rates stay below {reach:.6e} kbit/s as utility approaches the ceiling {c:.12}; channel rate {channel_rate} unreachable"
            ));
        }
    }
    match bracket(params, channel_rate) {
        Ok(_) => Feasibility { feasible: true, diagnostic: "ok".into(), utility_cap: cap },
        Err(e) => fail(e.to_string()),
    }
}

/// Common utility and the per-stream rates that sum to `channel_rate`.
///
/// Bisection on the utility down to floating-point resolution; the residual
/// must end below `1e-9 * channel_rate`.
pub fn solve_common_utility(params: &[SourceParams], channel_rate: f64) -> Result<(f64, Vec<f64>)> {
    check_inputs(params, channel_rate)?;
    let f = check_feasibility(params, channel_rate);
    if !f.feasible {
        return Err(Error::Infeasible(f.diagnostic));
    }
    let (mut lo, mut hi) = bracket(params, channel_rate)?;
    let mut best = (lo, residual(params, channel_rate, lo));
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = residual(params, channel_rate, mid);
        if g.abs() < best.1.abs() {
            best = (mid, g);
        }
        if g == 0.0 {
            break;
        } else if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ghi = residual(params, channel_rate, hi);
    if ghi.abs() < best.1.abs() {
        best = (hi, ghi);
    }
    let (u, g) = best;
    if !(g.abs() < 1e-9 * channel_rate) {
        return Err(Error::Solver(format!("bisection stalled at U={u} with residual {g} kbit/s")));
    }
    let rates = params.iter().map(|p| extended_inverse(p, u)).collect();
    Ok((u, rates))
}

/// Full equilibrium including buffer levels and PI accumulator values.
pub fn solve_equilibrium(
    params: &[SourceParams],
    channel_rate: f64,
    gains: &ControllerGains,
    plant: &PlantConfig,
    limits: &RateLimits,
) -> Result<EquilibriumPoint> {
    let n = params.len();
    if !(channel_rate > n as f64 * limits.floor) {
        return Err(Error::Infeasible(format!(
            "channel rate {channel_rate} kbit/s does not cover {n} streams at the {} kbit/s floor",
            limits.floor
        )));
    }
    if gains.ki_t == 0.0 || gains.ki_e == 0.0 {
        return Err(Error::Undefined("integral gains must be nonzero for the accumulators to be defined".into()));
    }
    let (u_eq, r_eq) = solve_common_utility(params, channel_rate)?;
    let r0 = channel_rate / n as f64;
    let b_eq = r_eq
        .iter()
        .map(|r| match gains.mode {
            ControlMode::BufferingDelay => plant.delay_reference * r * BITS_PER_KBIT,
            ControlMode::BufferLevel => plant.buffer_reference,
        })
        .collect();
    let pi_eq = r_eq.iter().map(|r| (r0 - r) * plant.slot_duration / gains.ki_e).collect();
    let phi_eq = r_eq.iter().map(|r| (r - r0) / gains.ki_t).collect();
    Ok(EquilibriumPoint { mode: gains.mode, channel_rate, u_eq, r_eq, b_eq, pi_eq, phi_eq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lp(a1: f64, a2: f64) -> SourceParams {
        SourceParams::log_psnr(a1, a2).unwrap()
    }

    #[test]
    fn identical_streams_split_evenly() {
        let p = vec![lp(1.3, 0.2); 5];
        let (u, r) = solve_common_utility(&p, 4000.0).unwrap();
        assert_relative_eq!(u, p[0].utility(800.0).unwrap(), max_relative = 1e-12);
        for x in r {
            assert_relative_eq!(x, 800.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn two_stream_closed_form() {
        let p = [lp(1.0, 0.15), lp(1.0, 0.30)];
        let (u, r) = solve_common_utility(&p, 3000.0).unwrap();
        assert_relative_eq!(r[0], 2000.0, max_relative = 1e-12);
        assert_relative_eq!(r[1], 1000.0, max_relative = 1e-12);
        assert_relative_eq!(u, 300f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn accumulators_and_buffers() {
        let p = [lp(1.0, 0.15), lp(1.0, 0.30)];
        let plant = PlantConfig::default();
        let g = ControllerGains::reference_delay();
        let eq = solve_equilibrium(&p, 3000.0, &g, &plant, &RateLimits::default()).unwrap();
        assert_relative_eq!(eq.b_eq[0], 1.5 * 2000.0 * 1000.0, max_relative = 1e-12);
        assert_relative_eq!(eq.phi_eq[0], 500.0 / 2.6, max_relative = 1e-12);
        assert_relative_eq!(eq.pi_eq[1], 500.0 / 3.0 / 1.3, max_relative = 1e-12);
        assert!(eq.phi_eq.iter().sum::<f64>().abs() < 1e-9);
        let zero = ControllerGains { ki_t: 0.0, ..g };
        assert!(matches!(solve_equilibrium(&p, 3000.0, &zero, &plant, &RateLimits::default()), Err(Error::Undefined(_))));
        let b = ControllerGains { mode: ControlMode::BufferLevel, ..g };
        let eqb = solve_equilibrium(&p, 3000.0, &b, &plant, &RateLimits::default()).unwrap();
        assert_eq!(eqb.b_eq, vec![plant.buffer_reference; 2]);
    }

    #[test]
    fn floor_precondition() {
        let p = vec![lp(1.0, 0.1); 4];
        let r = solve_equilibrium(&p, 30.0, &ControllerGains::reference_delay(), &PlantConfig::default(), &RateLimits::default());
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn atan_feasibility() {
        let p = SourceParams::atan_ssim(0.64, 0.037).unwrap();
        let f = check_feasibility(&[p], 1e-6);
        assert!(f.feasible);
        assert_relative_eq!(f.utility_cap.unwrap(), 0.64 * std::f64::consts::FRAC_PI_2);
        let (u, r) = solve_common_utility(&[p], 4000.0).unwrap();
        assert!(u < f.utility_cap.unwrap());
        assert_relative_eq!(r[0], 4000.0, max_relative = 1e-9);
        // Ceiling reached before the channel can be used up.
        let q = SourceParams::atan_ssim(0.64, 1e14).unwrap();
        let f = check_feasibility(&[q, q], 4000.0);
        assert!(!f.feasible, "{f:?}");
        assert!(matches!(solve_common_utility(&[q, q], 4000.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn log_always_feasible() {
        assert!(check_feasibility(&[lp(0.07, 0.2), lp(2.5, 0.17)], 4000.0).feasible);
        assert!(check_feasibility(&[lp(0.07, 0.2)], 1e9).feasible);
    }

    #[test]
    fn mixed_families() {
        let p = [lp(1.1, 0.15), SourceParams::atan_ssim(0.64, 0.037).unwrap()];
        let (u, r) = solve_common_utility(&p, 4000.0).unwrap();
        assert_relative_eq!(r[0] + r[1], 4000.0, max_relative = 1e-9);
        assert!((p[0].utility(r[0]).unwrap() - u).abs() < 1e-9);
        assert!((p[1].utility(r[1]).unwrap() - u).abs() < 1e-9);
    }

    fn any_set() -> impl Strategy<Value = Vec<SourceParams>> {
        (proptest::collection::vec((0.05f64..3.0, -2.5f64..0.0), 1..8), any::<bool>()).prop_map(|(v, atan)| {
            v.into_iter()
                .map(|(a1, l2)| {
                    if atan {
                        SourceParams::atan_ssim(a1, 10f64.powf(l2)).unwrap()
                    } else {
                        SourceParams::log_psnr(a1, 10f64.powf(l2)).unwrap()
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn equilibrium_is_fair_and_exhausts_channel(p in any_set(), rc in 100.0f64..20000.0) {
            let (u, r) = solve_common_utility(&p, rc).unwrap();
            prop_assert!((r.iter().sum::<f64>() - rc).abs() < 1e-9 * rc);
            for (pi, ri) in p.iter().zip(&r) {
                prop_assert!((pi.utility(*ri).unwrap() - u).abs() < 1e-9);
            }
        }

        #[test]
        fn residual_is_monotone(p in any_set(), u in -5.0f64..5.0, du in 1e-6f64..1.0) {
            let a = residual(&p, 1000.0, u);
            let b = residual(&p, 1000.0, u + du);
            prop_assert!(b >= a);
        }
    }
}
