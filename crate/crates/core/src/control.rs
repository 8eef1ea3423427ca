//! Rate-allocation policies: quality-fair coupled PI control and the
//! transmission-rate-fair and utility-max-min-fair baselines.

use serde::{Deserialize, Serialize};

use crate::equilibrium::solve_common_utility;
use crate::error::{Error, Result};
use crate::plant::BITS_PER_KBIT;
use crate::source::SourceParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Encoding loop regulates the buffer level to its reference.
    BufferLevel,
    /// Encoding loop regulates the estimated buffering delay.
    BufferingDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Quality-fair: coupled PI transmission control.
    Qf,
    /// Equal transmission rates.
    Trf,
    /// Utility max-min fair encoding with proportional drain control.
    Ummf,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qf" => Ok(Policy::Qf),
            "trf" => Ok(Policy::Trf),
            "ummf" => Ok(Policy::Ummf),
            other => Err(Error::Config(format!("unknown policy `{other}` (expected qf, trf or ummf)"))),
        }
    }
}

/// PI gains.
///
/// * `kp_t`, `ki_t`: kbit/s per utility unit.
/// * `kp_e`, `ki_e`: kbit in delay mode (a delay error of `d` seconds moves the
///   encoding rate by `K d / T` kbit/s); dimensionless in buffer mode (the
///   buffer error is taken in kbit).
///
/// Under [`Policy::Ummf`] only `kp_t` is used, in kbit/s per kbit of buffer error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub mode: ControlMode,
    pub kp_t: f64,
    pub ki_t: f64,
    pub kp_e: f64,
    pub ki_e: f64,
}

impl ControllerGains {
    /// Delay-mode gains that give good transients in the reference setup.
    pub fn reference_delay() -> Self {
        ControllerGains { mode: ControlMode::BufferingDelay, kp_t: 66.0, ki_t: 2.6, kp_e: 66.0, ki_e: 1.3 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.kp_t, self.ki_t, self.kp_e, self.ki_e].iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gains must be finite".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        ControllerGains { kp_t: self.kp_t * k, ki_t: self.ki_t * k, kp_e: self.kp_e * k, ki_e: self.ki_e * k, ..*self }
    }
}

/// Bounds applied to commanded rates, kbit/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimits {
    pub floor: f64,
    /// Defaults to the channel rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<f64>,
}

impl Default for RateLimits {
    fn default() -> Self {
        RateLimits { floor: 10.0, ceiling: None }
    }
}

impl RateLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor.is_finite() && self.floor >= 0.0) {
            return Err(Error::Config(format!("rate floor must be non-negative, got {}", self.floor)));
        }
        if let Some(c) = self.ceiling {
            if !(c > self.floor) {
                return Err(Error::Config(format!("rate ceiling {c} must exceed the floor {}", self.floor)));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, rate: f64, channel_rate: f64) -> f64 {
        let hi = self.ceiling.unwrap_or(channel_rate).max(self.floor);
        rate.clamp(self.floor, hi)
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Deviations of each utility from the mean, `mean - u_i`.
pub fn utility_discrepancies(udd: &[f64]) -> Vec<f64> {
    if udd.is_empty() {
        return Vec::new();
    }
    let mean = compensated_sum(udd) / udd.len() as f64;
    udd.iter().map(|u| mean - u).collect()
}

/// Scales `raw` so it sums to `total` with every entry at least `floor`.
///
/// Entries below the floor are pinned to it; the rest share the remaining
/// budget in proportion to their raw values.
pub fn allocate_with_floor(raw: &[f64], total: f64, floor: f64) -> Result<Vec<f64>> {
    let n = raw.len();
    if n == 0 {
        return Err(Error::Allocation("no streams".into()));
    }
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::Allocation("non-finite rate request".into()));
    }
    let mut pinned: Vec<bool> = raw.iter().map(|&r| r < floor).collect();
    loop {
        let k = pinned.iter().filter(|&&p| p).count();
        if k == n {
            return Err(Error::Allocation(format!("all {n} streams clamped at the {floor} kbit/s floor")));
        }
        let budget = total - floor * k as f64;
        let free: f64 = raw.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(r, _)| r).sum();
        if !(budget > 0.0) || !(free > 0.0) {
            return Err(Error::Allocation(format!("budget {budget} kbit/s cannot cover the floors")));
        }
        let scale = budget / free;
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && raw[i] * scale < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(raw.iter().zip(&pinned).map(|(&r, &p)| if p { floor } else { r * scale }).collect());
        }
    }
}

/// Quality-fair transmission rates from the delayed utilities and the
/// fairness accumulators. The result sums to `channel_rate`.
pub fn qf_transmission_rates(
    udd: &[f64],
    phi: &[f64],
    channel_rate: f64,
    gains: &ControllerGains,
    limits: &RateLimits,
) -> Result<Vec<f64>> {
    if udd.len() != phi.len() {
        return Err(Error::Allocation(format!("{} utilities but {} accumulators", udd.len(), phi.len())));
    }
    let r0 = channel_rate / udd.len() as f64;
    let raw: Vec<f64> = utility_discrepancies(udd)
        .iter()
        .zip(phi)
        .map(|(d, p)| r0 + (gains.kp_t + gains.ki_t) * d + gains.ki_t * p)
        .collect();
    allocate_with_floor(&raw, channel_rate, limits.floor)
}

/// Advances the fairness accumulators. Held at zero for the first two slots.
pub fn update_phi(phi: &[f64], delta_u: &[f64], age: usize) -> Vec<f64> {
    phi.iter().zip(delta_u).map(|(p, d)| if age <= 2 { 0.0 } else { p + d }).collect()
}

/// Advances one buffer/delay accumulator. Held at zero for the first three slots.
pub fn update_pi_acc(pi_acc: f64, discrepancy: f64, age: usize) -> f64 {
    if age <= 3 {
        0.0
    } else {
        pi_acc + discrepancy
    }
}

/// Encoding-loop error: buffer excess in kbit, or delay excess in seconds.
pub fn encoding_discrepancy(mode: ControlMode, buffer_bits: f64, buffer_reference: f64, delay_estimate: f64, delay_reference: f64) -> f64 {
    match mode {
        ControlMode::BufferLevel => (buffer_bits - buffer_reference) / BITS_PER_KBIT,
        ControlMode::BufferingDelay => delay_estimate - delay_reference,
    }
}

/// PI encoding-rate target (unclamped).
pub fn qf_encoding_rate(discrepancy: f64, pi_acc: f64, r0: f64, gains: &ControllerGains, slot_duration: f64) -> f64 {
    r0 - (gains.kp_e + gains.ki_e) / slot_duration * discrepancy - gains.ki_e / slot_duration * pi_acc
}

/// Equal transmission rates.
pub fn trf_rates(n: usize, channel_rate: f64) -> Vec<f64> {
    vec![channel_rate / n as f64; n]
}

/// Encoding rates that equalize utility across streams and sum to the channel rate.
pub fn ummf_encoding_rates(params: &[SourceParams], channel_rate: f64) -> Result<Vec<f64>> {
    Ok(solve_common_utility(params, channel_rate)?.1)
}

/// Proportional drain control around the buffer reference. `kp_t` is in
/// kbit/s per kbit. The output is floored but not renormalized.
pub fn ummf_transmission_rates(buffer_bits: &[f64], buffer_reference: f64, kp_t: f64, r0: f64, floor: f64) -> Vec<f64> {
    buffer_bits
        .iter()
        .map(|b| (r0 + kp_t * (b - buffer_reference) / BITS_PER_KBIT).max(floor))
        .collect()
}
