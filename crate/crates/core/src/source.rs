//! Parametric rate-utility models.
//!
//! Rates are in kbit/s. A model maps an encoding rate to a scalar utility
//! (PSNR-like for [`ModelFamily::LogPsnr`], SSIM-like for
//! [`ModelFamily::AtanSsim`]) and is strictly increasing in the rate.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of parameters per model.
pub const N_PARAMS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// `U = a1 * ln(a2 * R)`
    LogPsnr,
    /// `U = a1 * atan(a2 * R)`
    AtanSsim,
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_psnr" | "log-psnr" | "psnr" => Ok(ModelFamily::LogPsnr),
            "atan_ssim" | "atan-ssim" | "ssim" => Ok(ModelFamily::AtanSsim),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

/// Rate-utility parameters of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub model: ModelFamily,
    pub a1: f64,
    pub a2: f64,
}

impl SourceParams {
    pub fn new(model: ModelFamily, a1: f64, a2: f64) -> Result<Self> {
        let p = SourceParams { model, a1, a2 };
        p.validate()?;
        Ok(p)
    }

    pub fn log_psnr(a1: f64, a2: f64) -> Result<Self> {
        Self::new(ModelFamily::LogPsnr, a1, a2)
    }

    pub fn atan_ssim(a1: f64, a2: f64) -> Result<Self> {
        Self::new(ModelFamily::AtanSsim, a1, a2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a1.is_finite() && self.a1 > 0.0 && self.a2.is_finite() && self.a2 > 0.0) {
            return Err(Error::Domain(format!(
                "model parameters must be finite and positive, got a1={}, a2={}",
                self.a1, self.a2
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; N_PARAMS] {
        [self.a1, self.a2]
    }

    /// Least upper bound of the utility, if finite.
    pub fn utility_ceiling(&self) -> Option<f64> {
        match self.model {
            ModelFamily::LogPsnr => None,
            ModelFamily::AtanSsim => Some(self.a1 * FRAC_PI_2),
        }
    }

    fn check_rate(&self, rate: f64, allow_zero: bool) -> Result<()> {
        let ok = rate.is_finite() && (rate > 0.0 || (allow_zero && rate == 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("rate {rate} kbit/s outside the model domain")))
        }
    }

    /// Utility of a unit encoded at `rate` kbit/s.
    pub fn utility(&self, rate: f64) -> Result<f64> {
        match self.model {
            ModelFamily::LogPsnr => {
                self.check_rate(rate, false)?;
                Ok(self.a1 * (self.a2 * rate).ln())
            }
            ModelFamily::AtanSsim => {
                self.check_rate(rate, true)?;
                Ok(self.a1 * (self.a2 * rate).atan())
            }
        }
    }

    /// Rate at which the model reaches `utility`.
    pub fn inverse_rate(&self, utility: f64) -> Result<f64> {
        if !utility.is_finite() {
            return Err(Error::Range(format!("utility {utility} is not finite")));
        }
        let rate = match self.model {
            ModelFamily::LogPsnr => (utility / self.a1).exp() / self.a2,
            ModelFamily::AtanSsim => {
                let cap = self.a1 * FRAC_PI_2;
                if utility < 0.0 || utility >= cap {
                    return Err(Error::Range(format!(
                        "utility {utility} outside [0, {cap}) for atan model"
                    )));
                }
                (utility / self.a1).tan() / self.a2
            }
        };
        if rate.is_finite() {
            Ok(rate)
        } else {
            Err(Error::Range(format!("utility {utility} maps to a non-finite rate")))
        }
    }

    /// Sensitivity of the utility to the rate, `df/dR`.
    pub fn rate_slope(&self, rate: f64) -> Result<f64> {
        match self.model {
            ModelFamily::LogPsnr => {
                self.check_rate(rate, false)?;
                Ok(self.a1 / rate)
            }
            ModelFamily::AtanSsim => {
                self.check_rate(rate, true)?;
                let x = self.a2 * rate;
                Ok(self.a1 * self.a2 / (1.0 + x * x))
            }
        }
    }

    /// Sensitivity of the utility to the parameters, `(df/da1, df/da2)`.
    pub fn param_gradient(&self, rate: f64) -> Result<[f64; N_PARAMS]> {
        match self.model {
            ModelFamily::LogPsnr => {
                self.check_rate(rate, false)?;
                Ok([(self.a2 * rate).ln(), self.a1 / self.a2])
            }
            ModelFamily::AtanSsim => {
                self.check_rate(rate, true)?;
                let x = self.a2 * rate;
                Ok([x.atan(), self.a1 * rate / (1.0 + x * x)])
            }
        }
    }
}

/// One encoding trial: a rate and the utility it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateUtilitySample {
    pub rate: f64,
    pub utility: f64,
}

/// Options for [`fit_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Search interval for `a2` in the atan fit.
    pub a2_bracket: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { a2_bracket: (1e-6, 10.0) }
    }
}

/// Fits model parameters to rate-utility samples by least squares.
pub fn fit_model(family: ModelFamily, samples: &[RateUtilitySample], opts: &FitOptions) -> Result<SourceParams> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 samples, got {}", samples.len())));
    }
    if let Some(s) = samples.iter().find(|s| !(s.rate.is_finite() && s.rate > 0.0 && s.utility.is_finite())) {
        return Err(Error::Fit(format!("invalid sample (rate={}, utility={})", s.rate, s.utility)));
    }
    let r0 = samples[0].rate;
    if samples.iter().all(|s| s.rate == r0) {
        return Err(Error::Fit("all samples share the same rate".into()));
    }
    let p = match family {
        ModelFamily::LogPsnr => fit_log(samples)?,
        ModelFamily::AtanSsim => fit_atan(samples, opts)?,
    };
    if !(p.a1 > 0.0 && p.a2 > 0.0 && p.a1.is_finite() && p.a2.is_finite()) {
        return Err(Error::Fit(format!("fitted parameters not positive: a1={}, a2={}", p.a1, p.a2)));
    }
    Ok(p)
}

fn fit_log(samples: &[RateUtilitySample]) -> Result<SourceParams> {
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.rate.ln()).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.utility).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in samples {
        let dx = s.rate.ln() - mx;
        sxx += dx * dx;
        sxy += dx * (s.utility - my);
    }
    let a1 = sxy / sxx;
    if !(a1 > 0.0) {
        return Err(Error::Fit(format!("fitted slope a1={a1} is not positive")));
    }
    let c = my - a1 * mx;
    Ok(SourceParams { model: ModelFamily::LogPsnr, a1, a2: (c / a1).exp() })
}

// Optimal a1 for a fixed a2 (regression through the origin) and the residual.
fn atan_profile(samples: &[RateUtilitySample], a2: f64) -> (f64, f64) {
    let (mut sgg, mut sgu) = (0.0, 0.0);
    for s in samples {
        let g = (a2 * s.rate).atan();
        sgg += g * g;
        sgu += g * s.utility;
    }
    let a1 = sgu / sgg;
    let sse = samples
        .iter()
        .map(|s| {
            let e = s.utility - a1 * (a2 * s.rate).atan();
            e * e
        })
        .sum();
    (a1, sse)
}

fn fit_atan(samples: &[RateUtilitySample], opts: &FitOptions) -> Result<SourceParams> {
    let (lo, hi) = opts.a2_bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Fit(format!("invalid a2 bracket ({lo}, {hi})")));
    }
    // Coarse log-spaced scan to land in the right basin, then golden section in ln(a2).
    const GRID: usize = 64;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / GRID as f64;
    let mut best = 0;
    let mut best_sse = f64::INFINITY;
    for k in 0..=GRID {
        let sse = atan_profile(samples, (llo + step * k as f64).exp()).1;
        if sse < best_sse {
            best_sse = sse;
            best = k;
        }
    }
    let mut a = llo + step * best.saturating_sub(1) as f64;
    let mut b = (llo + step * (best + 1) as f64).min(lhi);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = atan_profile(samples, c.exp()).1;
    let mut fd = atan_profile(samples, d.exp()).1;
    for _ in 0..500 {
        if b.exp() - a.exp() < 1e-8 * (0.5 * (a + b)).exp() {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = atan_profile(samples, c.exp()).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = atan_profile(samples, d.exp()).1;
        }
    }
    let a2 = (0.5 * (a + b)).exp();
    let (a1, _) = atan_profile(samples, a2);
    Ok(SourceParams { model: ModelFamily::AtanSsim, a1, a2 })
}

/// Squared correlation between observed and predicted values.
pub fn correlation_r2(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() || observed.len() < 2 {
        return Err(Error::Undefined(format!(
            "need two equal-length lists of at least 2 values, got {} and {}",
            observed.len(),
            predicted.len()
        )));
    }
    let n = observed.len() as f64;
    let mx = observed.iter().sum::<f64>() / n;
    let my = predicted.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in observed.iter().zip(predicted) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    Ok((sxy * sxy / (sxx * syy)).min(1.0))
}

/// Random-walk increments for the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamNoiseSpec {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub a1_bounds: (f64, f64),
    pub a2_bounds: (f64, f64),
}

impl ParamNoiseSpec {
    pub fn frozen() -> Self {
        ParamNoiseSpec { sigma1_sq: 0.0, sigma2_sq: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let var_ok = |v: f64| v.is_finite() && v >= 0.0;
        let box_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi;
        if !var_ok(self.sigma1_sq) || !var_ok(self.sigma2_sq) {
            return Err(Error::Config("noise variances must be finite and non-negative".into()));
        }
        if !box_ok(self.a1_bounds) || !box_ok(self.a2_bounds) {
            return Err(Error::Config("clamp bounds must be positive with min < max".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.sigma1_sq == 0.0 && self.sigma2_sq == 0.0
    }
}

impl Default for ParamNoiseSpec {
    fn default() -> Self {
        ParamNoiseSpec {
            sigma1_sq: 6.25e-2,
            sigma2_sq: 2.25e-4,
            a1_bounds: (0.01, 10.0),
            a2_bounds: (0.001, 1.0),
        }
    }
}

/// Advances parameters by one random-walk step and clamps them to the box.
pub fn step_params<R: Rng + ?Sized>(p: &SourceParams, noise: &ParamNoiseSpec, rng: &mut R) -> SourceParams {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    SourceParams {
        model: p.model,
        a1: (p.a1 + noise.sigma1_sq.sqrt() * z1).clamp(noise.a1_bounds.0, noise.a1_bounds.1),
        a2: (p.a2 + noise.sigma2_sq.sqrt() * z2).clamp(noise.a2_bounds.0, noise.a2_bounds.1),
    }
}
