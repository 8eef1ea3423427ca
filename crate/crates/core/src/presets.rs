//! Reference source characteristics for six test programs.

use crate::source::{ModelFamily, SourceParams};

const LOG_PSNR: [(f64, f64); 6] = [(1.11, 0.15), (1.90, 0.17), (0.76, 0.17), (0.09, 0.24), (2.50, 0.17), (0.07, 0.20)];
const LOG_PSNR_SPREAD: [(f64, f64); 6] = [(0.75, 0.21), (0.88, 0.20), (1.01, 0.19), (1.13, 0.18), (1.26, 0.17), (1.39, 0.16)];
const ATAN_SSIM: [(f64, f64); 6] = [(0.64, 0.037), (0.61, 0.029), (0.64, 0.034), (0.62, 0.017), (0.64, 0.22), (0.64, 0.044)];

fn build(model: ModelFamily, table: &[(f64, f64)]) -> Vec<SourceParams> {
    table.iter().map(|&(a1, a2)| SourceParams { model, a1, a2 }).collect()
}

/// Six log-PSNR characteristics.
pub fn log_psnr_set() -> Vec<SourceParams> {
    build(ModelFamily::LogPsnr, &LOG_PSNR)
}

/// Six log-PSNR characteristics spread around the mean of [`log_psnr_set`].
///
/// Unlike the raw set, every stream keeps a rate well above the floor at
/// 4000 kbit/s and the reference delay-mode gains are stable here.
pub fn log_psnr_spread_set() -> Vec<SourceParams> {
    build(ModelFamily::LogPsnr, &LOG_PSNR_SPREAD)
}

/// Six arctan-SSIM characteristics.
pub fn atan_ssim_set() -> Vec<SourceParams> {
    build(ModelFamily::AtanSsim, &ATAN_SSIM)
}

/// Component-wise mean of a parameter set, same family as its first member.
pub fn mean_params(set: &[SourceParams]) -> SourceParams {
    let n = set.len() as f64;
    SourceParams {
        model: set[0].model,
        a1: set.iter().map(|p| p.a1).sum::<f64>() / n,
        a2: set.iter().map(|p| p.a2).sum::<f64>() / n,
    }
}
