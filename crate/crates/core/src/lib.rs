//! Quality-fair multiplexing of rate-controlled video streams over a shared
//! bottleneck.
//!
//! Rates are kbit/s, buffers are bits, one slot is one video unit. The
//! guide under `book/` walks through each module; its code blocks are
//! compiled and run as doctests of this crate.
//!
//! ```
//! use qfmux::control::Policy;
//! use qfmux::presets::log_psnr_spread_set;
//! use qfmux::sim::{run, Scenario};
//! use qfmux::source::ParamNoiseSpec;
//!
//! let sc = Scenario::uniform(&log_psnr_spread_set(), ParamNoiseSpec::frozen(), 4000.0, 100, Policy::Qf);
//! let out = run(&sc)?;
//! assert_eq!(out.slots.len(), 100);
//! # Ok::<(), qfmux::error::Error>(())
//! ```

pub mod config;
pub mod control;
pub mod equilibrium;
pub mod error;
pub mod linalg;
pub mod linearization;
pub mod output;
pub mod plant;
pub mod presets;
pub mod sim;
pub mod source;

// Book chapters, one module each, so `cargo test --doc` runs their snippets.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/source-models.md")]
    mod source_models {}
    #[doc = include_str!("../../../book/src/timing.md")]
    mod timing {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/equilibrium.md")]
    mod equilibrium {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
