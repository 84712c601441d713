//! Seeded simulator for censored federated learning over wireless FDMA
//! uplinks.
//!
//! Each round the parameter server broadcasts a model, every client runs
//! local gradient steps, and a censoring test decides who asks to upload.
//! Scheduled clients then compete for bandwidth under a per-round deadline,
//! transmit over Rayleigh-faded links, and may be lost to outage. The server
//! averages the newest copy it holds from every client.
//!
//! | module | contents |
//! |---|---|
//! | [`fedmath`] | losses, gradients, local updates, smoothness constants, optimum oracle |
//! | [`channel`] | path loss, fading, rate, outage |
//! | [`allocator`] | deadline-tight bandwidth and power allocation |
//! | [`scheduler`] | censoring test and staleness clock |
//! | [`engine`] | the round loop |
//! | [`harness`] | configuration, data synthesis, CSV and convergence checks |
//!
//! ```
//! use cefl::harness::config::SimConfig;
//!
//! let config = SimConfig { rounds: 5, ..SimConfig::default() };
//! let traces = cefl::run_simulation(&config)?;
//! assert_eq!(traces.len(), 5);
//! assert!(traces[4].gap.unwrap() < traces[0].gap_before.unwrap());
//! # Ok::<(), cefl::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod channel;
pub mod engine;
mod error;
pub mod fedmath;
pub mod harness;
pub mod rng;
pub mod scheduler;

pub use engine::{
    run_fedavg_baseline, run_simulation, Algorithm, RoundTrace, Simulation, StaleAggregation,
};
pub use error::{Error, Result};
pub use harness::config::SimConfig;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/convergence.md")]
    mod convergence {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
