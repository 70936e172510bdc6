//! Compiler and analog-chain simulator for time-division-multiplexed (TDM)
//! electrode voltage control.
//!
//! One DAC behind a cryogenic demultiplexer can hold N electrode voltages on
//! per-output capacitors, refreshing each in its own time slot. This crate
//! compiles per-electrode voltage programs into the DAC sample stream and
//! select-line sequence that drive such a chain, simulates the analog path
//! (switch RC charging, reservoir charge sharing, droop, charge injection,
//! crosstalk), and computes the figures of merit that decide whether every
//! electrode reaches and holds its target.
//!
//! The crate is organized along the signal path:
//!
//! - [`model`] — hardware description, validation, timing derivation
//! - [`waveforms`] — target generation and zero-order-hold references
//! - [`scheduler`] — frame compilation, select words, timing checks
//! - [`simulator`] — RC-network replay of compiled frames
//! - [`metrics`] — rates, settling, droop, crosstalk, resource counts
//! - [`io`] — config/program ingestion and CSV/binary export
//!
//! ```
//! use tdmux::model::{validate_config, SystemConfig};
//! use tdmux::scheduler::{compile_static_frame, effective_update_rate, VoltageProgram};
//!
//! let cfg = validate_config(SystemConfig::reference_static_32ch())?;
//! let programs: Vec<VoltageProgram> = (0..32)
//!     .map(|ch| VoltageProgram::dc(ch, -10.0 + 20.0 * ch as f64 / 31.0))
//!     .collect();
//! let frame = compile_static_frame(&cfg, &programs)?;
//!
//! // The two-step charging sequence spends 5 slots per 4 channels.
//! assert_eq!(frame.slots_per_refresh, 40);
//! let rates = effective_update_rate(&cfg, &frame);
//! assert_eq!(rates.effective_hz_f64(), 37_500.0);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod io;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod simulator;
pub mod waveforms;

pub use model::{SystemConfig, ValidationErrors};
pub use scheduler::{Frame, VoltageProgram};
pub use simulator::{SimOptions, TraceSet};

/// Compiles every code block of the guide as a doc-test so the book stays
/// in sync with the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(getting_started, "../../../book/src/getting-started.md");
    chapter!(architecture, "../../../book/src/architecture.md");
    chapter!(timing, "../../../book/src/timing.md");
    chapter!(scheduling, "../../../book/src/scheduling.md");
    chapter!(simulation, "../../../book/src/simulation.md");
    chapter!(waveforms, "../../../book/src/waveforms.md");
    chapter!(metrics, "../../../book/src/metrics.md");
    chapter!(formats, "../../../book/src/formats.md");
    chapter!(cli, "../../../book/src/cli.md");
}
