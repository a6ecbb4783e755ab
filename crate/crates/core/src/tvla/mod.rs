//! Fixed-vs-random leakage assessment over emulated power samples.

mod campaign;
mod report;
mod stats;

pub use campaign::{
    class_labels, random_inputs, run_campaign, run_single, trace_rng, CampaignError, CampaignSpec, Fill,
    InputBinding, MaskDecl, MaskKind, RegValue, RegionBinding, ShareOp,
};
pub use report::{aggregate_max, Cause, ReportError, SlotReport, TTestReport, UnknownCause, DEFAULT_THRESHOLD};
pub use stats::{welch_t, WelchT, WelfordAccumulator};

#[cfg(test)]
mod tests;
