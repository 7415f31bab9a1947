//! Low-hallucination recaptioning pipeline.
//!
//! The crate is organised around the stages a caption dataset moves through:
//!
//! * [`dataset`]: JSONL records and manifests shared by every stage.
//! * [`policy`] and [`world`]: a small categorical policy with exact
//!   log-probabilities, plus the synthetic captioning world that gives an exact
//!   critic.
//! * [`dpo`] and [`sft`]: the preference and likelihood objectives with analytic
//!   gradients and a plain SGD step.
//! * [`cdpo`]: plateau detection and the continuous-DPO controller that swaps
//!   the reference model and resamples preference data.
//! * [`foundry`]: candidate sampling, chosen/rejected selection and length
//!   balancing.
//! * [`eval`]: detail-level hallucination judgments and their aggregate rates.
//! * [`review`]: the durable manual-review queue.
//! * [`pipeline`]: end-to-end toy-world runs.

pub mod cdpo;
pub mod config;
pub mod dataset;
pub mod dpo;
pub mod eval;
pub mod foundry;
pub mod pipeline;
pub mod policy;
pub mod review;
pub mod rng;
pub mod sft;
pub mod world;

pub use dataset::{
    CaptionRecord, CaptionSource, Candidate, CandidateSet, DatasetManifest, LengthMode,
    PreferencePair, SamplerParams, Stage,
};
pub use policy::{ParamGrad, ToyPolicy, EOS};
