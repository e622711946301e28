//! Contrastive-learning auditory attention detection (CLAAD).
//!
//! The crate covers the whole pipeline: EEG and audio preprocessing
//! ([`sigproc`]), common spatial pattern features ([`csp`]), trial storage,
//! windowing and cross-validation splits ([`dataset`]), the cross-modal
//! attention encoder with hand-written backpropagation ([`model`]), the
//! classification and contrastive objectives ([`losses`]), Adam training with
//! checkpoints ([`trainer`]) and the `claad` command line ([`evalcli`]).
//!
//! Data-parallel loops (per-example forward/backward, per-epoch covariances,
//! per-trial windowing) run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Reductions always
//! happen in a fixed order, so results are bit-identical either way.

pub mod config;
pub mod csp;
pub mod dataset;
pub mod evalcli;
pub mod losses;
pub mod model;
pub mod par;
pub mod sigproc;
pub mod trainer;


