//! Template-based text-to-SQL with one-shot adaptation.
//!
//! A question is answered in three stages: a candidate search network
//! retrieves the most similar template exemplars from memory, a matching
//! network picks one template among them, and a pointer network binds each
//! template variable to a question token. New templates are supported by
//! adding one exemplar to the memory, with no parameter updates.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod csn;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matchnet;
pub mod pipeline;
pub mod scalar;
pub mod slotfill;
pub mod sqlcheck;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Engine32 = pipeline::Engine<f32>;
pub type Engine64 = pipeline::Engine<f64>;
pub type CsnModel32 = csn::CsnModel<f32>;
pub type CsnModel64 = csn::CsnModel<f64>;
pub type MatchNet32 = matchnet::MatchNet<f32>;
pub type MatchNet64 = matchnet::MatchNet<f64>;
pub type SlotFillModel32 = slotfill::SlotFillModel<f32>;
pub type SlotFillModel64 = slotfill::SlotFillModel<f64>;
