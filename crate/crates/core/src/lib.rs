//! Model-agnostic toolkit that turns a zero-shot dialogue state tracker
//! into a few-shot one. It generates pseudo-labels in an unlabeled target
//! domain with the tracker itself, filters them by cycle consistency
//! (does the inverse slot-type task agree with the forward slot-value
//! task?), and exports the survivors as fine-tuning data. Evaluation,
//! oracular upper bounds, slot-type discovery, and in-context-learning
//! prompt assembly round out the pipeline.
//!
//! Start at [`corpus`] for data ingestion, [`selftrain`] for the main
//! loop, and [`eval`] for metrics.

pub mod backend;
pub mod corpus;
pub mod eval;
pub mod jointtrain;
pub mod oracle_selection;
pub mod prompting;
pub mod selftrain;
pub mod slotgen;
pub mod synth;
pub mod text;
