//! Knowledge-graph entity alignment with graph-augmented training.
//!
//! The pipeline: load or generate two knowledge graphs with seed
//! alignments ([`kg`]), encode entities with a shared entity-relation graph
//! encoder ([`encoder`]), train it with a margin alignment loss on
//! edge-dropped views ([`augment`]) plus a cross-view contrastive loss
//! ([`train`]), then align by exhaustive nearest-neighbor search ([`eval`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
