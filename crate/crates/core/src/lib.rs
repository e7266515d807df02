//! Generation and evaluation of exemplars (instantiations and exceptions)
//! for generic statements such as "Birds can fly".
//!
//! The pipeline parses a generic into concept, relation and property spans,
//! derives its logical forms, fills generation templates into prompts and
//! lexical constraints, decodes completions with constrained beam search,
//! ranks and filters them, and evaluates the result.

pub mod bridge;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod filter;
mod jsonl;
mod error;
pub mod lexicon;
pub mod pipeline;
pub mod rank;
pub mod subtype;
pub mod template;

pub use error::{Error, Result};
