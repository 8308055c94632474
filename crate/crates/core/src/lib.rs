//! Code-switched experience replay for continual multilingual learning.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`lexicon`] and [`corpus`] load bilingual word tables and POS-tagged
//!   labeled corpora (CoNLL-U or JSONL);
//! * [`codeswitch`] rewrites sentences by swapping a fraction of tokens,
//!   chosen primarily from one POS category, for their translations;
//! * [`scheduler`] turns a language sequence into an ordered stream of
//!   training steps, inserting code-switched replay batches that may only
//!   touch the shared replay adapter;
//! * [`synthdata`] generates parallel pseudo-language corpora with exact
//!   lexicons so the whole thing can be exercised without real datasets;
//! * [`toytrainer`] is a small frozen-backbone learner with per-language
//!   adapters and a shared replay adapter that consumes the step stream;
//! * [`analysis`] computes average accuracy, retention curves, layer-probe
//!   deltas, POS-frequency correlations and attention statistics.
//!
//! The guide in `book/` walks through each piece with runnable snippets.

pub mod analysis;
pub mod codeswitch;
pub mod corpus;
pub mod error;
pub mod lang;
pub mod lexicon;
pub mod rng;
pub mod scheduler;
pub mod synthdata;
pub mod toytrainer;

pub use error::{Error, Result};
pub use lang::LanguageId;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/codeswitch.md")]
    struct Codeswitch;
    #[doc = include_str!("../../../book/src/schedule.md")]
    struct Schedule;
    #[doc = include_str!("../../../book/src/trainer.md")]
    struct Trainer;
    #[doc = include_str!("../../../book/src/analysis.md")]
    struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
