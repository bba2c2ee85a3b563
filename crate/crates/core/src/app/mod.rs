// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, on-disk layout and the end-to-end pipeline behind the
//! command-line tool.

mod config;
mod pipeline;

pub use config::RunConfig;
pub use pipeline::{
    cmd_all, cmd_compare, cmd_corpus, cmd_eval, cmd_train, load_corpus, load_method, CorpusSummary,
    SplitSummary, Target, TrainOutcome, METHODS,
};
