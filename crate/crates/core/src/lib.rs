//! Structured bug repair: a patch-and-test loop around a linear
//! search/outline/localize/edit stage machine.

pub mod agentio;
pub mod bench;
pub mod cli;
pub mod codemap;
pub mod codesearch;
pub mod orchestrator;
pub mod par;
pub mod patcher;
pub mod testkit;
pub mod workspace;
