//! Multi-task, knowledge-infused multimodal summarization of
//! patient–doctor dialogues.
//!
//! A transformer encoder reads a speaker-tagged dialogue; two gated
//! bottleneck adapters fuse a pooled knowledge vector (retrieved by TF-IDF
//! from a term/description base) and a visual feature vector into the
//! encoder states; a single decoder, steered by a task token, produces the
//! medical concern summary (MCS), the doctor impression (DI) or the overall
//! summary.
//!
//! Everything runs on the small f64 autograd engine in [`numerics`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generation;
pub mod io;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use textproc::{special, TokenId};

/// The three generation targets, each selected by its own decoder token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sum,
    Mcs,
    Di,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sum, Task::Mcs, Task::Di];

    pub fn token(self) -> TokenId {
        match self {
            Task::Sum => special::TASK_SUM,
            Task::Mcs => special::TASK_MCS,
            Task::Di => special::TASK_DI,
        }
    }

    pub fn from_token(id: TokenId) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.token() == id)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sum => "sum",
            Task::Mcs => "mcs",
            Task::Di => "di",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" | "summary" => Ok(Task::Sum),
            "mcs" => Ok(Task::Mcs),
            "di" => Ok(Task::Di),
            other => Err(Error::config(format!(
                "unknown task `{other}` (expected sum, mcs or di)"
            ))),
        }
    }
}

/// Parses `sum,mcs,di`-style lists into a sorted, de-duplicated task set.
pub fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    tasks.sort();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(Error::config("at least one task is required"));
    }
    Ok(tasks)
}
