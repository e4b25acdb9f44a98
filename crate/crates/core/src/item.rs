use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three assessment dimensions an item can be scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Technical,
    Aesthetic,
    Alignment,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Technical, TaskKind::Aesthetic, TaskKind::Alignment];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Technical => "technical",
            TaskKind::Aesthetic => "aesthetic",
            TaskKind::Alignment => "alignment",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            TaskKind::Technical => 0,
            TaskKind::Aesthetic => 1,
            TaskKind::Alignment => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "technical" => Ok(TaskKind::Technical),
            "aesthetic" => Ok(TaskKind::Aesthetic),
            "alignment" => Ok(TaskKind::Alignment),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// One evaluable unit with a ground-truth score on the dataset's native scale.
pub trait ScoreItem {
    fn id(&self) -> &str;
    fn task(&self) -> TaskKind;
    fn truth(&self) -> f64;
}

/// Synthetic stand-in for an image+prompt pair: a feature vector with a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyItem {
    pub id: String,
    pub task: TaskKind,
    pub features: Vec<f64>,
    pub truth: f64,
}

impl ScoreItem for ToyItem {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> TaskKind {
        self.task
    }

    fn truth(&self) -> f64 {
        self.truth
    }
}
