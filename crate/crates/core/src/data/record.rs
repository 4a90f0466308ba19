use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 6;

/// Lower bounds of the six self-reported fatigue bins; each bin is
/// `[lower, next lower)` and the last one is closed at 100.
pub const CLASS_LOWER_BOUNDS: [f64; N_CLASSES] = [0.0, 10.0, 20.0, 40.0, 60.0, 80.0];
pub const SCORE_MAX: f64 = 100.0;

/// Cognitive fatigue level, 0 (none) to 5 (extreme).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FatigueClass(u8);

impl FatigueClass {
    pub const ALL: [FatigueClass; N_CLASSES] = [
        FatigueClass(0),
        FatigueClass(1),
        FatigueClass(2),
        FatigueClass(3),
        FatigueClass(4),
        FatigueClass(5),
    ];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < N_CLASSES {
            Ok(Self(value))
        } else {
            Err(Error::Range(format!("fatigue class {value} outside 0..=5")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Score interval `[lo, hi)` covered by this class (`hi` inclusive for class 5).
    pub fn score_range(self) -> (f64, f64) {
        let i = self.index();
        let hi = CLASS_LOWER_BOUNDS.get(i + 1).copied().unwrap_or(SCORE_MAX);
        (CLASS_LOWER_BOUNDS[i], hi)
    }

    pub fn reference_level(self) -> &'static str {
        [
            "No Fatigue",
            "Very Low Fatigue",
            "Mild Fatigue",
            "Fatigue",
            "High Fatigue",
            "Extreme Fatigue",
        ][self.index()]
    }
}

impl TryFrom<u8> for FatigueClass {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FatigueClass> for u8 {
    fn from(c: FatigueClass) -> u8 {
        c.0
    }
}

impl fmt::Display for FatigueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bin a 0–100 self-reported score into one of six classes.
pub fn score_to_class(score: f64) -> Result<FatigueClass> {
    if !(0.0..=SCORE_MAX).contains(&score) {
        return Err(Error::Range(format!("fatigue score {score} outside [0, 100]")));
    }
    let idx = CLASS_LOWER_BOUNDS
        .iter()
        .rposition(|&lo| score >= lo)
        .expect("score >= 0");
    Ok(FatigueClass(idx as u8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "TBI")]
    Tbi,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Hc => "HC",
            Group::Tbi => "TBI",
        })
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HC" | "hc" => Ok(Group::Hc),
            "TBI" | "tbi" => Ok(Group::Tbi),
            _ => Err(Error::Format(format!("unknown group {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    ZeroBack,
    TwoBack,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ZeroBack => "0back",
            Task::TwoBack => "2back",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0back" | "0-back" | "ZeroBack" => Ok(Task::ZeroBack),
            "2back" | "2-back" | "TwoBack" => Ok(Task::TwoBack),
            _ => Err(Error::Format(format!("unknown task {s:?}"))),
        }
    }
}

/// One acquisition. Unlabeled (pretraining) records carry no score, group or task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub path: PathBuf,
    pub subject_id: String,
    pub group: Option<Group>,
    pub task: Option<Task>,
    pub session_index: u32,
    sr_score: Option<f64>,
}

impl ScanRecord {
    pub fn labeled(
        path: impl Into<PathBuf>,
        subject_id: impl Into<String>,
        group: Group,
        task: Task,
        session_index: u32,
        sr_score: f64,
    ) -> Result<Self> {
        score_to_class(sr_score)?;
        Ok(Self {
            path: path.into(),
            subject_id: subject_id.into(),
            group: Some(group),
            task: Some(task),
            session_index,
            sr_score: Some(sr_score),
        })
    }

    pub fn unlabeled(path: impl Into<PathBuf>, subject_id: impl Into<String>, session_index: u32) -> Self {
        Self {
            path: path.into(),
            subject_id: subject_id.into(),
            group: None,
            task: None,
            session_index,
            sr_score: None,
        }
    }

    pub fn sr_score(&self) -> Option<f64> {
        self.sr_score
    }

    /// Replace the score; the label follows it.
    pub fn set_sr_score(&mut self, score: Option<f64>) -> Result<()> {
        if let Some(s) = score {
            score_to_class(s)?;
        }
        self.sr_score = score;
        Ok(())
    }

    pub fn label(&self) -> Option<FatigueClass> {
        self.sr_score.map(|s| score_to_class(s).expect("validated on construction"))
    }
}
