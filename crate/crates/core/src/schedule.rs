//! Budget specs and control-token insertion schedules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token::ControlToken;

/// Default number of ratio intervals.
pub const DEFAULT_INTERVALS: u32 = 8;
/// Default extra tokens granted for the final answer after forced truncation.
pub const DEFAULT_ANSWER_WINDOW: usize = 50;
/// Default rounding unit for training budgets.
pub const DEFAULT_GRANULARITY: usize = 50;

/// How control tokens are placed in the think phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `intervals` markers at multiples of `floor(B / intervals)`.
    Ratio { intervals: u32, include_origin: bool },
    /// One marker every `interval` tokens. `max_budget` sizes the vocabulary.
    FixedInterval {
        interval: usize,
        max_budget: Option<usize>,
    },
    None,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Ratio {
            intervals: DEFAULT_INTERVALS,
            include_origin: true,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Ratio { intervals, .. } => write!(f, "ratio:{intervals}"),
            ScheduleKind::FixedInterval { interval, .. } => write!(f, "fixed:{interval}"),
            ScheduleKind::None => f.write_str("none"),
        }
    }
}

/// Parses `ratio:K`, `fixed:I` or `none`. Ratio schedules default to
/// including the origin marker.
impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("schedule must be ratio:K, fixed:I or none, got {s:?}"));
        if s == "none" {
            return Ok(ScheduleKind::None);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "ratio" => Ok(ScheduleKind::Ratio {
                intervals: value.parse().map_err(|_| bad())?,
                include_origin: true,
            }),
            "fixed" => Ok(ScheduleKind::FixedInterval {
                interval: value.parse().map_err(|_| bad())?,
                max_budget: None,
            }),
            _ => Err(bad()),
        }
    }
}

/// The contract a generation session must honor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Think-phase budget `B`.
    pub budget: usize,
    pub schedule: ScheduleKind,
    /// Headroom granted after forced truncation, on top of `budget`.
    pub answer_window: usize,
    /// Rounding unit for curation.
    pub granularity: usize,
}

impl BudgetSpec {
    pub fn new(budget: usize) -> Self {
        BudgetSpec {
            budget,
            schedule: ScheduleKind::default(),
            answer_window: DEFAULT_ANSWER_WINDOW,
            granularity: DEFAULT_GRANULARITY,
        }
    }

    pub fn with_schedule(mut self, schedule: ScheduleKind) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_answer_window(mut self, window: usize) -> Self {
        self.answer_window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("budget must be positive"));
        }
        if self.granularity == 0 {
            return Err(Error::invalid("granularity must be positive"));
        }
        match self.schedule {
            ScheduleKind::Ratio { intervals, .. } => {
                if intervals == 0 || intervals as usize > self.budget {
                    return Err(Error::invalid(format!(
                        "ratio intervals must satisfy 1 <= K <= B (K={intervals}, B={})",
                        self.budget
                    )));
                }
            }
            ScheduleKind::FixedInterval { interval, max_budget } => {
                if interval == 0 || interval > self.budget {
                    return Err(Error::invalid(format!(
                        "fixed interval must satisfy 1 <= I <= B (I={interval}, B={})",
                        self.budget
                    )));
                }
                if max_budget.is_some_and(|m| m < self.budget) {
                    return Err(Error::invalid("max budget is below the session budget"));
                }
            }
            ScheduleKind::None => {}
        }
        Ok(())
    }

    /// Builds the insertion schedule for this spec.
    pub fn schedule(&self) -> Result<ControlSchedule> {
        self.validate()?;
        match self.schedule {
            ScheduleKind::Ratio {
                intervals,
                include_origin,
            } => make_ratio_schedule(self.budget, intervals, include_origin),
            ScheduleKind::FixedInterval { interval, max_budget } => {
                make_fixed_schedule_with_max(self.budget, interval, max_budget.unwrap_or(self.budget))
            }
            ScheduleKind::None => Ok(ControlSchedule::empty()),
        }
    }
}

/// A scheduled insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub position: usize,
    pub token: ControlToken,
}

/// Ordered insertion positions with their control tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSchedule {
    entries: Vec<ScheduleEntry>,
    vocabulary_size: usize,
}

impl ControlSchedule {
    pub fn empty() -> Self {
        ControlSchedule {
            entries: Vec::new(),
            vocabulary_size: 0,
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct control tokens a model must know to follow this schedule family.
    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary_size
    }

    /// JSON array of `{position, token}` pairs.
    pub fn preview_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("schedule entries serialize")
    }
}

/// Ratio schedule: marker `c_{j+1}` at `j * floor(B/K)` for `j = 0..K` when
/// `include_origin`, otherwise `c_j` at `j * floor(B/K)` for `j = 1..K`.
pub fn make_ratio_schedule(budget: usize, intervals: u32, include_origin: bool) -> Result<ControlSchedule> {
    if intervals == 0 || intervals as usize > budget {
        return Err(Error::invalid(format!(
            "ratio intervals must satisfy 1 <= K <= B (K={intervals}, B={budget})"
        )));
    }
    let step = budget / intervals as usize;
    let entries = if include_origin {
        (0..intervals)
            .map(|j| ScheduleEntry {
                position: j as usize * step,
                token: ControlToken::Budget { index: j + 1, of: intervals },
            })
            .collect()
    } else {
        (1..intervals)
            .map(|j| ScheduleEntry {
                position: j as usize * step,
                token: ControlToken::Budget { index: j, of: intervals },
            })
            .collect()
    };
    Ok(ControlSchedule {
        entries,
        vocabulary_size: intervals as usize,
    })
}

/// Fixed-interval schedule: marker `c_{j+1}` at `j * I` for every `j * I < B`.
pub fn make_fixed_schedule(budget: usize, interval: usize) -> Result<ControlSchedule> {
    make_fixed_schedule_with_max(budget, interval, budget)
}

/// As [`make_fixed_schedule`], sizing the vocabulary for `max_budget`.
pub fn make_fixed_schedule_with_max(budget: usize, interval: usize, max_budget: usize) -> Result<ControlSchedule> {
    if interval == 0 {
        return Err(Error::invalid("fixed interval must be positive"));
    }
    if budget == 0 || interval > budget {
        return Err(Error::invalid(format!(
            "fixed interval must satisfy 1 <= I <= B (I={interval}, B={budget})"
        )));
    }
    if max_budget < budget {
        return Err(Error::invalid("max budget is below the session budget"));
    }
    let count = budget.div_ceil(interval);
    let entries = (0..count)
        .map(|j| ScheduleEntry {
            position: j * interval,
            token: ControlToken::Elapsed { index: j as u32 + 1 },
        })
        .collect();
    Ok(ControlSchedule {
        entries,
        vocabulary_size: max_budget.div_ceil(interval),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indices(s: &ControlSchedule) -> Vec<u32> {
        s.entries().iter().map(|e| e.token.index()).collect()
    }

    #[test]
    fn ratio_with_origin() {
        let s = make_ratio_schedule(800, 8, true).unwrap();
        assert_eq!(s.positions(), vec![0, 100, 200, 300, 400, 500, 600, 700]);
        assert_eq!(indices(&s), (1..=8).collect::<Vec<_>>());
        assert_eq!(s.vocabulary_size(), 8);
    }

    #[test]
    fn ratio_without_origin() {
        let s = make_ratio_schedule(800, 8, false).unwrap();
        assert_eq!(s.positions(), vec![100, 200, 300, 400, 500, 600, 700]);
        assert_eq!(indices(&s), (1..=7).collect::<Vec<_>>());
        assert_eq!(s.vocabulary_size(), 8);
    }

    #[test]
    fn ratio_unit_step_and_uneven_budget() {
        let s = make_ratio_schedule(8, 8, true).unwrap();
        assert_eq!(s.positions(), (0..8).collect::<Vec<_>>());
        let s = make_ratio_schedule(803, 8, true).unwrap();
        assert_eq!(s.positions(), vec![0, 100, 200, 300, 400, 500, 600, 700]);
        assert_eq!(803 - 700, 103);
    }

    #[test]
    fn ratio_rejects_bad_k() {
        assert!(make_ratio_schedule(800, 0, true).is_err());
        assert!(make_ratio_schedule(7, 8, true).is_err());
    }

    #[test]
    fn fixed_counts() {
        assert_eq!(make_fixed_schedule(500, 100).unwrap().len(), 5);
        assert_eq!(make_fixed_schedule(1000, 100).unwrap().len(), 10);
        assert_eq!(make_fixed_schedule(10000, 50).unwrap().vocabulary_size(), 200);
        assert_eq!(make_fixed_schedule(10000, 250).unwrap().vocabulary_size(), 40);
        assert!(make_fixed_schedule(500, 0).is_err());
    }

    #[test]
    fn fixed_vocabulary_tracks_max_budget() {
        let s = make_fixed_schedule_with_max(500, 100, 10000).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.vocabulary_size(), 100);
        assert_eq!(s.positions(), vec![0, 100, 200, 300, 400]);
    }

    #[test]
    fn preview_serializes_surface_forms() {
        let s = make_ratio_schedule(16, 2, true).unwrap();
        assert_eq!(
            s.preview_json(),
            r#"[{"position":0,"token":"<|budget:1/2|>"},{"position":8,"token":"<|budget:2/2|>"}]"#
        );
    }

    #[test]
    fn schedule_kind_parses() {
        assert_eq!("none".parse::<ScheduleKind>().unwrap(), ScheduleKind::None);
        assert_eq!(
            "fixed:50".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::FixedInterval { interval: 50, max_budget: None }
        );
        assert!("ratio:x".parse::<ScheduleKind>().is_err());
        assert!("bogus".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BudgetSpec::new(0).validate().is_err());
        assert!(BudgetSpec::new(500).validate().is_ok());
        let bad = BudgetSpec::new(5).with_schedule(ScheduleKind::Ratio { intervals: 8, include_origin: true });
        assert!(bad.schedule().is_err());
        assert!(BudgetSpec::new(500).with_schedule(ScheduleKind::None).schedule().unwrap().is_empty());
    }
}
