//! Budget curriculum: strictly decreasing stages, then mixed-budget sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plan file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPlan {
    #[serde(default = "default_stages")]
    pub stages: Vec<usize>,
    #[serde(default = "default_true")]
    pub mixed: bool,
    #[serde(default)]
    pub seed: u64,
    /// Batches drawn per stage before advancing.
    #[serde(default = "default_batches")]
    pub batches_per_stage: usize,
}

fn default_stages() -> Vec<usize> {
    vec![6000, 4000, 3000, 2000]
}

fn default_true() -> bool {
    true
}

fn default_batches() -> usize {
    1
}

impl Default for CurriculumPlan {
    fn default() -> Self {
        CurriculumPlan {
            stages: default_stages(),
            mixed: true,
            seed: 0,
            batches_per_stage: 1,
        }
    }
}

impl CurriculumPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("curriculum needs at least one stage"));
        }
        if self.stages.contains(&0) {
            return Err(Error::invalid("stage budgets must be positive"));
        }
        if self.stages.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("stage budgets must be strictly decreasing"));
        }
        if self.batches_per_stage == 0 {
            return Err(Error::invalid("batches_per_stage must be >= 1"));
        }
        Ok(())
    }

    pub fn start(&self) -> Result<CurriculumState> {
        self.validate()?;
        Ok(CurriculumState {
            plan: self.clone(),
            position: Position::Stage { index: 0, batch: 0 },
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Position {
    /// Zero-based stage and batch within it.
    Stage { index: usize, batch: usize },
    Mixed,
    Exhausted,
}

/// One budget handed to a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetDraw {
    pub budget: usize,
    /// 1-based stage number, `None` in the mixed phase.
    pub stage: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CurriculumState {
    plan: CurriculumPlan,
    position: Position,
    rng: ChaCha8Rng,
}

impl CurriculumState {
    pub fn position(&self) -> Position {
        self.position
    }

    pub fn in_mixed_phase(&self) -> bool {
        self.position == Position::Mixed
    }

    /// Budget of the current stage without consuming a batch.
    pub fn stage_budget(&self) -> Result<usize> {
        match self.position {
            Position::Stage { index, .. } => Ok(self.plan.stages[index]),
            Position::Mixed => Err(Error::invalid("mixed phase has no fixed stage budget")),
            Position::Exhausted => Err(Error::CurriculumExhausted),
        }
    }

    /// Uniform draw over all stage budgets.
    pub fn sample_mixed_budget(&mut self) -> Result<usize> {
        if self.position != Position::Mixed {
            return Err(Error::invalid("mixed phase is not active"));
        }
        let i = self.rng.gen_range(0..self.plan.stages.len());
        Ok(self.plan.stages[i])
    }

    /// Budget for the next batch, advancing the curriculum.
    pub fn next_budget(&mut self) -> Result<BudgetDraw> {
        match self.position {
            Position::Stage { index, batch } => {
                let budget = self.plan.stages[index];
                self.position = if batch + 1 < self.plan.batches_per_stage {
                    Position::Stage { index, batch: batch + 1 }
                } else if index + 1 < self.plan.stages.len() {
                    Position::Stage { index: index + 1, batch: 0 }
                } else if self.plan.mixed {
                    Position::Mixed
                } else {
                    Position::Exhausted
                };
                Ok(BudgetDraw {
                    budget,
                    stage: Some(index + 1),
                })
            }
            Position::Mixed => Ok(BudgetDraw {
                budget: self.sample_mixed_budget()?,
                stage: None,
            }),
            Position::Exhausted => Err(Error::CurriculumExhausted),
        }
    }
}

impl Iterator for CurriculumState {
    type Item = BudgetDraw;

    fn next(&mut self) -> Option<BudgetDraw> {
        self.next_budget().ok()
    }
}
