//! Budget scheduler for the trainable modules: tracks per-module weight-norm
//! movement across epochs and keeps exactly B modules active, either
//! permanently (early-kill) or with revival (kill-and-revive), where a killed
//! module competes with the score it had when it was last trained.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleStatus {
    Active,
    Killed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    /// Full tuning: every module active, no scheduler.
    Ft,
    /// Early kill: one selection, killed modules never return.
    Ek,
    /// Kill and revive: re-selection every epoch with score carry-forward.
    Kr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerError {
    BadBudget { budget: usize, modules: usize },
    FtHasNoScheduler,
    WrongLength { expected: usize, got: usize },
    BadPhase(String),
    NegativeNorm(f64),
}

impl fmt::Display for SchedulerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerError::BadBudget { budget, modules } => {
                write!(f, "budget {budget} outside 1..={modules}")
            }
            SchedulerError::FtHasNoScheduler => {
                write!(f, "full tuning runs without a scheduler")
            }
            SchedulerError::WrongLength { expected, got } => {
                write!(f, "expected {expected} per-module values, got {got}")
            }
            SchedulerError::BadPhase(m) => f.write_str(m),
            SchedulerError::NegativeNorm(v) => write!(f, "norms must be >= 0, got {v}"),
        }
    }
}

impl core::error::Error for SchedulerError {}

/// Per-module relative change |prev − cur| / prev.
///
/// Guards: 0 → 0 gives 0 (a module that stayed at zero did not move);
/// 0 → nonzero gives +∞ (any growth from zero dominates every finite score).
pub fn diff_relative(prev: &[f64], cur: &[f64]) -> Result<Vec<f64>, SchedulerError> {
    if prev.len() != cur.len() {
        return Err(SchedulerError::WrongLength {
            expected: prev.len(),
            got: cur.len(),
        });
    }
    prev.iter()
        .zip(cur)
        .map(|(&p, &c)| {
            if p < 0.0 || !p.is_finite() {
                return Err(SchedulerError::NegativeNorm(p));
            }
            if c < 0.0 || !c.is_finite() {
                return Err(SchedulerError::NegativeNorm(c));
            }
            Ok(if p == 0.0 {
                if c == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                libm::fabs(p - c) / p
            })
        })
        .collect()
}

/// The min(B, L) modules with the largest scores become Active; ties break
/// toward the lower module index.
pub fn select_active(scores: &[f64], budget: usize) -> Vec<ModuleStatus> {
    let l = scores.len();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut status = alloc::vec![ModuleStatus::Killed; l];
    for &i in order.iter().take(budget.min(l)) {
        status[i] = ModuleStatus::Active;
    }
    status
}

/// A killed module did not train, so its fresh change score is meaningless;
/// it keeps competing with the score from its last active epoch.
pub fn carry_forward(
    d_new: &[f64],
    d_prev: &[f64],
    status: &[ModuleStatus],
) -> Result<Vec<f64>, SchedulerError> {
    if d_new.len() != d_prev.len() || d_new.len() != status.len() {
        return Err(SchedulerError::WrongLength {
            expected: d_new.len(),
            got: d_prev.len().min(status.len()),
        });
    }
    Ok(status
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            ModuleStatus::Killed => d_prev[i],
            ModuleStatus::Active => d_new[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Waiting for the norms taken before any tuning.
    AwaitInitial,
    /// Warmup running with every module active; next report closes it.
    Pretune,
    /// Main epochs.
    Running,
}

/// Scheduler state: the norm history N (one row before and one row after
/// each training phase), the change history D (one row per transition, with
/// carry-forward already applied in KR mode), and the current status vector.
#[derive(Debug, Clone)]
pub struct Scheduler {
    mode: TuneMode,
    budget: usize,
    modules: usize,
    phase: Phase,
    norms: Vec<Vec<f64>>,
    diffs: Vec<Vec<f64>>,
    status: Vec<ModuleStatus>,
}

impl Scheduler {
    pub fn new(mode: TuneMode, budget: usize, modules: usize) -> Result<Self, SchedulerError> {
        if mode == TuneMode::Ft {
            return Err(SchedulerError::FtHasNoScheduler);
        }
        if budget == 0 || budget > modules {
            return Err(SchedulerError::BadBudget { budget, modules });
        }
        Ok(Scheduler {
            mode,
            budget,
            modules,
            phase: Phase::AwaitInitial,
            norms: Vec::new(),
            diffs: Vec::new(),
            status: alloc::vec![ModuleStatus::Active; modules],
        })
    }

    pub fn status(&self) -> &[ModuleStatus] {
        &self.status
    }

    pub fn active_count(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == ModuleStatus::Active)
            .count()
    }

    /// Norm history rows recorded so far.
    pub fn norm_rows(&self) -> &[Vec<f64>] {
        &self.norms
    }

    /// Change-score rows; in KR mode these are post-carry.
    pub fn diff_rows(&self) -> &[Vec<f64>] {
        &self.diffs
    }

    fn check_len(&self, v: &[f64]) -> Result<(), SchedulerError> {
        if v.len() != self.modules {
            return Err(SchedulerError::WrongLength {
                expected: self.modules,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Feeds one norm report in choreography order. The first report records
    /// the pre-warmup norms and produces no decision (warmup always runs with
    /// everything active); each later report closes a training phase and
    /// returns the status vector for the next one.
    pub fn on_norm_report(
        &mut self,
        norms: &[f64],
    ) -> Result<Option<Vec<ModuleStatus>>, SchedulerError> {
        self.check_len(norms)?;
        match self.phase {
            Phase::AwaitInitial => {
                self.norms.push(norms.to_vec());
                self.phase = Phase::Pretune;
                Ok(None)
            }
            Phase::Pretune => {
                let pre = self.norms[0].clone();
                let d0 = diff_relative(&pre, norms)?;
                self.norms.push(norms.to_vec());
                self.status = select_active(&d0, self.budget);
                self.diffs.push(d0);
                self.phase = Phase::Running;
                Ok(Some(self.status.clone()))
            }
            Phase::Running => {
                let pre = self
                    .norms
                    .last()
                    .expect("running phase always has history")
                    .clone();
                let status = self.epoch_transition(&pre, norms)?;
                Ok(Some(status))
            }
        }
    }

    /// One main-epoch transition: scores the epoch's norm movement, applies
    /// the mode's selection rule and returns the status vector for the next
    /// epoch. `norms_pre`/`norms_post` bracket the epoch that just finished.
    pub fn epoch_transition(
        &mut self,
        norms_pre: &[f64],
        norms_post: &[f64],
    ) -> Result<Vec<ModuleStatus>, SchedulerError> {
        if self.phase != Phase::Running {
            return Err(SchedulerError::BadPhase(alloc::format!(
                "epoch_transition before warmup completed (phase {:?})",
                self.phase
            )));
        }
        self.check_len(norms_pre)?;
        let d_new = diff_relative(norms_pre, norms_post)?;
        let prev_status = self.status.clone();
        let row = match self.mode {
            TuneMode::Kr => {
                let d_prev = self.diffs.last().expect("running phase has a diff row");
                let carried = carry_forward(&d_new, d_prev, &prev_status)?;
                self.status = select_active(&carried, self.budget);
                carried
            }
            TuneMode::Ek => {
                // Killed modules are out of the running for good: they rank
                // below every live candidate and can never be re-selected.
                let restricted: Vec<f64> = d_new
                    .iter()
                    .zip(&prev_status)
                    .map(|(&d, s)| match s {
                        ModuleStatus::Active => d,
                        ModuleStatus::Killed => f64::NEG_INFINITY,
                    })
                    .collect();
                self.status = select_active(&restricted, self.budget);
                d_new
            }
            TuneMode::Ft => unreachable!("constructor rejects FT"),
        };
        self.norms.push(norms_pre.to_vec());
        self.norms.push(norms_post.to_vec());
        self.diffs.push(row);
        Ok(self.status.clone())
    }
}
