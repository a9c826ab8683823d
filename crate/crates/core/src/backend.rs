//! Where schedule assignments go once the controller has computed them.

use thiserror::Error;

use crate::controller::{ModuleId, ScheduleAssignment, SchedulerMode};
use crate::reactive::Micros;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("assignment epoch {got} is not newer than the last applied epoch {last}")]
    StaleEpoch { last: u64, got: u64 },
    #[error("backend runs in {expected:?} mode but the assignment is {got:?}")]
    ModeMismatch { expected: SchedulerMode, got: SchedulerMode },
    #[error("assignment names unknown module `{0}`")]
    UnknownModule(ModuleId),
    #[error("assignment at {at} us is earlier than the backend clock {clock} us")]
    InThePast { at: Micros, clock: Micros },
    #[error("RT period {period_us} us is not a multiple of the quantum {quantum_us} us")]
    PeriodMismatch { period_us: u64, quantum_us: u64 },
    #[error("{path}: {message} (os error {code:?})")]
    Io { path: String, code: Option<i32>, message: String },
    #[error("{path}: permission denied")]
    PermissionDenied { path: String },
    #[error("kernel capability missing: {0}")]
    Capability(String),
}

/// A consumer of schedule assignments, applied in epoch order.
pub trait Backend {
    /// `at` is the virtual time the controller produced the assignment.
    fn apply(&mut self, at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError>;
}

/// Keeps every assignment it is given. Rejects stale epochs like a real
/// backend would.
#[derive(Debug, Default, Clone)]
pub struct RecordingBackend {
    pub applied: Vec<(Micros, ScheduleAssignment)>,
}

impl Backend for RecordingBackend {
    fn apply(&mut self, at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError> {
        if let Some((_, last)) = self.applied.last() {
            if assignment.epoch <= last.epoch {
                return Err(BackendError::StaleEpoch {
                    last: last.epoch,
                    got: assignment.epoch,
                });
            }
        }
        self.applied.push((at, assignment.clone()));
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for &mut B {
    fn apply(&mut self, at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError> {
        (**self).apply(at, assignment)
    }
}
