use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::RoutingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start_step: u64,
    pub mode: RoutingMode,
}

/// Routing mode per step range. Switching modes adds or removes no
/// parameters, so transitions can happen at any step boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleEntry>", into = "Vec<ScheduleEntry>")]
pub struct HotSwapSchedule {
    entries: Vec<ScheduleEntry>,
}

impl HotSwapSchedule {
    pub fn new(entries: Vec<ScheduleEntry>) -> Result<Self> {
        match entries.first() {
            None => return Err(Error::config("schedule must have at least one entry")),
            Some(e) if e.start_step != 0 => {
                return Err(Error::config("first schedule entry must start at step 0"))
            }
            _ => {}
        }
        if entries.windows(2).any(|w| w[1].start_step <= w[0].start_step) {
            return Err(Error::config("schedule start steps must be strictly increasing"));
        }
        Ok(HotSwapSchedule { entries })
    }

    /// A single mode for the whole run.
    pub fn constant(mode: RoutingMode) -> Self {
        HotSwapSchedule {
            entries: vec![ScheduleEntry { start_step: 0, mode }],
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Mode of the last entry starting at or before `step`.
    pub fn mode_at(&self, step: u64) -> RoutingMode {
        let idx = self.entries.partition_point(|e| e.start_step <= step);
        // Entry 0 starts at step 0, so idx >= 1.
        self.entries[idx - 1].mode
    }
}

impl TryFrom<Vec<ScheduleEntry>> for HotSwapSchedule {
    type Error = Error;

    fn try_from(entries: Vec<ScheduleEntry>) -> Result<Self> {
        HotSwapSchedule::new(entries)
    }
}

impl From<HotSwapSchedule> for Vec<ScheduleEntry> {
    fn from(s: HotSwapSchedule) -> Self {
        s.entries
    }
}
