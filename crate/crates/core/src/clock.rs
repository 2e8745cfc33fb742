//! Local-time helpers for an IANA timezone.

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Timelike, Utc};
use chrono_tz::Tz;

use crate::error::{LocaterError, Result};
use crate::model::Timestamp;

pub const DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clock {
    tz: Tz,
}

impl Default for Clock {
    fn default() -> Self {
        Clock { tz: Tz::UTC }
    }
}

impl Clock {
    pub fn new(name: &str) -> Result<Self> {
        let tz: Tz = name
            .parse()
            .map_err(|_| LocaterError::InvalidConfig(format!("unknown timezone `{name}`")))?;
        Ok(Clock { tz })
    }

    pub fn name(&self) -> &'static str {
        self.tz.name()
    }

    fn local(&self, t: Timestamp) -> DateTime<Tz> {
        Utc.timestamp_opt(t, 0)
            .single()
            .expect("timestamp in range")
            .with_timezone(&self.tz)
    }

    fn midnight_of(&self, date: NaiveDate) -> Timestamp {
        let naive = date.and_hms_opt(0, 0, 0).expect("valid midnight");
        // Midnight can fall in a DST gap; take the first valid instant after it.
        let mut probe = naive;
        loop {
            if let Some(dt) = self.tz.from_local_datetime(&probe).earliest() {
                return dt.timestamp();
            }
            probe += Duration::minutes(15);
        }
    }

    /// Epoch second of the local midnight starting the day containing `t`.
    pub fn day_start(&self, t: Timestamp) -> Timestamp {
        self.midnight_of(self.local(t).date_naive())
    }

    /// First local midnight strictly after `t`.
    pub fn next_midnight(&self, t: Timestamp) -> Timestamp {
        let date = self.local(t).date_naive().succ_opt().expect("date in range");
        self.midnight_of(date)
    }

    /// Local midnight `days` days before or after the day of `t`.
    pub fn shift_days(&self, t: Timestamp, days: i64) -> Timestamp {
        let date = self.local(t).date_naive() + Duration::days(days);
        self.midnight_of(date)
    }

    pub fn seconds_of_day(&self, t: Timestamp) -> i64 {
        let l = self.local(t);
        l.num_seconds_from_midnight() as i64
    }

    /// Monday = 0.
    pub fn weekday(&self, t: Timestamp) -> u32 {
        self.local(t).weekday().num_days_from_monday()
    }

    /// Local day ordinal, used as a memo key.
    pub fn day_index(&self, t: Timestamp) -> i64 {
        self.local(t).date_naive().num_days_from_ce() as i64
    }
}
