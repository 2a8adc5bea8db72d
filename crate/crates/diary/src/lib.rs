//! Host-side half of the tracing system: on-disk day files, the JSON wire
//! format, the back-end service, the device agent loop, the multi-agent
//! simulator and the network privacy audit.

pub mod agent;
pub mod audit;
pub mod backend;
pub mod dayfile;
pub mod intake;
pub mod sim;
pub mod transport;
pub mod wire;

pub use diary_core as core;

/// Conversions between day numbers (days since the Unix epoch, UTC) and
/// calendar dates.
pub mod calendar {
    use chrono::{Days, NaiveDate};

    fn epoch() -> NaiveDate {
        NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
    }

    pub fn day_to_date(day: u64) -> NaiveDate {
        epoch() + Days::new(day)
    }

    /// Dates before 1970 map to day 0.
    pub fn date_to_day(date: NaiveDate) -> u64 {
        u64::try_from((date - epoch()).num_days()).unwrap_or(0)
    }

    pub fn parse_day(s: &str) -> Option<u64> {
        let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()?;
        (d >= epoch()).then(|| date_to_day(d))
    }

    pub fn format_day(day: u64) -> String {
        day_to_date(day).format("%Y-%m-%d").to_string()
    }

}
