use std::collections::BTreeSet;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Click,
    Atc,
    Fav,
    Buy,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Click => "click",
            ActionKind::Atc => "atc",
            ActionKind::Fav => "fav",
            ActionKind::Buy => "buy",
        })
    }
}

/// One raw user-item action from the log.
///
/// `price` and `discount` are optional columns; public behaviour logs carry
/// neither, in which case downstream features default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub user_id: String,
    pub item_id: String,
    pub category_id: String,
    pub action: ActionKind,
    pub timestamp: i64,
    #[serde(default)]
    pub price: Option<f64>,
    #[serde(default)]
    pub discount: Option<f64>,
}

impl ActionEvent {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        category_id: impl Into<String>,
        action: ActionKind,
        timestamp: i64,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            category_id: category_id.into(),
            action,
            timestamp,
            price: None,
            discount: None,
        }
    }
}

/// Inclusive range of calendar days (days since the Unix epoch in the
/// calendar's timezone).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: i64,
    pub end: i64,
}

impl DayRange {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, day: i64) -> bool {
        day >= self.start && day <= self.end
    }

    pub fn len(&self) -> i64 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Daily,
    PrePromo,
    Promo,
    Outside,
}

/// Day-level calendar of one sales event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionCalendar {
    pub daily_train: DayRange,
    pub pre_promo: DayRange,
    pub promo_days: BTreeSet<i64>,
    /// Offset added to UTC timestamps before truncating to days.
    pub tz_offset_secs: i64,
}

impl PromotionCalendar {
    pub fn new(
        daily_train: DayRange,
        pre_promo: DayRange,
        promo_days: BTreeSet<i64>,
        tz_offset_secs: i64,
    ) -> Result<Self> {
        if daily_train.is_empty() || pre_promo.is_empty() {
            return Err(Error::config("calendar ranges must be non-empty"));
        }
        let first_promo = *promo_days
            .first()
            .ok_or_else(|| Error::config("calendar needs at least one promotion day"))?;
        if daily_train.end >= pre_promo.start || pre_promo.end >= first_promo {
            return Err(Error::config(
                "calendar ranges must be disjoint and ordered: daily < pre-promotion < promotion",
            ));
        }
        Ok(Self {
            daily_train,
            pre_promo,
            promo_days,
            tz_offset_secs,
        })
    }

    /// Builds a calendar from ISO dates (`YYYY-MM-DD`).
    pub fn from_dates(
        daily: (&str, &str),
        pre_promo: (&str, &str),
        promo: &[&str],
        tz_offset_secs: i64,
    ) -> Result<Self> {
        let d = |s: &str| parse_day(s);
        Self::new(
            DayRange::new(d(daily.0)?, d(daily.1)?),
            DayRange::new(d(pre_promo.0)?, d(pre_promo.1)?),
            promo.iter().map(|s| d(s)).collect::<Result<_>>()?,
            tz_offset_secs,
        )
    }

    pub fn day_of(&self, timestamp: i64) -> i64 {
        (timestamp + self.tz_offset_secs).div_euclid(SECONDS_PER_DAY)
    }

    /// UTC timestamp at which `day` begins.
    pub fn day_start(&self, day: i64) -> i64 {
        day * SECONDS_PER_DAY - self.tz_offset_secs
    }

    pub fn first_promo_day(&self) -> i64 {
        *self.promo_days.first().expect("validated non-empty")
    }

    pub fn promo_start(&self) -> i64 {
        self.day_start(self.first_promo_day())
    }

    pub fn is_promo_day(&self, day: i64) -> bool {
        self.promo_days.contains(&day)
    }

    pub fn phase_of_day(&self, day: i64) -> Phase {
        if self.daily_train.contains(day) {
            Phase::Daily
        } else if self.pre_promo.contains(day) {
            Phase::PrePromo
        } else if self.is_promo_day(day) {
            Phase::Promo
        } else {
            Phase::Outside
        }
    }
}

/// Days since the Unix epoch for an ISO date.
pub fn parse_day(s: &str) -> Result<i64> {
    let date = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::config(format!("bad date {s:?}: {e}")))?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
    Ok((date - epoch).num_days())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taobao() -> PromotionCalendar {
        PromotionCalendar::from_dates(
            ("2017-11-25", "2017-11-28"),
            ("2017-11-29", "2017-12-01"),
            &["2017-12-02", "2017-12-03"],
            8 * 3600,
        )
        .unwrap()
    }

    #[test]
    fn phases() {
        let cal = taobao();
        let nov29 = parse_day("2017-11-29").unwrap();
        assert_eq!(cal.phase_of_day(nov29), Phase::PrePromo);
        assert_eq!(cal.phase_of_day(nov29 - 1), Phase::Daily);
        assert_eq!(cal.phase_of_day(nov29 + 3), Phase::Promo);
        assert_eq!(cal.phase_of_day(nov29 + 10), Phase::Outside);
    }

    #[test]
    fn day_boundaries_respect_offset() {
        let cal = taobao();
        let day = parse_day("2017-12-02").unwrap();
        let start = cal.day_start(day);
        assert_eq!(cal.day_of(start), day);
        assert_eq!(cal.day_of(start - 1), day - 1);
        assert_eq!(cal.promo_start(), start);
    }

    #[test]
    fn rejects_unordered_ranges() {
        let err = PromotionCalendar::new(
            DayRange::new(10, 20),
            DayRange::new(15, 25),
            [30].into_iter().collect(),
            0,
        );
        assert!(err.is_err());
        let err = PromotionCalendar::new(DayRange::new(1, 2), DayRange::new(3, 4), BTreeSet::new(), 0);
        assert!(err.is_err());
    }
}
