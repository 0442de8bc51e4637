//! Click samples and their conversion labels.
//!
//! A pre-promotion click is a *direct* conversion when the same user buys the
//! same item on the click's own day, a *delayed* conversion when the purchase
//! lands on a promotion day, and a non-conversion otherwise. Each purchase is
//! credited to the latest click of the same (user, item) at or before it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::events::{ActionEvent, ActionKind, Phase, PromotionCalendar};

pub const DEFAULT_MAX_SEQ_LEN: usize = 50;

/// Model-facing attributes of a click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub user_id: String,
    pub item_id: String,
    pub category_id: String,
    pub price: f64,
    pub discount: f64,
    pub click_day: i64,
    /// Numeric profile/context features, empty for plain behaviour logs.
    #[serde(default)]
    pub dense: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickSample {
    pub features: Features,
    pub click_ts: i64,
    /// Add-to-cart indicator (the treatment).
    pub atc: bool,
    pub y_all: bool,
    pub y_delay: bool,
    /// Most recent add-to-cart item ids before the click, newest first.
    pub atc_seq: Vec<String>,
    /// Most recent purchased item ids before the click, newest first.
    pub pay_seq: Vec<String>,
}

impl ClickSample {
    pub fn is_direct(&self) -> bool {
        self.y_all && !self.y_delay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLabel {
    pub y_all: bool,
    pub y_delay: bool,
}

impl ClickLabel {
    pub const NONE: ClickLabel = ClickLabel {
        y_all: false,
        y_delay: false,
    };
    pub const DIRECT: ClickLabel = ClickLabel {
        y_all: true,
        y_delay: false,
    };
    pub const DELAYED: ClickLabel = ClickLabel {
        y_all: true,
        y_delay: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelOptions {
    /// Count purchases between the click day and the promotion as `y_all = 1`.
    pub count_intermediate_as_all: bool,
    pub max_seq_len: usize,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            count_intermediate_as_all: false,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

/// For every purchase, the index (into `clicks`) of the click it is credited
/// to: the latest click of the same (user, item) with `ts <= purchase ts`,
/// ties broken by position in `clicks`.
pub fn attribute_purchases(clicks: &[ActionEvent], purchases: &[ActionEvent]) -> Vec<Option<usize>> {
    let mut by_pair: HashMap<(&str, &str), Vec<(i64, usize)>> = HashMap::new();
    for (i, c) in clicks.iter().enumerate() {
        by_pair
            .entry((c.user_id.as_str(), c.item_id.as_str()))
            .or_default()
            .push((c.timestamp, i));
    }
    for list in by_pair.values_mut() {
        list.sort_unstable();
    }
    purchases
        .iter()
        .map(|p| {
            let list = by_pair.get(&(p.user_id.as_str(), p.item_id.as_str()))?;
            let cut = list.partition_point(|&(ts, _)| ts <= p.timestamp);
            cut.checked_sub(1).map(|k| list[k].1)
        })
        .collect()
}

/// Labels every click. `None` marks clicks that yield no sample: promotion-day
/// clicks and clicks outside both training windows.
///
/// Daily clicks only ever receive same-day conversion labels. For
/// pre-promotion clicks the earliest qualifying credited purchase decides.
pub fn derive_labels(
    clicks: &[ActionEvent],
    purchases: &[ActionEvent],
    calendar: &PromotionCalendar,
    opts: &LabelOptions,
) -> Vec<Option<ClickLabel>> {
    let credit = attribute_purchases(clicks, purchases);
    let mut credited: Vec<Vec<i64>> = vec![Vec::new(); clicks.len()];
    for (p, c) in purchases.iter().zip(&credit) {
        if let Some(c) = c {
            credited[*c].push(p.timestamp);
        }
    }

    clicks
        .iter()
        .zip(credited.iter_mut())
        .map(|(click, buys)| {
            let click_day = calendar.day_of(click.timestamp);
            let phase = calendar.phase_of_day(click_day);
            if !matches!(phase, Phase::Daily | Phase::PrePromo) {
                return None;
            }
            buys.sort_unstable();
            for &ts in buys.iter() {
                let buy_day = calendar.day_of(ts);
                if buy_day == click_day {
                    return Some(ClickLabel::DIRECT);
                }
                if phase == Phase::Daily {
                    continue;
                }
                if calendar.is_promo_day(buy_day) {
                    return Some(ClickLabel::DELAYED);
                }
                if opts.count_intermediate_as_all && buy_day < calendar.first_promo_day() {
                    return Some(ClickLabel::DIRECT);
                }
            }
            Some(ClickLabel::NONE)
        })
        .collect()
}

/// Where an add-to-cart must fall to count for a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtcWindow {
    /// From the click to the end of the click's day (daily training data).
    SameDay,
    /// From the click up to the start of the first promotion day.
    UntilPromo,
}

/// `atc_times` are the add-to-cart timestamps of the click's (user, item).
pub fn derive_atc_indicator(
    click_ts: i64,
    atc_times: &[i64],
    calendar: &PromotionCalendar,
    window: AtcWindow,
) -> bool {
    let end = match window {
        AtcWindow::SameDay => calendar.day_start(calendar.day_of(click_ts) + 1),
        AtcWindow::UntilPromo => calendar.promo_start(),
    };
    atc_times.iter().any(|&t| t >= click_ts && t < end)
}

/// Item ids of the user's add-to-cart and purchase actions strictly before
/// `click_ts`, newest first, at most `max_len` each. `user_events` must be
/// sorted by timestamp.
pub fn build_behavior_sequences(
    user_events: &[ActionEvent],
    click_ts: i64,
    max_len: usize,
) -> (Vec<String>, Vec<String>) {
    let cut = user_events.partition_point(|e| e.timestamp < click_ts);
    let mut atc = Vec::new();
    let mut pay = Vec::new();
    for e in user_events[..cut].iter().rev() {
        match e.action {
            ActionKind::Atc if atc.len() < max_len => atc.push(e.item_id.clone()),
            ActionKind::Buy if pay.len() < max_len => pay.push(e.item_id.clone()),
            _ => {}
        }
        if atc.len() >= max_len && pay.len() >= max_len {
            break;
        }
    }
    (atc, pay)
}

/// Samples split by the phase of the click day.
#[derive(Debug, Clone, Default)]
pub struct LabeledSamples {
    pub daily: Vec<ClickSample>,
    pub prepromo: Vec<ClickSample>,
}

/// Turns a timestamp-sorted event log into labeled daily and pre-promotion samples.
pub fn build_samples(
    events: &[ActionEvent],
    calendar: &PromotionCalendar,
    opts: &LabelOptions,
) -> LabeledSamples {
    let clicks: Vec<ActionEvent> = events
        .iter()
        .filter(|e| e.action == ActionKind::Click)
        .cloned()
        .collect();
    let purchases: Vec<ActionEvent> = events
        .iter()
        .filter(|e| e.action == ActionKind::Buy)
        .cloned()
        .collect();
    let labels = derive_labels(&clicks, &purchases, calendar, opts);

    let mut atc_times: HashMap<(&str, &str), Vec<i64>> = HashMap::new();
    let mut per_user: BTreeMap<&str, Vec<ActionEvent>> = BTreeMap::new();
    for e in events {
        if e.action == ActionKind::Atc {
            atc_times
                .entry((e.user_id.as_str(), e.item_id.as_str()))
                .or_default()
                .push(e.timestamp);
        }
        per_user.entry(e.user_id.as_str()).or_default().push(e.clone());
    }
    for list in per_user.values_mut() {
        list.sort_by_key(|e| e.timestamp);
    }

    let mut out = LabeledSamples::default();
    for (click, label) in clicks.iter().zip(labels) {
        let Some(label) = label else { continue };
        let day = calendar.day_of(click.timestamp);
        let phase = calendar.phase_of_day(day);
        let window = if phase == Phase::Daily {
            AtcWindow::SameDay
        } else {
            AtcWindow::UntilPromo
        };
        let times = atc_times
            .get(&(click.user_id.as_str(), click.item_id.as_str()))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let atc = derive_atc_indicator(click.timestamp, times, calendar, window);
        let history = per_user
            .get(click.user_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let (atc_seq, pay_seq) = build_behavior_sequences(history, click.timestamp, opts.max_seq_len);
        let sample = ClickSample {
            features: Features {
                user_id: click.user_id.clone(),
                item_id: click.item_id.clone(),
                category_id: click.category_id.clone(),
                price: click.price.unwrap_or(0.0),
                discount: click.discount.unwrap_or(0.0),
                click_day: day,
                dense: Vec::new(),
            },
            click_ts: click.timestamp,
            atc,
            y_all: label.y_all,
            y_delay: label.y_delay,
            atc_seq,
            pay_seq,
        };
        match phase {
            Phase::Daily => out.daily.push(sample),
            _ => out.prepromo.push(sample),
        }
    }
    out
}
