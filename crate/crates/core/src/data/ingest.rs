//! CSV ingestion of behaviour logs.
//!
//! The defaults match the public Taobao `UserBehavior.csv` layout:
//! `user,item,category,behavior,timestamp` with no header and behaviours
//! `pv`, `cart`, `fav`, `buy`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{ActionEvent, ActionKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub delimiter: char,
    pub has_header: bool,
    pub user_col: usize,
    pub item_col: usize,
    pub category_col: usize,
    pub action_col: usize,
    pub timestamp_col: usize,
    pub price_col: Option<usize>,
    pub discount_col: Option<usize>,
    /// Raw action string → action kind. Strings not listed are skipped.
    pub actions: BTreeMap<String, ActionKind>,
    /// Abort once more than this many rows fail to parse.
    pub max_malformed: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        let actions = [
            ("pv", ActionKind::Click),
            ("cart", ActionKind::Atc),
            ("fav", ActionKind::Fav),
            ("buy", ActionKind::Buy),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            delimiter: ',',
            has_header: false,
            user_col: 0,
            item_col: 1,
            category_col: 2,
            action_col: 3,
            timestamp_col: 4,
            price_col: None,
            discount_col: None,
            actions,
            max_malformed: 100,
        }
    }
}

impl CsvSchema {
    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(u8::is_ascii)
            .ok_or_else(|| Error::config(format!("delimiter {:?} must be ASCII", self.delimiter)))
    }

    fn action_name(&self, kind: ActionKind) -> Option<&str> {
        self.actions
            .iter()
            .find(|(_, &v)| v == kind)
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub events: Vec<ActionEvent>,
    /// 1-based row numbers that failed to parse.
    pub malformed_rows: Vec<usize>,
    pub unknown_actions: usize,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestReport> {
    let file = File::open(path)?;
    let report = ingest_reader(file, schema)?;
    if report.events.is_empty() {
        log::warn!("{}: no events ingested", path.display());
    }
    Ok(report)
}

/// Parses events from any reader; output is sorted by timestamp (stable).
pub fn ingest_reader(reader: impl Read, schema: &CsvSchema) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(reader);
    let mut report = IngestReport::default();
    let first_row = if schema.has_header { 2 } else { 1 };

    for (i, record) in rdr.records().enumerate() {
        let row = i + first_row;
        let parsed = match record {
            Ok(rec) => parse_record(&rec, schema),
            Err(_) => Err(()),
        };
        match parsed {
            Ok(Some(ev)) => report.events.push(ev),
            Ok(None) => report.unknown_actions += 1,
            Err(()) => {
                report.malformed_rows.push(row);
                if report.malformed_rows.len() > schema.max_malformed {
                    return Err(Error::data(format!(
                        "more than {} malformed rows; rows {:?}",
                        schema.max_malformed, report.malformed_rows
                    )));
                }
            }
        }
    }
    if !report.malformed_rows.is_empty() {
        log::warn!("skipped {} malformed rows", report.malformed_rows.len());
    }
    report.events.sort_by_key(|e| e.timestamp);
    Ok(report)
}

/// `Ok(None)` for an unmapped action string, `Err` for a malformed row.
fn parse_record(rec: &csv::StringRecord, schema: &CsvSchema) -> Result<Option<ActionEvent>, ()> {
    let field = |c: usize| rec.get(c).map(str::trim).ok_or(());
    let user = field(schema.user_col)?;
    let item = field(schema.item_col)?;
    let category = field(schema.category_col)?;
    let action = field(schema.action_col)?;
    let timestamp: i64 = field(schema.timestamp_col)?.parse().map_err(|_| ())?;
    if timestamp <= 0 || user.is_empty() || item.is_empty() {
        return Err(());
    }
    let optional = |c: Option<usize>| -> Result<Option<f64>, ()> {
        match c {
            None => Ok(None),
            Some(c) => {
                let raw = field(c)?;
                if raw.is_empty() {
                    return Ok(None);
                }
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or(())
            }
        }
    };
    let price = optional(schema.price_col)?;
    let discount = optional(schema.discount_col)?;
    let Some(&kind) = schema.actions.get(action) else {
        return Ok(None);
    };
    Ok(Some(ActionEvent {
        user_id: user.to_string(),
        item_id: item.to_string(),
        category_id: category.to_string(),
        action: kind,
        timestamp,
        price,
        discount,
    }))
}

/// Writes events in `schema`'s column layout so [`ingest_csv`] reads them back.
pub fn write_events_csv(events: &[ActionEvent], writer: impl Write, schema: &CsvSchema) -> Result<()> {
    let mut width = [
        schema.user_col,
        schema.item_col,
        schema.category_col,
        schema.action_col,
        schema.timestamp_col,
    ]
    .into_iter()
    .max()
    .unwrap_or(0)
        + 1;
    for c in [schema.price_col, schema.discount_col].into_iter().flatten() {
        width = width.max(c + 1);
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .from_writer(writer);
    if schema.has_header {
        let mut header = vec![String::new(); width];
        header[schema.user_col] = "user_id".into();
        header[schema.item_col] = "item_id".into();
        header[schema.category_col] = "category_id".into();
        header[schema.action_col] = "action".into();
        header[schema.timestamp_col] = "timestamp".into();
        if let Some(c) = schema.price_col {
            header[c] = "price".into();
        }
        if let Some(c) = schema.discount_col {
            header[c] = "discount".into();
        }
        w.write_record(&header)?;
    }
    for e in events {
        let mut row = vec![String::new(); width];
        row[schema.user_col] = e.user_id.clone();
        row[schema.item_col] = e.item_id.clone();
        row[schema.category_col] = e.category_id.clone();
        row[schema.action_col] = schema
            .action_name(e.action)
            .ok_or_else(|| Error::config(format!("schema has no string for action {}", e.action)))?
            .to_string();
        row[schema.timestamp_col] = e.timestamp.to_string();
        if let (Some(c), Some(p)) = (schema.price_col, e.price) {
            row[c] = p.to_string();
        }
        if let (Some(c), Some(d)) = (schema.discount_col, e.discount) {
            row[c] = d.to_string();
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
