use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::metrics::ClassCounts;
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub auc_all: f64,
    pub auc_delay: f64,
    pub nll_delay: f64,
    pub counts: ClassCounts,
    /// Mean training loss of the last fine-tuning epoch, when there was one.
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub auc_all: MeanStd,
    pub auc_delay: MeanStd,
    pub nll_delay: MeanStd,
}

/// Paired comparison of one metric between a variant and the baseline,
/// matched by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub variant: String,
    pub baseline: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: u32,
    pub runs: Vec<MetricReport>,
    pub summary: Vec<VariantSummary>,
    pub comparisons: Vec<PairedComparison>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Two-sided one-sample t-test of `deltas` against zero: `(t, p)`.
///
/// `None` with fewer than two values. Identical nonzero deltas give an
/// infinite statistic and p = 0; all-zero deltas give p = 1.
pub fn paired_t_test(deltas: &[f64]) -> Option<(f64, f64)> {
    if deltas.len() < 2 {
        return None;
    }
    let MeanStd { mean, std } = MeanStd::of(deltas);
    let n = deltas.len() as f64;
    if std == 0.0 {
        return Some(if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) });
    }
    let t = mean / (std / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).ok()?;
    Some((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

fn metric_of(r: &MetricReport, metric: &str) -> f64 {
    match metric {
        "auc_all" => r.auc_all,
        "auc_delay" => r.auc_delay,
        _ => r.nll_delay,
    }
}

pub const METRICS: [&str; 3] = ["auc_all", "auc_delay", "nll_delay"];

fn variants_in_order(runs: &[MetricReport]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in runs {
        if !names.contains(&r.variant) {
            names.push(r.variant.clone());
        }
    }
    names
}

pub fn summarize(runs: &[MetricReport]) -> Vec<VariantSummary> {
    variants_in_order(runs)
        .into_iter()
        .map(|v| {
            let rows: Vec<&MetricReport> = runs.iter().filter(|r| r.variant == v).collect();
            let col = |m: &str| MeanStd::of(&rows.iter().map(|r| metric_of(r, m)).collect::<Vec<_>>());
            VariantSummary {
                seeds: rows.iter().map(|r| r.seed).collect(),
                auc_all: col("auc_all"),
                auc_delay: col("auc_delay"),
                nll_delay: col("nll_delay"),
                variant: v,
            }
        })
        .collect()
}

/// Per-seed deltas (variant − baseline) for every metric and every other variant.
pub fn compare(runs: &[MetricReport], baseline: &str) -> Vec<PairedComparison> {
    let mut out = Vec::new();
    for v in variants_in_order(runs) {
        if v == baseline {
            continue;
        }
        for metric in METRICS {
            let mut seeds = Vec::new();
            let mut deltas = Vec::new();
            for r in runs.iter().filter(|r| r.variant == v) {
                if let Some(b) = runs.iter().find(|b| b.variant == baseline && b.seed == r.seed) {
                    seeds.push(r.seed);
                    deltas.push(metric_of(r, metric) - metric_of(b, metric));
                }
            }
            if deltas.is_empty() {
                continue;
            }
            let test = paired_t_test(&deltas);
            out.push(PairedComparison {
                variant: v.clone(),
                baseline: baseline.to_string(),
                metric: metric.to_string(),
                mean_delta: MeanStd::of(&deltas).mean,
                t_statistic: test.map(|t| t.0),
                p_value: test.map(|t| t.1),
                significant: test.is_some_and(|t| t.1 < 0.05),
                seeds,
                deltas,
            });
        }
    }
    out
}

pub fn build_document(runs: &[MetricReport], baseline: Option<&str>) -> ReportDocument {
    ReportDocument {
        version: REPORT_VERSION,
        runs: runs.to_vec(),
        summary: summarize(runs),
        comparisons: baseline.map(|b| compare(runs, b)).unwrap_or_default(),
    }
}

const CSV_HEADER: [&str; 11] = [
    "variant",
    "seed",
    "config_hash",
    "auc_all",
    "auc_delay",
    "nll_delay",
    "samples",
    "delayed",
    "direct",
    "non_conversions",
    "final_train_loss",
];

pub fn write_runs_csv(runs: &[MetricReport], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.auc_all.to_string(),
            r.auc_delay.to_string(),
            r.nll_delay.to_string(),
            r.counts.samples.to_string(),
            r.counts.delayed.to_string(),
            r.counts.direct.to_string(),
            r.counts.non_conversions.to_string(),
            r.final_train_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv(reader: impl Read) -> Result<Vec<MetricReport>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| Error::data(format!("bad number {:?} in report column {}", get(i), CSV_HEADER[i])))
        };
        let int = |i: usize| -> Result<usize> {
            get(i)
                .parse()
                .map_err(|_| Error::data(format!("bad count {:?} in report column {}", get(i), CSV_HEADER[i])))
        };
        out.push(MetricReport {
            variant: get(0).to_string(),
            seed: int(1)? as u64,
            config_hash: get(2).to_string(),
            auc_all: num(3)?,
            auc_delay: num(4)?,
            nll_delay: num(5)?,
            counts: ClassCounts {
                samples: int(6)?,
                delayed: int(7)?,
                direct: int(8)?,
                non_conversions: int(9)?,
            },
            final_train_loss: if get(10).is_empty() { None } else { Some(num(10)?) },
        });
    }
    Ok(out)
}

/// One row per variant with the metric means, in run order.
pub fn write_table_csv(summary: &[VariantSummary], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "variant",
        "auc_all_mean",
        "auc_all_std",
        "auc_delay_mean",
        "auc_delay_std",
        "nll_delay_mean",
        "nll_delay_std",
    ])?;
    for s in summary {
        w.write_record([
            s.variant.clone(),
            format!("{:.6}", s.auc_all.mean),
            format!("{:.6}", s.auc_all.std),
            format!("{:.6}", s.auc_delay.mean),
            format!("{:.6}", s.auc_delay.std),
            format!("{:.6}", s.nll_delay.mean),
            format!("{:.6}", s.nll_delay.std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Variant names from a table written by [`write_table_csv`].
pub fn read_table_variants(reader: impl Read) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.records()
        .map(|r| Ok(r?.get(0).unwrap_or_default().to_string()))
        .collect()
}

/// Writes all runs (JSON document with summary and comparisons, or the
/// per-run CSV table) to `path`.
pub fn emit_report(runs: &[MetricReport], baseline: Option<&str>, format: ReportFormat, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, &build_document(runs, baseline))?;
            w.write_all(b"\n")?;
        }
        ReportFormat::Csv => write_runs_csv(runs, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: &str, seed: u64, auc_delay: f64) -> MetricReport {
        MetricReport {
            variant: variant.into(),
            seed,
            config_hash: "abc".into(),
            auc_all: 0.7,
            auc_delay,
            nll_delay: 0.1 + auc_delay / 10.0,
            counts: ClassCounts {
                samples: 10,
                delayed: 2,
                direct: 1,
                non_conversions: 7,
            },
            final_train_loss: (variant != "base").then_some(0.25),
        }
    }

    #[test]
    fn t_test_matches_hand_value() {
        // deltas 1,2,3: mean 2, sd 1, t = 2·√3, df 2 → p = 0.0741799... (scipy ttest_1samp)
        let (t, p) = paired_t_test(&[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((p - 0.074_179_900_227_448_53).abs() < 1e-9, "{p}");
        assert_eq!(paired_t_test(&[0.0, 0.0]), Some((0.0, 1.0)));
        assert_eq!(paired_t_test(&[1.0]), None);
    }

    #[test]
    fn json_has_summary_and_comparison() {
        let runs: Vec<_> = (1..=5)
            .flat_map(|s| [run("base", s, 0.6), run("model", s, 0.6 + 0.01 * s as f64)])
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&runs, Some("base"), ReportFormat::Json, &path).unwrap();
        let doc: ReportDocument = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc.version, REPORT_VERSION);
        assert_eq!(doc.summary.len(), 2);
        assert_eq!(doc.summary[1].seeds, vec![1, 2, 3, 4, 5]);
        let c = doc.comparisons.iter().find(|c| c.metric == "auc_delay").unwrap();
        assert!(c.significant && c.mean_delta > 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let runs = vec![run("base", 1, 0.612345678), run("model", 1, 0.7)];
        let mut buf = Vec::new();
        write_runs_csv(&runs, &mut buf).unwrap();
        assert_eq!(read_runs_csv(buf.as_slice()).unwrap(), runs);
    }

    #[test]
    fn table_lists_variants() {
        let runs = vec![run("a", 1, 0.6), run("b", 1, 0.6), run("a", 2, 0.5)];
        let mut buf = Vec::new();
        write_table_csv(&summarize(&runs), &mut buf).unwrap();
        assert_eq!(read_table_variants(buf.as_slice()).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = emit_report(&[], None, ReportFormat::Csv, Path::new("/nonexistent/dir/r.csv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
