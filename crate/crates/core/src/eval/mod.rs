mod metrics;
mod report;

pub use metrics::{auc, auc_all, auc_counts, auc_delay, constant_rate_nll, nll_delay, ClassCounts};
pub use report::{
    build_document, compare, emit_report, paired_t_test, read_runs_csv, read_table_variants, summarize,
    write_runs_csv, write_table_csv, MeanStd, MetricReport, PairedComparison, ReportDocument, ReportFormat,
    VariantSummary, METRICS, REPORT_VERSION,
};
