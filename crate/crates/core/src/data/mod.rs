//! Event schema, promotion calendar, labels, sequences, partitioning and ingestion.

mod encode;
mod events;
mod ingest;
mod labels;
mod partition;

pub use encode::{EncodedSample, FeatureEncoder, Vocab, DISCOUNT_BUCKETS, PRICE_BUCKETS};
pub use events::{parse_day, ActionEvent, ActionKind, DayRange, Phase, PromotionCalendar, SECONDS_PER_DAY};
pub use ingest::{ingest_csv, ingest_reader, write_events_csv, CsvSchema, IngestReport};
pub use labels::{
    attribute_purchases, build_behavior_sequences, build_samples, derive_atc_indicator, derive_labels,
    AtcWindow, ClickLabel, ClickSample, Features, LabelOptions, LabeledSamples, DEFAULT_MAX_SEQ_LEN,
};
pub use partition::{partition_dataset, partition_items, train_count, DatasetSplit};
