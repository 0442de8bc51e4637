use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::variant::Variant;
use crate::causal::CausalConfig;
use crate::cmdcm::GateMode;
use crate::data::{CsvSchema, LabelOptions, PromotionCalendar, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::pretrain::ArchConfig;
use crate::synth::{WorldConfig, SYNTH_DAILY_START, SYNTH_PREPROMO_START, SYNTH_PROMO_DAY};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::config(format!("unknown profile {other:?} (expected desk or full)"))),
        }
    }
}

/// Calendar given as ISO dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalendarConfig {
    pub daily_start: String,
    pub daily_end: String,
    pub prepromo_start: String,
    pub prepromo_end: String,
    pub promo_days: Vec<String>,
    pub tz_offset_secs: i64,
}

impl Default for CalendarConfig {
    fn default() -> Self {
        Self {
            daily_start: "2017-11-25".into(),
            daily_end: "2017-11-28".into(),
            prepromo_start: "2017-11-29".into(),
            prepromo_end: "2017-12-01".into(),
            promo_days: vec!["2017-12-02".into()],
            tz_offset_secs: 8 * 3600,
        }
    }
}

impl CalendarConfig {
    /// The phases of synthetic event logs, in UTC.
    pub fn synthetic() -> Self {
        let iso = |day: i64| {
            chrono::DateTime::from_timestamp(day * SECONDS_PER_DAY, 0)
                .expect("synthetic days are in range")
                .format("%Y-%m-%d")
                .to_string()
        };
        Self {
            daily_start: iso(SYNTH_DAILY_START),
            daily_end: iso(SYNTH_PREPROMO_START - 1),
            prepromo_start: iso(SYNTH_PREPROMO_START),
            prepromo_end: iso(SYNTH_PROMO_DAY - 1),
            promo_days: vec![iso(SYNTH_PROMO_DAY)],
            tz_offset_secs: 0,
        }
    }

    pub fn build(&self) -> Result<PromotionCalendar> {
        let promo: Vec<&str> = self.promo_days.iter().map(String::as_str).collect();
        PromotionCalendar::from_dates(
            (&self.daily_start, &self.daily_end),
            (&self.prepromo_start, &self.prepromo_end),
            &promo,
            self.tz_offset_secs,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub mode: DataMode,
    pub seeds: Vec<u64>,
    pub split_ratio: f64,
    /// Seed of the synthetic world; the run seeds only redraw data from it.
    pub world_seed: u64,
    pub n_daily: usize,
    pub n_prepromo: usize,
    pub world: WorldConfig,
    pub events_path: Option<PathBuf>,
    pub schema: CsvSchema,
    pub calendar: CalendarConfig,
    pub labels: LabelOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mode: DataMode::Synthetic,
            seeds: vec![1, 2, 3, 4, 5],
            split_ratio: 0.8,
            world_seed: 2024,
            n_daily: 100_000,
            n_prepromo: 100_000,
            world: WorldConfig::default(),
            events_path: None,
            schema: CsvSchema::default(),
            calendar: CalendarConfig::default(),
            labels: LabelOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub lambda: f64,
    pub lambda_c: f64,
    pub cm_on_atc_only: bool,
    /// Personalized gates on (`true`) or all gates fixed at one.
    pub gates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            hidden: arch.hidden,
            embed_dim: arch.embed_dim,
            lambda: 1.0,
            lambda_c: 0.1,
            cm_on_atc_only: false,
            gates: true,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn gate_mode(&self) -> GateMode {
        if self.gates {
            GateMode::Personalized
        } else {
            GateMode::Ones
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nll_exclude_direct: bool,
    /// Variant the paired comparisons are measured against.
    pub baseline: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nll_exclude_direct: false,
            baseline: "cmdcm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub causal: CausalConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub variants: Vec<Variant>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            causal: CausalConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
            variants: Variant::ALL.to_vec(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            ..Self::default()
        };
        if profile == Profile::Full {
            let arch = ArchConfig::full();
            cfg.model.hidden = arch.hidden;
            cfg.model.embed_dim = arch.embed_dim;
            cfg.causal.embed_dim = arch.embed_dim;
            cfg.training = TrainConfig::full();
        }
        cfg
    }

    /// Parses TOML. Keys left out take the defaults of the profile named in
    /// the file (or `profile_override`), unknown keys are rejected.
    pub fn from_toml(text: &str, profile_override: Option<Profile>) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        let named = match value.get("profile") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::config("profile must be a string"))?
                .parse()?,
            None => Profile::Desk,
        };
        let profile = profile_override.unwrap_or(named);
        let mut base = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::config(format!("default config: {e}")))?;
        merge(&mut base, value);
        base.insert("profile".into(), toml::Value::String(profile_name(profile).into()));
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, profile_override).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.arch().validate()?;
        self.causal.validate()?;
        self.training.validate()?;
        if self.dataset.seeds.is_empty() {
            return Err(Error::config("dataset.seeds must not be empty"));
        }
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return Err(Error::config(format!("split_ratio {} not in (0, 1)", self.dataset.split_ratio)));
        }
        for (name, v) in [("lambda", self.model.lambda), ("lambda_c", self.model.lambda_c)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(format!("model.{name} = {v} must be >= 0")));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants must not be empty"));
        }
        match self.dataset.mode {
            DataMode::Synthetic => {
                if self.dataset.n_daily == 0 || self.dataset.n_prepromo == 0 {
                    return Err(Error::config("synthetic n_daily and n_prepromo must be >= 1"));
                }
            }
            DataMode::Csv => {
                if self.dataset.events_path.is_none() {
                    return Err(Error::config("dataset.events_path is required in csv mode"));
                }
                self.dataset.calendar.build()?;
            }
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form, recorded with every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Full => "full",
    }
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_default() {
        let cfg = ExperimentConfig::from_toml("", None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.dataset.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.model.hidden, vec![32, 16, 8]);
    }

    #[test]
    fn full_profile() {
        let cfg = ExperimentConfig::from_toml("profile = \"full\"\n", None).unwrap();
        assert_eq!(cfg.model.hidden, vec![512, 256, 128]);
        assert_eq!((cfg.training.lr, cfg.training.batch_size), (0.001, 1024));
        let forced = ExperimentConfig::from_toml("", Some(Profile::Full)).unwrap();
        assert_eq!(forced.training.batch_size, 1024);
    }

    #[test]
    fn overrides_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml("[model]\nlambda_c = 0.5\n[dataset.world]\ntau = 0.0\n", None).unwrap();
        assert_eq!(cfg.model.lambda_c, 0.5);
        assert_eq!(cfg.model.lambda, 1.0);
        assert_eq!(cfg.dataset.world.tau, 0.0);
        assert_eq!(cfg.dataset.world.d, 16);
    }

    #[test]
    fn unknown_key_named() {
        let err = ExperimentConfig::from_toml("[model]\nlambada = 1.0\n", None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lambada"), "{err}");
        let err = ExperimentConfig::from_toml("bogus = 1\n", None).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn csv_mode_needs_path() {
        assert!(ExperimentConfig::from_toml("[dataset]\nmode = \"csv\"\n", None).is_err());
    }
}
