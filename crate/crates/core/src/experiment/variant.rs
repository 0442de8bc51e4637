use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::cmdcm::{CmdcmConfig, GateMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PretrainedOnly,
    NaiveFinetune,
    ReuseRelabel,
    Cmdcm,
    WoAllcvr,
    WoPg,
    WoCm,
    WoCcra,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::PretrainedOnly,
        Variant::NaiveFinetune,
        Variant::ReuseRelabel,
        Variant::Cmdcm,
        Variant::WoAllcvr,
        Variant::WoPg,
        Variant::WoCm,
        Variant::WoCcra,
    ];

    pub const BASELINES: [Variant; 3] = [Variant::PretrainedOnly, Variant::NaiveFinetune, Variant::ReuseRelabel];

    pub const ABLATION: [Variant; 5] = [
        Variant::Cmdcm,
        Variant::WoAllcvr,
        Variant::WoPg,
        Variant::WoCm,
        Variant::WoCcra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PretrainedOnly => "pretrained_only",
            Variant::NaiveFinetune => "naive_finetune",
            Variant::ReuseRelabel => "reuse_relabel",
            Variant::Cmdcm => "cmdcm",
            Variant::WoAllcvr => "wo_allcvr",
            Variant::WoPg => "wo_pg",
            Variant::WoCm => "wo_cm",
            Variant::WoCcra => "wo_ccra",
        }
    }

    /// What a variant trains, derived from the base model settings.
    pub fn plan(self, base: &ModelConfig) -> Plan {
        let full = CmdcmConfig {
            lambda: base.lambda,
            lambda_c: base.lambda_c,
            cm_on_atc_only: base.cm_on_atc_only,
            gates: base.gate_mode(),
            transfer: true,
            embed_dim: base.embed_dim,
        };
        let tower = |cfg: CmdcmConfig, imputation: bool| Plan::DelayTower { cfg, imputation };
        match self {
            Variant::PretrainedOnly => Plan::PretrainedOnly,
            Variant::ReuseRelabel => Plan::Relabel,
            Variant::NaiveFinetune => tower(
                CmdcmConfig {
                    lambda: 0.0,
                    lambda_c: 0.0,
                    gates: GateMode::Ones,
                    transfer: false,
                    ..full
                },
                false,
            ),
            Variant::Cmdcm => tower(full.clone(), full.lambda_c > 0.0),
            Variant::WoAllcvr => tower(CmdcmConfig { lambda: 0.0, ..full.clone() }, full.lambda_c > 0.0),
            Variant::WoPg => tower(
                CmdcmConfig {
                    gates: GateMode::Ones,
                    ..full.clone()
                },
                full.lambda_c > 0.0,
            ),
            Variant::WoCm => tower(CmdcmConfig { lambda_c: 0.0, ..full }, false),
            Variant::WoCcra => tower(CmdcmConfig { lambda_c: 0.0, ..full }, false),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Training recipe of one variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    /// No fine-tuning; every metric scores `p_ori_cvr`.
    PretrainedOnly,
    /// Unfrozen copy of the pretrained CVR tower fine-tuned on `y_all`.
    Relabel,
    /// Delay tower with the given loss and gating; `imputation` says whether
    /// the regularizer targets (and so the imputation model) are needed.
    DelayTower { cfg: CmdcmConfig, imputation: bool },
}
