use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{builtin_order, SEEN_DOMAINS};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Paper-scale epoch budgets; the run uses `round(epochs × epoch_scale)`.
pub const PROMPT_STAGE_EPOCHS: f64 = 120.0;
pub const VISUAL_STAGE_EPOCHS: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Sft,
    NoCasp,
    NoCtx,
    NoAkfp,
    NoLproj,
    SinglePrototype,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::Sft,
        Variant::NoCasp,
        Variant::NoCtx,
        Variant::NoAkfp,
        Variant::NoLproj,
        Variant::SinglePrototype,
    ];

    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoCasp,
        Variant::NoCtx,
        Variant::NoAkfp,
        Variant::NoLproj,
        Variant::SinglePrototype,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Sft => "sft",
            Variant::NoCasp => "no_casp",
            Variant::NoCtx => "no_ctx",
            Variant::NoAkfp => "no_akfp",
            Variant::NoLproj => "no_lproj",
            Variant::SinglePrototype => "single_prototype",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown variant `{s}`")]))
    }
}

/// Everything a run depends on. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Built-in learning order (1..=6); ignored when `domains` is set.
    pub order: usize,
    pub domains: Option<Vec<String>>,
    pub epoch_scale: f64,
    pub lambda: f64,
    pub beta: f64,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    pub variant: Variant,
    pub out_dir: String,
    /// Prompt-stage / visual-stage alternations per task.
    pub cycles: usize,
    pub lr_prompt: f64,
    pub lr_visual: f64,
    /// Final learning rate as a fraction of the base rate.
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub state_aux_weight: f64,
    /// Keep `P_base` across tasks instead of re-initialising it.
    pub share_prompts: bool,
    /// Reset prototypes at the start of every task.
    pub reset_prototypes: bool,
    pub eval_heldout: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            order: 1,
            domains: None,
            epoch_scale: 0.1,
            lambda: 0.5,
            beta: 0.001,
            margin: 0.3,
            p: 16,
            k: 4,
            variant: Variant::Full,
            out_dir: "runs".into(),
            cycles: 1,
            lr_prompt: 1e-2,
            lr_visual: 2e-3,
            lr_floor: 0.01,
            warmup_epochs: 1,
            weight_decay: 1e-4,
            state_aux_weight: 0.1,
            share_prompts: true,
            reset_prototypes: false,
            eval_heldout: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn prompt_epochs(&self) -> usize {
        (PROMPT_STAGE_EPOCHS * self.epoch_scale).round() as usize
    }

    pub fn visual_epochs(&self) -> usize {
        (VISUAL_STAGE_EPOCHS * self.epoch_scale).round() as usize
    }

    /// Domain names in training order.
    pub fn sequence(&self) -> Result<Vec<String>> {
        match &self.domains {
            Some(d) => Ok(d.clone()),
            None => Ok(builtin_order(self.order)?.domains),
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bad.push(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.domains.is_none() && !(1..=6).contains(&self.order) {
            bad.push(format!("order: must be in 1..=6, got {}", self.order));
        }
        if let Some(d) = &self.domains {
            if d.is_empty() {
                bad.push("domains: must name at least one domain".into());
            }
            for name in d {
                if !SEEN_DOMAINS.iter().any(|(n, _)| n == name) {
                    bad.push(format!("domains: unknown seen domain `{name}`"));
                }
            }
            let mut sorted = d.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != d.len() {
                bad.push("domains: repeated domain".into());
            }
        }
        if !(self.epoch_scale.is_finite() && self.epoch_scale >= 0.0) {
            bad.push(format!("epoch_scale: must be >= 0, got {}", self.epoch_scale));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            bad.push(format!("lambda: must be >= 0, got {}", self.lambda));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            bad.push(format!("beta: must be in (0, 1], got {}", self.beta));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            bad.push(format!("margin: must be >= 0, got {}", self.margin));
        }
        if self.p < 2 {
            bad.push(format!("p: need at least 2 identities per batch, got {}", self.p));
        }
        if self.k < 2 {
            bad.push(format!("k: need at least 2 samples per identity, got {}", self.k));
        }
        if self.cycles == 0 {
            bad.push("cycles: must be >= 1".into());
        }
        for (name, v) in [("lr_prompt", self.lr_prompt), ("lr_visual", self.lr_visual)] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{name}: must be > 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            bad.push(format!("lr_floor: must be in [0, 1], got {}", self.lr_floor));
        }
        if self.visual_epochs() > 0 && self.warmup_epochs >= self.visual_epochs() {
            bad.push(format!(
                "warmup_epochs: must be below the visual-stage epochs ({}), got {}",
                self.visual_epochs(),
                self.warmup_epochs
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        if !(self.state_aux_weight.is_finite() && self.state_aux_weight >= 0.0) {
            bad.push(format!("state_aux_weight: must be >= 0, got {}", self.state_aux_weight));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
