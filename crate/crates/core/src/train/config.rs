//! Training configuration: profile defaults, then a TOML file, then
//! `section.key = value` overrides, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::model::ModelConfig;
use crate::ot::SinkhornConfig;
use crate::profile::Profile;
use crate::proposals::ProposalConfig;
use crate::views::{AugmentConfig, ViewConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Dataset root holding `manifest.toml`.
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Starting EMA momentum; rises to 1 on a cosine schedule.
    pub m0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub optim: OptimConfig,
    pub loss: LossTerms,
    pub sinkhorn: SinkhornConfig,
    pub model: ModelConfig,
    pub views: ViewConfig,
    pub augment: AugmentConfig,
    pub proposals: ProposalConfig,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let views = ViewConfig::for_profile(profile);
        TrainConfig {
            run: RunConfig {
                profile,
                seed: 0,
                data: PathBuf::from("data"),
                out_dir: PathBuf::from("run"),
            },
            optim: OptimConfig {
                epochs: 20,
                warmup_epochs: 1,
                batch_size: 32,
                base_lr: 0.05,
                weight_decay: 1e-4,
                momentum: 0.9,
                m0: 0.99,
            },
            loss: LossTerms::default(),
            sinkhorn: SinkhornConfig::default(),
            model: ModelConfig {
                k: views.k,
                ..ModelConfig::default()
            },
            views,
            augment: AugmentConfig::for_profile(profile),
            proposals: ProposalConfig::for_profile(profile),
        }
    }

    /// Defaults for the profile named in `text` (or `overrides`), then
    /// `text`, then the overrides.
    pub fn from_toml(text: &str, origin: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, origin, e))?;
        let profile = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "run.profile")
            .map(|(_, v)| v.clone())
            .or_else(|| {
                file.get("run")
                    .and_then(|r| r.get("profile"))
                    .and_then(|p| p.as_str())
                    .map(str::to_string)
            })
            .map(|p| p.parse::<Profile>())
            .transpose()?
            .unwrap_or_default();
        let mut merged = toml::Table::try_from(TrainConfig::for_profile(profile))
            .map_err(|e| Error::InvalidArgument(format!("defaults do not serialize: {e}")))?;
        let explicit_model_k =
            file.get("model").and_then(|m| m.get("k")).is_some() || overrides.iter().any(|(k, _)| k == "model.k");
        merge(&mut merged, file);
        for (key, value) in overrides {
            set_path(&mut merged, key, value)?;
        }
        // fusion width follows the instance count unless pinned
        if !explicit_model_k {
            let k = merged.get("views").and_then(|v| v.get("k")).cloned();
            if let (Some(k), Some(toml::Value::Table(m))) = (k, merged.get_mut("model")) {
                m.insert("k".into(), k);
            }
        }
        let rendered = toml::to_string(&merged).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let cfg: TrainConfig = toml::from_str(&rendered).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            column: 0,
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(o.base_lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.momentum)) {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {o:?}")));
        }
        if !(0.0..1.0).contains(&o.m0) {
            return Err(Error::InvalidArgument(format!("m0 {} outside [0, 1)", o.m0)));
        }
        if self.model.k != self.views.k {
            return Err(Error::InvalidArgument(format!(
                "model.k = {} but views.k = {}",
                self.model.k, self.views.k
            )));
        }
        self.loss.validate()?;
        self.sinkhorn.validate()?;
        self.model.validate()?;
        self.views.validate()?;
        self.augment.validate()?;
        self.proposals.filter.validate()
    }
}

fn parse_error(text: &str, origin: &Path, e: toml::de::Error) -> Error {
    let (line, column) = e
        .span()
        .map(|s| {
            let before = &text[..s.start.min(text.len())];
            (
                before.matches('\n').count() + 1,
                s.start - before.rfind('\n').map_or(0, |p| p + 1) + 1,
            )
        })
        .unwrap_or((1, 1));
    Error::Parse {
        path: origin.to_path_buf(),
        line,
        column,
        message: e.message().to_string(),
    }
}

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

/// Parse `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::InvalidArgument(format!("unknown config key `{key}`"));
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            if !cur.contains_key(part) {
                return Err(unknown());
            }
            cur.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        cur = match cur.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}
