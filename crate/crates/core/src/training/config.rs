use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::human_context::PassMode;
use crate::objectives::CombineRule;

/// Which human context a pre-training run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Plain causal LM.
    #[default]
    None,
    /// Plain LM plus a demographic classifier on pooled hidden states.
    Group,
    /// Recurrent user states (HuLM).
    Individual,
    /// HuLM plus attribute regression from averaged user states.
    GroupIndividual,
}

impl Regime {
    pub fn mode(self) -> PassMode {
        match self {
            Regime::None | Regime::Group => PassMode::Plain,
            Regime::Individual | Regime::GroupIndividual => PassMode::Hulm,
        }
    }

    pub fn needs_attribute(self) -> bool {
        matches!(self, Regime::Group | Regime::GroupIndividual)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Group => "group",
            Regime::Individual => "individual",
            Regime::GroupIndividual => "group_individual",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "group" => Ok(Self::Group),
            "individual" => Ok(Self::Individual),
            "group_individual" => Ok(Self::GroupIndividual),
            other => Err(Error::config(format!(
                "unknown regime {other:?} (none, group, individual, group_individual)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub attribute: Option<String>,
    /// Defaults to binary for `group` and continuous for `group_individual`.
    pub attribute_kind: Option<AttributeKind>,
    /// Defaults to `hung_mtl` for `group` and `grit_unhalved` for
    /// `group_individual`.
    pub combine_rule: Option<CombineRule>,
    pub lr: f64,
    pub epochs: usize,
    pub max_blocks: usize,
    /// Authors per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::None,
            attribute: None,
            attribute_kind: None,
            combine_rule: None,
            lr: 1e-3,
            epochs: 2,
            max_blocks: 8,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl RegimeConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.regime.as_str();
        if self.regime.needs_attribute() {
            if self.attribute.as_deref().is_none_or(str::is_empty) {
                return Err(Error::config(format!("regime {r} requires an attribute")));
            }
        } else if self.attribute.is_some() || self.attribute_kind.is_some() || self.combine_rule.is_some() {
            return Err(Error::config(format!(
                "regime {r} takes no attribute, attribute kind or combine rule"
            )));
        }
        match (self.regime, self.attribute_kind) {
            (Regime::Group, Some(AttributeKind::Continuous)) => {
                return Err(Error::config("regime group classifies a binary attribute"))
            }
            (Regime::GroupIndividual, Some(AttributeKind::Binary)) => {
                return Err(Error::config("regime group_individual regresses a continuous attribute"))
            }
            _ => {}
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_blocks == 0 {
            return Err(Error::config("epochs, batch_size and max_blocks must be positive"));
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<AttributeKind> {
        match self.regime {
            Regime::Group => Some(self.attribute_kind.unwrap_or(AttributeKind::Binary)),
            Regime::GroupIndividual => Some(self.attribute_kind.unwrap_or(AttributeKind::Continuous)),
            _ => None,
        }
    }

    pub fn rule(&self) -> Option<CombineRule> {
        match self.regime {
            Regime::Group => Some(self.combine_rule.unwrap_or(CombineRule::HungMtl)),
            Regime::GroupIndividual => Some(self.combine_rule.unwrap_or(CombineRule::GritUnhalved)),
            _ => None,
        }
    }
}
