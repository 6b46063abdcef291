//! Declarative run configuration (TOML).
//!
//! Every section is optional; command-line flags override file values, which
//! override built-in presets. See the README for the full schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approximations::{Ensemble, EnsembleSpec, MemberSpec};
use crate::error::{Error, Result};
use crate::targets::{make_energy, make_setting, EnergyTarget2D, MixtureSpec, P1Form, P2Form, SettingId, Target};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub sweep_shift: SweepSection,
    #[serde(default)]
    pub sweep_hier: SweepSection,
    #[serde(default)]
    pub reproduce_511: Reproduce511Section,
    #[serde(default)]
    pub verify: VerifySection,
}

/// Exactly one of `setting`, `energy` or `mixture`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Built-in id: `i`, `ii`, `iii`, `hierarchical`, `p1`, `p2`.
    pub setting: Option<String>,
    /// `{ variant = "p1" | "p2", form = "as-printed" | "squared-exponent" | "reference" }`.
    pub energy: Option<EnergyTarget2D>,
    pub mixture: Option<MixtureSpec>,
    /// Constant added to the log-density.
    pub offset: Option<f64>,
    pub name: Option<String>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        let chosen = [self.setting.is_some(), self.energy.is_some(), self.mixture.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if chosen != 1 {
            return Err(Error::Config(
                "[target] needs exactly one of `setting`, `energy`, `mixture`".into(),
            ));
        }
        let mut t = if let Some(id) = &self.setting {
            parse_target_id(id)?
        } else if let Some(e) = self.energy {
            make_energy(e)
        } else {
            let name = self.name.clone().unwrap_or_else(|| "mixture".into());
            self.mixture.clone().expect("checked above").build(name)?
        };
        if let Some(c) = self.offset {
            t = t.with_offset(c);
        }
        Ok(t)
    }
}

/// A built-in setting id, optionally with an energy form: `p1:reference`, `p2:as-printed`.
pub fn parse_target_id(id: &str) -> Result<Target> {
    let Some((variant, form)) = id.split_once(':') else {
        return Ok(make_setting(id.parse::<SettingId>()?));
    };
    let bad_form = || Error::Config(format!("unknown form '{form}' for {variant}"));
    let energy = match variant {
        "p1" => EnergyTarget2D::P1(match form {
            "as-printed" => P1Form::AsPrinted,
            "squared-exponent" => P1Form::SquaredExponent,
            "reference" => P1Form::Reference,
            _ => return Err(bad_form()),
        }),
        "p2" => EnergyTarget2D::P2(match form {
            "as-printed" => P2Form::AsPrinted,
            "reference" => P2Form::Reference,
            _ => return Err(bad_form()),
        }),
        _ => return Err(Error::Config(format!("only p1 and p2 take a form, got '{id}'"))),
    };
    Ok(make_energy(energy))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub iterations: Option<usize>,
    pub samples_per_iter: Option<usize>,
    pub lr: Option<f64>,
    pub allow_finite_difference: Option<bool>,
    pub fd_step: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub replicates: Option<usize>,
    /// Estimator names, e.g. `miselbo`, `avg_iwelbo`, `elbo:q1`.
    pub estimators: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Shift sweep only: `i`, `ii` or `iii`.
    pub setting: Option<String>,
    pub grid: Option<Vec<f64>>,
    #[serde(rename = "L")]
    pub l_list: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub samples_per_point: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reproduce511Section {
    /// `p1` or `p2`.
    pub variant: Option<String>,
    /// `full` or `smoke`.
    pub budget: Option<String>,
    pub eval_samples: Option<usize>,
    pub eval_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub n_configs: Option<usize>,
    pub replicates: Option<usize>,
    pub batch_l: Option<usize>,
    #[serde(rename = "L")]
    pub l_list: Option<Vec<usize>>,
    pub n_gradient_configs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn ensemble(&self) -> Result<Option<Ensemble>> {
        if self.members.is_empty() {
            return Ok(None);
        }
        EnsembleSpec {
            members: self.members.clone(),
        }
        .build()
        .map(Some)
    }
}

/// Reads an ensemble from TOML (`[[members]]` tables) or JSON (as written by `fit`).
pub fn load_ensemble(path: &Path) -> Result<Ensemble> {
    let text = std::fs::read_to_string(path)?;
    let spec: EnsembleSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    spec.build()
}
