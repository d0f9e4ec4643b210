//! Declarative experiment configs (JSON, versioned schema).

use std::fmt;
use std::path::{Path, PathBuf};

use aphom_core::apfield::{builtin_field, field_from_json, CoefficientTensorField};
use aphom_core::ivpsolve::check_resolution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_invalid, CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Corrector,
    Effective,
    Flux,
    Smoothing,
    Rate,
    Modulus,
    LipschitzInterior,
    LipschitzBoundary,
    Fundamental,
    Holder,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::Corrector,
        Kind::Effective,
        Kind::Flux,
        Kind::Smoothing,
        Kind::Rate,
        Kind::Modulus,
        Kind::LipschitzInterior,
        Kind::LipschitzBoundary,
        Kind::Fundamental,
        Kind::Holder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Corrector => "corrector",
            Kind::Effective => "effective",
            Kind::Flux => "flux",
            Kind::Smoothing => "smoothing",
            Kind::Rate => "rate",
            Kind::Modulus => "modulus",
            Kind::LipschitzInterior => "lipschitz-interior",
            Kind::LipschitzBoundary => "lipschitz-boundary",
            Kind::Fundamental => "fundamental",
            Kind::Holder => "holder",
        }
    }

    /// Whether the study needs a coefficient field.
    pub fn needs_field(self) -> bool {
        self != Kind::Smoothing
    }

    /// Check names a config may request.
    pub fn known_checks(self) -> &'static [&'static str] {
        match self {
            Kind::Corrector => &["zero-corrector", "harmonic-mean", "energy-identity", "sup-bound"],
            Kind::Effective => &["elliptic", "cauchy"],
            Kind::Flux => &["decomposition", "skew"],
            Kind::Smoothing => &["young", "gradient-order", "collar"],
            Kind::Rate => &["slope", "monotone", "ratio-spread", "floor"],
            Kind::Modulus => &["eta-monotone", "dini", "periodic-exactness"],
            Kind::LipschitzInterior | Kind::LipschitzBoundary => &["uniform"],
            Kind::Fundamental => &["kappa", "mass", "stable"],
            Kind::Holder => &["uniform"],
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Numeric parameters; which ones a kind needs is checked by [`ExperimentConfig::validate`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Grid step override (corrector cell step, or the ε-problem step).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_side: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_ref: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    /// Outer radius `R` of profiles, or the Hölder cylinder radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_budget: Option<usize>,
    /// Amplitude of the `sin(πx)` forcing of the ε-problems.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forcing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: Kind,
    /// Builtin field name or a field JSON path relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub params: Params,
    /// Directory the config was read from (field paths resolve against it).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: ExperimentConfig = serde_json::from_str(text).map_err(|e| config_invalid(format!("config does not parse: {e}")))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// SHA-256 of the canonical serialization (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { output: None, ..self.clone() };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn resolve_field(&self) -> Result<CoefficientTensorField> {
        let name = self.field.as_deref().ok_or_else(|| config_invalid(format!("kind {} needs a field", self.kind)))?;
        if let Some(f) = builtin_field(name) {
            return Ok(f);
        }
        let path = self.base_dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| config_invalid(format!("field {name}: {e}")))?;
        Ok(field_from_json(&text)?)
    }

    /// Requested checks, or `None` for the kind's defaults.
    pub fn checks(&self) -> Option<&[String]> {
        self.params.checks.as_deref()
    }

    pub fn wants(&self, check: &str, default: bool) -> bool {
        match self.checks() {
            Some(list) => list.iter().any(|c| c == check),
            None => default,
        }
    }

    /// Kind-specific required parameters, value ranges and the ε-resolution rule.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_invalid(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let p = &self.params;
        let need = |present: bool, name: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(config_invalid(format!("kind {} requires params.{name}", self.kind)))
            }
        };
        match self.kind {
            Kind::Corrector | Kind::Effective => need(p.s_list.is_some(), "s_list")?,
            Kind::Flux => {
                need(p.s_list.is_some(), "s_list")?;
                need(p.h.is_some(), "h")?;
            }
            Kind::Rate => {
                need(p.eps_list.is_some(), "eps_list")?;
                need(p.sigma.is_some(), "sigma")?;
            }
            Kind::Modulus => need(p.sigma.is_some(), "sigma")?,
            Kind::LipschitzInterior | Kind::LipschitzBoundary | Kind::Fundamental | Kind::Holder => need(p.eps_list.is_some(), "eps_list")?,
            Kind::Smoothing => {}
        }
        if self.kind.needs_field() {
            let f = self.resolve_field()?;
            let one_d = matches!(self.kind, Kind::Rate | Kind::LipschitzInterior | Kind::LipschitzBoundary | Kind::Fundamental | Kind::Holder);
            if one_d && (f.d != 1 || f.m != 1) {
                return Err(config_invalid(format!("kind {} runs on scalar one-dimensional fields (got d={}, m={})", self.kind, f.d, f.m)));
            }
        }
        if let Some(s) = &p.s_list {
            if s.is_empty() || s.iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
                return Err(config_invalid("s_list entries must be finite and at least 1"));
            }
        }
        if let Some(e) = &p.eps_list {
            if e.is_empty() || e.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(config_invalid("eps_list entries must lie in (0, 1]"));
            }
        }
        if let Some(s) = p.sigma {
            if !(s > 0.0 && s <= 1.0) {
                return Err(config_invalid(format!("sigma={s} must lie in (0, 1]")));
            }
        }
        if let Some(checks) = &p.checks {
            for c in checks {
                if !self.kind.known_checks().contains(&c.as_str()) {
                    return Err(config_invalid(format!("kind {} has no check named {c}", self.kind)));
                }
            }
        }
        if matches!(self.kind, Kind::Corrector) && self.wants("sup-bound", false) && p.sigma.is_none() {
            return Err(config_invalid("the sup-bound check requires params.sigma"));
        }
        // ε-problems with an explicit grid step must resolve every ε
        if let (Some(h), Some(eps)) = (p.h, &p.eps_list) {
            if matches!(self.kind, Kind::LipschitzInterior | Kind::LipschitzBoundary | Kind::Holder) {
                for &e in eps {
                    let dt = p.dt.unwrap_or(e * e / 16.0);
                    check_resolution(e, h, dt).map_err(|err| CliError::ConfigInvalid(err.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
