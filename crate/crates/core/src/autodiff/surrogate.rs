//! Backward-rule overrides for the non-differentiable encoder stages.
//!
//! A surrogate changes what `backward` does at a node; the forward value of
//! that node is always the exact one.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node kinds that accept a surrogate backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    /// Top-T coefficient selection.
    Selection,
    /// The quantizing threshold activation.
    Quantizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum SurrogateRule {
    /// Upstream gradient passes through unchanged.
    Identity,
    /// Derivative of a sigmoid pair approximating the quantizer's steps.
    SmoothActivation { steepness: f64 },
    /// Route gradient through the `u` largest-magnitude coefficients of each
    /// fiber instead of the `T` selected ones.
    TopURouting { u: usize },
}

impl SurrogateRule {
    fn applies_to(&self, kind: SurrogateKind) -> bool {
        match self {
            SurrogateRule::Identity => true,
            SurrogateRule::SmoothActivation { .. } => kind == SurrogateKind::Quantizer,
            SurrogateRule::TopURouting { .. } => kind == SurrogateKind::Selection,
        }
    }
}

impl fmt::Display for SurrogateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurrogateRule::Identity => write!(f, "identity"),
            SurrogateRule::SmoothActivation { steepness } => {
                write!(f, "smooth-activation({steepness})")
            }
            SurrogateRule::TopURouting { u } => write!(f, "top-u-routing({u})"),
        }
    }
}

fn parse_arg<T: FromStr>(name: &str, prefix: &str) -> Option<T> {
    name.strip_prefix(prefix)?
        .strip_prefix('(')?
        .strip_suffix(')')?
        .trim()
        .parse()
        .ok()
}

impl FromStr for SurrogateRule {
    type Err = Error;

    /// Accepts `identity`, `smooth-activation(k)` and `top-u-routing(U)`
    /// (case-insensitive).
    fn from_str(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        if lower == "identity" {
            return Ok(SurrogateRule::Identity);
        }
        if let Some(steepness) = parse_arg::<f64>(&lower, "smooth-activation") {
            if steepness > 0.0 && steepness.is_finite() {
                return Ok(SurrogateRule::SmoothActivation { steepness });
            }
        }
        if let Some(u) = parse_arg::<usize>(&lower, "top-u-routing") {
            if u >= 1 {
                return Ok(SurrogateRule::TopURouting { u });
            }
        }
        Err(Error::UnknownSurrogate(name.to_string()))
    }
}

/// Per-tape table of active surrogate rules. Kinds without an entry use the
/// exact backward (zero where the forward is piecewise constant).
#[derive(Clone, Debug, Default)]
pub struct SurrogateRegistry {
    rules: HashMap<SurrogateKind, SurrogateRule>,
}

impl SurrogateRegistry {
    pub fn register(&mut self, kind: SurrogateKind, rule: SurrogateRule) -> Result<()> {
        if !rule.applies_to(kind) {
            return Err(Error::UnknownSurrogate(format!("{rule} for {kind:?}")));
        }
        self.rules.insert(kind, rule);
        Ok(())
    }

    pub fn register_named(&mut self, kind: SurrogateKind, name: &str) -> Result<()> {
        let rule = name.parse()?;
        self.register(kind, rule)
    }

    pub fn clear(&mut self, kind: SurrogateKind) {
        self.rules.remove(&kind);
    }

    pub fn get(&self, kind: SurrogateKind) -> Option<SurrogateRule> {
        self.rules.get(&kind).copied()
    }
}
