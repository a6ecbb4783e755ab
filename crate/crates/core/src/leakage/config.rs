use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::{Component, Group, N_COMPONENTS};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}`")]
    BadValue { line: usize, value: String },
    #[error("coefficient for {key} is not finite")]
    NonFinite { key: String },
}

const ZERO: [f64; N_COMPONENTS] = [0.0; N_COMPONENTS];

/// Per-group coefficient vectors plus the Gaussian noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    coef: [[f64; N_COMPONENTS]; 5],
    pub noise_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut cfg = ModelConfig::zero();
        let common = [Component::T_OP2];
        let per_group: [(Group, &[Component]); 5] = [
            (Group::Alu, &[Component::T_DEST, Component::T_LATCH]),
            (Group::Shift, &[Component::T_DEST, Component::T_LATCH]),
            (Group::Mul, &[Component::T_DEST, Component::T_LATCH]),
            (Group::Load, &[Component::T_DEST, Component::T_BUS]),
            (
                Group::Store,
                &[Component::T_BUS, Component::T_MEMCELL, Component::B_ADJ],
            ),
        ];
        for (group, comps) in per_group {
            for &c in common.iter().chain(comps) {
                cfg.set(group, c, 1.0);
            }
            for g in Group::MODELED {
                cfg.set(group, Component::g_prev(g).unwrap(), 1.0);
                cfg.set(group, Component::g_next(g).unwrap(), 1.0);
            }
        }
        cfg
    }
}

impl ModelConfig {
    pub fn zero() -> Self {
        ModelConfig {
            coef: [ZERO; 5],
            noise_sigma: 0.0,
        }
    }

    pub fn coefficients(&self, group: Group) -> &[f64; N_COMPONENTS] {
        match group.slot() {
            Some(s) => &self.coef[s],
            None => &ZERO,
        }
    }

    pub fn coefficient(&self, group: Group, c: Component) -> f64 {
        self.coefficients(group)[c.index()]
    }

    /// Sets one coefficient. Reserved components and the neutral group stay zero.
    pub fn set(&mut self, group: Group, c: Component, value: f64) {
        if let Some(s) = group.slot() {
            if !c.is_reserved() {
                self.coef[s][c.index()] = value;
            }
        }
    }

    /// Copy with one component zeroed in every group.
    pub fn without(&self, c: Component) -> Self {
        let mut out = self.clone();
        for g in Group::MODELED {
            out.set(g, c, 0.0);
        }
        out
    }

    pub fn scale_group(&mut self, group: Group, factor: f64) {
        if let Some(s) = group.slot() {
            for x in &mut self.coef[s] {
                *x *= factor;
            }
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_sigma > 0.0 {
            Normal::new(0.0, self.noise_sigma)
                .map(|d| d.sample(rng))
                .unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Parses `group.component = coefficient` lines on top of the defaults.
    /// `base = zero` as the first key starts from an all-zero model instead.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "base" {
                cfg = match value {
                    "zero" => ModelConfig::zero().with_noise(cfg.noise_sigma),
                    "default" => ModelConfig::default().with_noise(cfg.noise_sigma),
                    _ => {
                        return Err(ConfigError::BadValue {
                            line,
                            value: value.into(),
                        })
                    }
                };
                continue;
            }
            let x: f64 = value.parse().map_err(|_| ConfigError::BadValue {
                line,
                value: value.into(),
            })?;
            if !x.is_finite() {
                return Err(ConfigError::NonFinite { key: key.into() });
            }
            let unknown = || ConfigError::UnknownKey {
                line,
                key: key.into(),
            };
            let (head, tail) = key.split_once('.').ok_or_else(unknown)?;
            if head == "noise" {
                if tail != "sigma" || x < 0.0 {
                    return Err(unknown());
                }
                cfg.noise_sigma = x;
                continue;
            }
            let group = Group::from_name(head).ok_or_else(unknown)?;
            let comp = Component::from_name(tail)
                .filter(|c| !c.is_reserved())
                .ok_or_else(unknown)?;
            cfg.set(group, comp, x);
        }
        Ok(cfg)
    }

    /// Full listing of every coefficient, parseable by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("base = zero\n");
        let _ = writeln!(out, "noise.sigma = {}", self.noise_sigma);
        for g in Group::MODELED {
            for c in Component::all().filter(|c| !c.is_reserved()) {
                let x = self.coefficient(g, c);
                if x != 0.0 {
                    let _ = writeln!(out, "{}.{} = {}", g.name(), c.name(), x);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_weight_behavioural_components() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.coefficient(Group::Alu, Component::T_LATCH), 1.0);
        assert_eq!(cfg.coefficient(Group::Alu, Component::T_BUS), 0.0);
        assert_eq!(cfg.coefficient(Group::Store, Component::B_ADJ), 1.0);
        assert_eq!(cfg.coefficient(Group::Load, Component::B_ADJ), 0.0);
        assert_eq!(cfg.coefficient(Group::Neutral, Component::T_OP2), 0.0);
        assert!(Component::all()
            .filter(|c| c.is_reserved())
            .all(|c| Group::MODELED.iter().all(|&g| cfg.coefficient(g, c) == 0.0)));
    }

    #[test]
    fn parse_overrides_and_round_trips() {
        let cfg = ModelConfig::parse("# comment\nalu.T_op1 = 0.5\nnoise.sigma = 2\n").unwrap();
        assert_eq!(cfg.coefficient(Group::Alu, Component::T_OP1), 0.5);
        assert_eq!(cfg.noise_sigma, 2.0);
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["alu.T_nothing = 1", "fpu.T_op1 = 1", "noise.mu = 1", "alu.reserved_0 = 1", "T_op1 = 1"] {
            assert!(
                matches!(ModelConfig::parse(bad), Err(ConfigError::UnknownKey { .. })),
                "{bad}"
            );
        }
        assert!(matches!(ModelConfig::parse("alu.T_op1 = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ModelConfig::parse("alu.T_op1 = inf"), Err(ConfigError::NonFinite { .. })));
        assert!(matches!(ModelConfig::parse("alu.T_op1"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn zero_base_clears_defaults() {
        let cfg = ModelConfig::parse("base = zero\nstore.T_bus = 3").unwrap();
        assert_eq!(cfg.coefficient(Group::Store, Component::T_BUS), 3.0);
        assert_eq!(cfg.coefficient(Group::Alu, Component::T_OP2), 0.0);
    }
}
