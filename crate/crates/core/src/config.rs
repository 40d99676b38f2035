//! Scenario configuration: parsing, `key=value` overrides, validation and a
//! canonical emitter.
//!
//! The on-disk format is TOML with the physical unit spelled out in each key
//! name. Missing keys fall back to the reference scenario (4 RRUs, 4 UEs,
//! 16-element arrays at 28 GHz in a 50 m square).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockage::{subset_count, MAX_SUBSETS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("malformed override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot emit configuration: {0}")]
    Emit(String),
}

/// How the serving-subset parameter `L` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Every user uses `subset_size` in every slot.
    Fixed,
    /// `L` re-selected per user and slot from the outage-history estimate.
    Dynamic,
    /// Coordinated beamforming: one serving RRU per user (largest gain).
    CbBaseline,
    /// Full joint transmission: `L` equals the serving-set size.
    FullJtBaseline,
}

/// Dual (Lagrange multiplier) step rule of the KKT iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `e + beta * (gamma - surrogate)` with `beta = dual_step_size`.
    Constant,
    /// Projected Newton step on the dual function with backtracking.
    Newton,
}

/// Resolved serving-set policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Fixed(usize),
    Dynamic,
    CbBaseline,
    FullJtBaseline,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Fixed(l) => write!(f, "fixed:{l}"),
            Policy::Dynamic => f.write_str("dynamic"),
            Policy::CbBaseline => f.write_str("cb"),
            Policy::FullJtBaseline => f.write_str("full_jt"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = ConfigError;

    /// Accepts the [`Display`](std::fmt::Display) forms: `fixed:L`,
    /// `dynamic`, `cb`, `full_jt`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid(format!("unknown policy `{s}`"));
        match s.trim() {
            "dynamic" => Ok(Policy::Dynamic),
            "cb" => Ok(Policy::CbBaseline),
            "full_jt" => Ok(Policy::FullJtBaseline),
            other => {
                let l = other.strip_prefix("fixed:").ok_or_else(bad)?;
                l.parse().map(Policy::Fixed).map_err(|_| bad())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of remote radio units B.
    pub num_rrus: usize,
    /// Number of single-antenna users K.
    pub num_ues: usize,
    /// ULA elements per RRU, N.
    pub antennas_per_rru: usize,
    pub area_side_m: f64,
    pub carrier_freq_hz: f64,
    /// Propagation paths per RRU-UE pair, M.
    pub num_paths: usize,
    /// Path-loss exponents are drawn uniformly from this closed interval.
    pub pathloss_exponent_range: [f64; 2],
    /// Independent per-link blockage probability q.
    pub blockage_prob: f64,
    /// Mean Poisson arrivals per user and slot.
    pub arrival_rate_bits_per_slot: f64,
    pub queue_threshold_bits: f64,
    /// Tolerated probability of exceeding the queue threshold, epsilon.
    pub violation_tolerance: f64,
    /// Drift-plus-penalty trade-off V.
    pub tradeoff_v: f64,
    pub serving_set_policy: PolicyKind,
    /// Minimum number of surviving serving RRUs assumed under `fixed`.
    pub subset_size: usize,
    /// Maximum averaging length tau of the blockage estimator.
    pub averaging_window_slots: usize,
    /// Blockage estimate used before any outage history exists.
    pub blockage_prior: f64,
    pub dual_step_rule: StepRule,
    /// beta_e of the constant dual step.
    pub dual_step_size: f64,
    /// Receiver noise power sigma^2, same linear unit as transmit power (mW).
    pub noise_power_mw: f64,
    pub num_slots: usize,
    pub replications: usize,
    /// Maximum dual steps between refreshes of the quadratic-transform
    /// auxiliaries.
    pub inner_iters: usize,
    /// Maximum auxiliary refreshes per slot.
    pub outer_iters: usize,
    /// Relative objective change treated as converged.
    pub solver_tolerance: f64,
    pub master_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_rrus: 4,
            num_ues: 4,
            antennas_per_rru: 16,
            area_side_m: 50.0,
            carrier_freq_hz: 28e9,
            num_paths: 3,
            pathloss_exponent_range: [2.0, 6.0],
            blockage_prob: 0.1,
            arrival_rate_bits_per_slot: 3.5,
            queue_threshold_bits: 5.0,
            violation_tolerance: 0.1,
            tradeoff_v: 1.0,
            serving_set_policy: PolicyKind::Dynamic,
            subset_size: 2,
            averaging_window_slots: 50,
            blockage_prior: 0.0,
            dual_step_rule: StepRule::Newton,
            dual_step_size: 0.01,
            noise_power_mw: DEFAULT_NOISE_POWER_MW,
            num_slots: 2000,
            replications: 20,
            inner_iters: 20,
            outer_iters: 100,
            solver_tolerance: 1e-4,
            master_seed: 1,
        }
    }
}

/// Thermal noise over 100 MHz with a 7 dB noise figure, about -87 dBm.
pub const DEFAULT_NOISE_POWER_MW: f64 = 2e-9;

impl ScenarioConfig {
    pub fn policy(&self) -> Policy {
        match self.serving_set_policy {
            PolicyKind::Fixed => Policy::Fixed(self.subset_size),
            PolicyKind::Dynamic => Policy::Dynamic,
            PolicyKind::CbBaseline => Policy::CbBaseline,
            PolicyKind::FullJtBaseline => Policy::FullJtBaseline,
        }
    }

    /// Sets the policy fields from a resolved [`Policy`].
    pub fn set_policy(&mut self, policy: Policy) {
        match policy {
            Policy::Fixed(l) => {
                self.serving_set_policy = PolicyKind::Fixed;
                self.subset_size = l;
            }
            Policy::Dynamic => self.serving_set_policy = PolicyKind::Dynamic,
            Policy::CbBaseline => self.serving_set_policy = PolicyKind::CbBaseline,
            Policy::FullJtBaseline => self.serving_set_policy = PolicyKind::FullJtBaseline,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg()))
            }
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;

        check(self.num_rrus >= 1, || "num_rrus must be >= 1".into())?;
        check(self.num_rrus <= 64, || "num_rrus must be <= 64".into())?;
        check(self.num_ues >= 1, || "num_ues must be >= 1".into())?;
        check(self.antennas_per_rru >= 1, || "antennas_per_rru must be >= 1".into())?;
        check(self.num_paths >= 1, || "num_paths must be >= 1".into())?;
        check(self.num_slots >= 1, || "num_slots must be >= 1".into())?;
        check(self.replications >= 1, || "replications must be >= 1".into())?;
        check(self.inner_iters >= 1, || "inner_iters must be >= 1".into())?;
        check(self.outer_iters >= 1, || "outer_iters must be >= 1".into())?;
        check(self.averaging_window_slots >= 1, || {
            "averaging_window_slots must be >= 1".into()
        })?;
        check(positive(self.area_side_m), || "area_side_m must be positive".into())?;
        check(positive(self.carrier_freq_hz), || {
            "carrier_freq_hz must be positive".into()
        })?;
        let [lo, hi] = self.pathloss_exponent_range;
        check(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi, || {
            format!("pathloss_exponent_range [{lo}, {hi}] must satisfy 0 <= min <= max")
        })?;
        check((0.0..=1.0).contains(&self.blockage_prob), || {
            format!("blockage_prob {} outside [0, 1]", self.blockage_prob)
        })?;
        check((0.0..=1.0).contains(&self.blockage_prior), || {
            format!("blockage_prior {} outside [0, 1]", self.blockage_prior)
        })?;
        check(
            self.violation_tolerance > 0.0 && self.violation_tolerance < 1.0,
            || {
                format!(
                    "violation_tolerance {} must lie in the open interval (0, 1)",
                    self.violation_tolerance
                )
            },
        )?;
        check(
            self.arrival_rate_bits_per_slot.is_finite() && self.arrival_rate_bits_per_slot >= 0.0,
            || "arrival_rate_bits_per_slot must be >= 0".into(),
        )?;
        check(positive(self.queue_threshold_bits), || {
            "queue_threshold_bits must be positive".into()
        })?;
        check(self.tradeoff_v.is_finite() && self.tradeoff_v >= 0.0, || {
            "tradeoff_v must be >= 0".into()
        })?;
        check(positive(self.dual_step_size), || "dual_step_size must be positive".into())?;
        check(positive(self.noise_power_mw), || "noise_power_mw must be positive".into())?;
        check(positive(self.solver_tolerance), || {
            "solver_tolerance must be positive".into()
        })?;

        let b = self.num_rrus;
        let worst_case_subsets = match self.policy() {
            Policy::Fixed(l) => {
                check(l >= 1 && l <= b, || {
                    format!("subset_size L = {l} must lie in [1, num_rrus = {b}]")
                })?;
                subset_count(b, l).unwrap_or(u64::MAX)
            }
            // the dynamic rule may fall back to L = 1
            Policy::Dynamic => subset_count(b, 1).unwrap_or(u64::MAX),
            Policy::CbBaseline | Policy::FullJtBaseline => 1,
        };
        check(worst_case_subsets <= MAX_SUBSETS as u64, || {
            format!(
                "policy {} needs {worst_case_subsets} blockage subsets per user, more than the cap of {MAX_SUBSETS}",
                self.policy()
            )
        })?;
        Ok(())
    }
}

/// Parses and validates a configuration document.
pub fn load_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    load_config_with_overrides::<&str>(text, &[])
}

/// Parses a document, applies `key=value` overrides in order, then validates.
pub fn load_config_with_overrides<S: AsRef<str>>(
    text: &str,
    overrides: &[S],
) -> Result<ScenarioConfig, ConfigError> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov.as_ref())?;
    }
    let cfg: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `key=value` override to a raw document table. Values are
/// read as TOML literals; anything that does not parse is taken as a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    table.insert(key.to_string(), value);
    Ok(())
}

/// Canonical TOML rendering; `load_config(&emit_config(c)) == c`.
pub fn emit_config(cfg: &ScenarioConfig) -> Result<String, ConfigError> {
    toml::to_string(cfg).map_err(|e| ConfigError::Emit(e.to_string()))
}
