//! Experiment documents: parsing, defaults, and problem construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twoscale::audit::AuditSettings;
use twoscale::mdp::{random_mdp, validate_mdp, MdpDocument};
use twoscale::tdc::make_tdc_problem;
use twoscale::{
    validate_schedule_pair, FeatureMap, FiniteMdp, Policy, RewardNoise, SchedulePair, Sparsity, StepSchedule,
    TdcProblem,
};

use crate::Failure;

/// Bundled configurations, addressable by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("chain3", include_str!("../configs/chain3.json")),
    ("random5", include_str!("../configs/random5.json")),
    ("bad_schedule", include_str!("../configs/bad_schedule.json")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum MdpSource {
    /// A named built-in instance (`chain3`).
    Preset(String),
    /// Path to an MDP document, relative to the config file.
    File(PathBuf),
    Inline(MdpDocument),
    Generator(GeneratorSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `"dense"` or `{"fraction": f}`.
    #[serde(default = "dense")]
    pub sparsity: Sparsity,
    pub seed: u64,
}

fn dense() -> Sparsity {
    Sparsity::Dense
}

/// A policy table or a preset name: `uniform`, `greedy-on-action-K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Named(String),
    Table(Vec<Vec<f64>>),
}

impl PolicySpec {
    pub fn build(&self, n_states: usize, n_actions: usize) -> Result<Policy, Failure> {
        match self {
            Self::Table(rows) => Policy::from_rows(rows).map_err(Failure::validation),
            Self::Named(name) if name == "uniform" => Ok(Policy::uniform(n_states, n_actions)),
            Self::Named(name) => {
                let k = name
                    .strip_prefix("greedy-on-action-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Failure::validation(format!("unknown policy preset {name:?}")))?;
                Policy::greedy_on(n_states, n_actions, k).map_err(Failure::validation)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureSpec {
    Tabular,
    Random { dim: usize, seed: u64 },
    Matrix { rows: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `scale / (n + offset)^exponent`.
    PowerLaw { scale: f64, offset: f64, exponent: f64 },
    /// `base / (1 + n / n0)^exponent`.
    Relative { base: f64, n0: f64, exponent: f64 },
}

impl ScheduleSpec {
    pub fn build(&self) -> StepSchedule {
        match *self {
            Self::PowerLaw { scale, offset, exponent } => StepSchedule::power_law(scale, offset, exponent),
            Self::Relative { base, n0, exponent } => StepSchedule::relative(base, n0, exponent),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub slow: ScheduleSpec,
    pub fast: ScheduleSpec,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            slow: ScheduleSpec::Relative { base: 0.5, n0: 1e4, exponent: 1.0 },
            fast: ScheduleSpec::Relative { base: 0.5, n0: 1e4, exponent: 0.6 },
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> SchedulePair {
        SchedulePair::new(self.slow.build(), self.fast.build())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pipelines {
    pub oracle: bool,
    pub tdc: bool,
    pub ode: bool,
    pub audit: bool,
}

impl Default for Pipelines {
    fn default() -> Self {
        Self { oracle: true, tdc: true, ode: true, audit: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Iterate indices `n` whose times `t(n)` start a window.
    pub anchors: Vec<u64>,
    pub window: f64,
    pub dt: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { anchors: vec![100, 10_000, 1_000_000], window: 1.0, dt: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    /// Horizon of the slow ODE; `null` picks `40 / lambda_min(A'C^-1 A)`.
    /// The fast ODE always runs for `50 / lambda_min(C)`.
    pub slow_horizon: Option<f64>,
    /// Integration step; `null` picks `1e-3 / (1 + ||matrix||)`.
    pub dt: Option<f64>,
    /// Rows kept in the CSV export.
    pub max_rows: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { slow_horizon: None, dt: None, max_rows: 2000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub points: usize,
    pub draws: u64,
    pub lipschitz_pairs: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let d = AuditSettings::default();
        Self { points: d.points, draws: d.draws, lipschitz_pairs: d.lipschitz_pairs, radius: d.radius, seed: d.seed }
    }
}

impl From<AuditConfig> for AuditSettings {
    fn from(c: AuditConfig) -> Self {
        Self { points: c.points, draws: c.draws, lipschitz_pairs: c.lipschitz_pairs, radius: c.radius, seed: c.seed }
    }
}

fn default_policy_uniform() -> PolicySpec {
    PolicySpec::Named("uniform".into())
}

fn default_features() -> FeatureSpec {
    FeatureSpec::Tabular
}

fn default_horizon() -> u64 {
    1_000_000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_thinning() -> u64 {
    1000
}

fn default_divergence_bound() -> f64 {
    1e6
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. Every field except `mdp` and `target` has a default and
/// all defaults are written back into `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub mdp: MdpSource,
    pub target: PolicySpec,
    #[serde(default = "default_policy_uniform")]
    pub behavior: PolicySpec,
    #[serde(default = "default_features")]
    pub features: FeatureSpec,
    /// Half-width of uniform reward noise.
    #[serde(default)]
    pub reward_noise: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_thinning")]
    pub thinning: u64,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    #[serde(default)]
    pub pipelines: Pipelines,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default)]
    pub ode: OdeConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    /// Directory used to resolve relative MDP file paths; not serialized.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::validation(format!("config does not parse: {e}")))
    }

    /// Reads a config file, or a bundled preset when `spec` names one and no
    /// such file exists.
    pub fn load(spec: &str) -> Result<Self, Failure> {
        let path = Path::new(spec);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            let mut cfg = Self::from_json(&text)?;
            cfg.base_dir = path.parent().map(Path::to_path_buf);
            return Ok(cfg);
        }
        if let Some((_, text)) = PRESETS.iter().find(|(name, _)| *name == spec) {
            return Self::from_json(text);
        }
        Err(Failure::io(format!("no config file or bundled preset named {spec:?}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_mdp(&self) -> Result<FiniteMdp, Failure> {
        match &self.mdp {
            MdpSource::Preset(name) if name == "chain3" => Ok(FiniteMdp::chain3()),
            MdpSource::Preset(name) => Err(Failure::validation(format!("unknown MDP preset {name:?}"))),
            MdpSource::File(path) => {
                let full = match &self.base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                let text =
                    std::fs::read_to_string(&full).map_err(|e| Failure::io(format!("{}: {e}", full.display())))?;
                FiniteMdp::from_json(&text).map_err(Failure::validation)
            }
            MdpSource::Inline(doc) => FiniteMdp::try_from(doc.clone()).map_err(Failure::validation),
            MdpSource::Generator(g) => {
                random_mdp(g.n_states, g.n_actions, g.sparsity, g.seed).map_err(Failure::validation)
            }
        }
    }

    pub fn build_features(&self, n_states: usize) -> Result<FeatureMap, Failure> {
        match &self.features {
            FeatureSpec::Tabular => Ok(FeatureMap::tabular(n_states)),
            FeatureSpec::Random { dim, seed } => FeatureMap::random(n_states, *dim, *seed).map_err(Failure::validation),
            FeatureSpec::Matrix { rows } => FeatureMap::from_rows(rows).map_err(Failure::validation),
        }
    }

    /// Full validation: run parameters, schedule pair, MDP and policies.
    /// Returns the assembled problem.
    pub fn build(&self) -> Result<TdcProblem, Failure> {
        if self.horizon == 0 || self.thinning == 0 {
            return Err(Failure::validation("horizon and thinning must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Failure::validation("seeds list is empty"));
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return Err(Failure::validation("reward_noise must be a finite half-width >= 0"));
        }
        let report = validate_schedule_pair(&self.schedule.build());
        if !report.is_valid() {
            let failed: Vec<String> = report.failures().map(|c| format!("{} ({})", c.label, c.detail)).collect();
            return Err(Failure::validation(format!("schedule rejected: {}", failed.join("; "))));
        }
        let mdp = self.build_mdp()?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let pi = self.target.build(ns, na)?;
        let pi_b = self.behavior.build(ns, na)?;
        let report = validate_mdp(&mdp, &pi, &pi_b);
        if !report.is_valid() {
            let lines: Vec<String> = report.violations.iter().map(|v| v.detail.clone()).collect();
            return Err(Failure::validation(format!("MDP rejected: {}", lines.join("; "))));
        }
        let phi = self.build_features(ns)?;
        make_tdc_problem(mdp, pi, pi_b, phi, RewardNoise::uniform(self.reward_noise)).map_err(Failure::validation)
    }
}
