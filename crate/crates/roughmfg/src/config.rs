//! Experiment configuration: a TOML file with one table per concern, plus
//! `ROUGHMFG__SECTION__KEY=value` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use roughmfg_core::controlled::IndexPair;
use roughmfg_core::models;
use roughmfg_core::rsde::InitialLaw;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

pub const ENV_PREFIX: &str = "ROUGHMFG__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Rsde,
    Mfg,
    Randomize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoughSource {
    /// Lift of a Brownian sample drawn from `rough.seed`.
    Sample,
    /// Binary rough-path file at `rough.path`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiftKind {
    Ito,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowModeName {
    FrozenFlow,
    PerSampleFixedpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingName {
    Independent,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub kind: RunKind,
    pub model: String,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            kind: RunKind::Mfg,
            model: "lq".into(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Overrides of the registry defaults.
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            horizon: 1.0,
            steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoughSection {
    pub source: RoughSource,
    pub path: Option<PathBuf>,
    pub lift: LiftKind,
    /// Seed of the common-noise sample; the run seed when absent.
    pub seed: Option<u64>,
    /// Hölder exponent of the rough-path space.
    pub alpha: f64,
}

impl Default for RoughSection {
    fn default() -> Self {
        RoughSection {
            source: RoughSource::Sample,
            path: None,
            lift: LiftKind::Ito,
            seed: None,
            alpha: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub lattice: Vec<usize>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Automatic bounds are pilot mean +- widen * sd.
    pub widen: f64,
    pub order: usize,
    pub escape_limit: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            lattice: vec![101],
            lower: None,
            upper: None,
            widen: 6.0,
            order: 5,
            escape_limit: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSection {
    pub particles: usize,
    pub damping: f64,
    pub max_iters: usize,
    pub tol_w2: f64,
    pub tol_exp: f64,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        FixedPointSection {
            particles: 2000,
            damping: 1.0,
            max_iters: 20,
            tol_w2: 1e-3,
            tol_exp: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    pub enabled: bool,
    pub beta: f64,
    pub beta_p: f64,
    /// Spatial regularity of the coefficients.
    pub gamma: f64,
    /// Moment order.
    pub m: f64,
    /// Norm bound `M`.
    pub m_bound: f64,
    /// Window width `epsilon`.
    pub epsilon: f64,
    pub inner_samples: usize,
    pub outer_limit: usize,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            enabled: true,
            beta: 0.4,
            beta_p: 0.35,
            gamma: 2.0,
            m: 2.0,
            m_bound: 10.0,
            epsilon: 0.25,
            inner_samples: 8,
            outer_limit: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsdeSection {
    pub particles: usize,
    /// Uniform relaxed control when absent, otherwise this action index everywhere.
    pub action: Option<usize>,
    /// Picard sweeps that replace the frozen initial law by the law the policy generates.
    pub sweeps: usize,
    pub diagnostics: bool,
    pub monitor: bool,
    pub level: f64,
    pub envelope_constant: f64,
    pub envelope_exponent: f64,
}

impl Default for RsdeSection {
    fn default() -> Self {
        RsdeSection {
            particles: 2000,
            action: None,
            sweeps: 1,
            diagnostics: true,
            monitor: true,
            level: 0.01,
            envelope_constant: 10.0,
            envelope_exponent: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizeSection {
    pub samples: usize,
    pub particles: usize,
    pub mode: FlowModeName,
    /// Picard sweeps per sample in `per-sample-fixedpoint` mode.
    pub iterations: usize,
    pub coupling: CouplingName,
    pub refine: usize,
    pub permutations: usize,
    pub level: f64,
}

impl Default for RandomizeSection {
    fn default() -> Self {
        RandomizeSection {
            samples: 200,
            particles: 2000,
            mode: FlowModeName::FrozenFlow,
            iterations: 3,
            coupling: CouplingName::Independent,
            refine: 1,
            permutations: 500,
            level: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub model: ModelSection,
    pub grid: GridSection,
    pub rough: RoughSection,
    pub init: InitialLaw,
    pub policy: PolicySection,
    pub fixedpoint: FixedPointSection,
    pub domain: DomainSection,
    pub rsde: RsdeSection,
    pub randomize: RandomizeSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run: RunSection::default(),
            model: ModelSection::default(),
            grid: GridSection::default(),
            rough: RoughSection::default(),
            init: InitialLaw::Gaussian {
                mean: vec![0.0],
                sd: vec![0.5],
            },
            policy: PolicySection::default(),
            fixedpoint: FixedPointSection::default(),
            domain: DomainSection::default(),
            rsde: RsdeSection::default(),
            randomize: RandomizeSection::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `ROUGHMFG__SECTION__KEY` overrides (nested keys allowed) to a raw table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Vec<String>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let parts: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if parts.iter().any(|p| p.is_empty()) {
            continue;
        }
        let mut node = &mut *table;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !entry.is_table() {
                *entry = toml::Value::Table(toml::Table::new());
            }
            node = entry.as_table_mut().expect("table just ensured");
        }
        node.insert(parts[parts.len() - 1].clone(), override_value(&raw));
        applied.push(parts.join("."));
    }
    applied
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> RunResult<Config> {
        Self::parse_with(text, origin, std::iter::empty())
    }

    /// Parses `text` after applying the given override variables.
    pub fn parse_with<I>(text: &str, origin: &Path, vars: I) -> RunResult<Config>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let parse_err = |message: String| RunError::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        apply_overrides(&mut table, vars);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))
    }

    /// Reads a config file and applies overrides from the process environment.
    pub fn load(path: &Path) -> RunResult<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::parse_with(&text, path, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn rough_seed(&self) -> u64 {
        self.rough.seed.unwrap_or(self.run.seed)
    }

    pub fn overrides(&self) -> Vec<(String, f64)> {
        self.model.params.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn index_pair(&self) -> roughmfg_core::Result<IndexPair> {
        IndexPair::new(self.domain.beta, self.domain.beta_p, self.rough.alpha, self.domain.gamma)
    }
}

/// All invariant violations of a configuration; empty when it can be run.
pub fn validate(cfg: &Config) -> Vec<String> {
    let mut issues = Vec::new();
    let mut state_dim = None;
    match models::build(&cfg.run.model, &cfg.overrides()) {
        Ok(m) => state_dim = Some(m.dims().state),
        Err(e) => issues.push(format!("run.model: {e}")),
    }
    if !(cfg.grid.horizon > 0.0 && cfg.grid.horizon.is_finite()) {
        issues.push(format!("grid.horizon must be positive, got {}", cfg.grid.horizon));
    }
    if cfg.grid.steps == 0 {
        issues.push("grid.steps must be positive".into());
    }
    if cfg.rough.source == RoughSource::File && cfg.rough.path.is_none() {
        issues.push("rough.path is required when rough.source = \"file\"".into());
    }
    if !(cfg.rough.alpha > 1.0 / 3.0 && cfg.rough.alpha <= 0.5) {
        issues.push(format!("rough.alpha must lie in (1/3, 1/2], got {}", cfg.rough.alpha));
    }
    if let Err(e) = cfg.index_pair() {
        issues.push(format!("domain: {e}"));
    }
    if let Err(e) = cfg.init.validate() {
        issues.push(format!("init: {e}"));
    }
    if let Some(d) = state_dim {
        if cfg.init.dim() != d {
            issues.push(format!("init has dimension {}, model state has {d}", cfg.init.dim()));
        }
        if cfg.policy.lattice.len() != d {
            issues.push(format!("policy.lattice has {} entries, model state has {d}", cfg.policy.lattice.len()));
        }
    }
    if cfg.policy.lattice.iter().any(|&c| c < 2) {
        issues.push("policy.lattice counts must be at least 2".into());
    }
    match (&cfg.policy.lower, &cfg.policy.upper) {
        (Some(lo), Some(hi)) => {
            if lo.len() != cfg.policy.lattice.len() || hi.len() != cfg.policy.lattice.len() {
                issues.push("policy.lower/upper must match policy.lattice in length".into());
            } else if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                issues.push("policy.lower must lie strictly below policy.upper".into());
            }
        }
        (None, None) => {}
        _ => issues.push("policy.lower and policy.upper must be given together".into()),
    }
    if !(1..=64).contains(&cfg.policy.order) {
        issues.push(format!("policy.order must lie in 1..=64, got {}", cfg.policy.order));
    }
    if !(cfg.policy.widen > 0.0) {
        issues.push("policy.widen must be positive".into());
    }
    if !(cfg.policy.escape_limit > 0.0 && cfg.policy.escape_limit < 1.0) {
        issues.push("policy.escape_limit must lie in (0, 1)".into());
    }
    let fp = &cfg.fixedpoint;
    if fp.particles == 0 {
        issues.push("fixedpoint.particles must be positive".into());
    }
    if !(fp.damping > 0.0 && fp.damping <= 1.0) {
        issues.push(format!("fixedpoint.damping must lie in (0, 1], got {}", fp.damping));
    }
    if fp.max_iters == 0 {
        issues.push("fixedpoint.max_iters must be positive".into());
    }
    if !(fp.tol_w2 >= 0.0) || !(fp.tol_exp >= 0.0) {
        issues.push("fixedpoint tolerances must be non-negative".into());
    }
    let dm = &cfg.domain;
    if !(dm.m >= 2.0) {
        issues.push(format!("domain.m must be at least 2, got {}", dm.m));
    }
    if !(dm.m_bound > 0.0) || !(dm.epsilon > 0.0) {
        issues.push("domain.m_bound and domain.epsilon must be positive".into());
    }
    if cfg.rsde.particles < 2 {
        issues.push("rsde.particles must be at least 2".into());
    }
    if let (Some(a), Ok(m)) = (cfg.rsde.action, models::build(&cfg.run.model, &cfg.overrides())) {
        if a >= m.actions().len() {
            issues.push(format!("rsde.action {a} is out of range; the model has {} actions", m.actions().len()));
        }
    }
    if !(cfg.rsde.level > 0.0 && cfg.rsde.level < 1.0) {
        issues.push("rsde.level must lie in (0, 1)".into());
    }
    let rz = &cfg.randomize;
    if rz.samples < 2 || rz.particles == 0 {
        issues.push("randomize needs at least two samples and one particle".into());
    }
    if rz.refine == 0 {
        issues.push("randomize.refine must be positive".into());
    }
    if !(rz.level > 0.0 && rz.level < 1.0) {
        issues.push("randomize.level must lie in (0, 1)".into());
    }
    issues
}
