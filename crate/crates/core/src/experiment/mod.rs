//! Run configurations, presets, the run driver and cross-run comparison.
//!
//! A configuration is a TOML file. `extends = "<preset>"` starts from a
//! built-in preset (or another file) and overrides it key by key; tables
//! merge recursively and every other value replaces the inherited one.

mod compare;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancing::Strategy;
use crate::network::{Activation, MlpConfig};
use crate::problems::{PoissonConfig, SobolevConfig};
use crate::training::TrainingConfig;

pub use compare::{compare, CompareError, CompareReport, Metric, OrderingCheck, OrderingResult, StrategyRow};
pub use run::{run, run_probe, run_seed, sha256_file, FileEntry, Manifest, RunError, RunReport, SeedResult, MANIFEST};

/// Environment variable that replaces the default output root `runs`.
pub const OUTPUT_ROOT_ENV: &str = "PINNWEIGHTS_OUTPUT_ROOT";

pub const PRESETS: [(&str, &str); 6] = [
    ("sobolev-paper", include_str!("../../presets/sobolev-paper.toml")),
    ("sobolev-desk", include_str!("../../presets/sobolev-desk.toml")),
    ("poisson-paper", include_str!("../../presets/poisson-paper.toml")),
    ("poisson-desk", include_str!("../../presets/poisson-desk.toml")),
    ("stiffness-probe", include_str!("../../presets/stiffness-probe.toml")),
    ("forgetting-desk", include_str!("../../presets/forgetting-desk.toml")),
];

const MAX_EXTENDS_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error in {origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("unknown preset `{0}` (available: {1})")]
    UnknownPreset(String, String),
    #[error("`extends` chain is too deep or cyclic at `{0}`")]
    ExtendsCycle(String),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Sobolev,
    Poisson,
    StiffnessProbe,
    /// Sobolev problem with a staged objective schedule.
    Forgetting,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Sobolev => "sobolev",
            ProblemKind::Poisson => "poisson",
            ProblemKind::StiffnessProbe => "stiffness-probe",
            ProblemKind::Forgetting => "forgetting",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
}

impl NetworkSpec {
    pub fn mlp(&self) -> MlpConfig {
        let mut c = MlpConfig::new(2, self.hidden_layers, self.width, self.activation);
        c.gain = self.gain;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    /// Derivative orders `m`.
    pub orders: Vec<usize>,
    pub k0: Vec<usize>,
    pub grid: usize,
    pub window: bool,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            orders: vec![1, 2],
            k0: vec![2, 4, 8],
            grid: 64,
            window: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Epochs after which a checkpoint and a residual spectrum are written.
    pub snapshot_epochs: Vec<usize>,
    /// Epochs at whose start gradient histograms are taken (0 is the fresh
    /// network).
    pub histogram_epochs: Vec<usize>,
    pub histogram_bins: usize,
    /// Also export the point sets and ground truth.
    pub points: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            snapshot_epochs: Vec::new(),
            histogram_epochs: vec![0],
            histogram_bins: 60,
            points: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset or file this configuration was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extends: Option<String>,
    pub problem: ProblemKind,
    /// One repetition per seed. `training.seed` is replaced by each.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub network: NetworkSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sobolev: SobolevConfig,
    #[serde(default)]
    pub poisson: PoissonConfig,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn parse_toml(text: &str, origin: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| ConfigError::Syntax {
        origin: origin.into(),
        message: e.to_string(),
    })
}

/// Overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

/// Loads a preset name, or a path relative to `dir`, with its own parents.
fn load_base(name: &str, dir: Option<&Path>, depth: usize) -> Result<toml::Table, ConfigError> {
    if depth > MAX_EXTENDS_DEPTH {
        return Err(ConfigError::ExtendsCycle(name.into()));
    }
    if let Some(src) = preset_source(name) {
        return resolve_table(parse_toml(src, &format!("preset {name}"))?, None, depth + 1);
    }
    let path = dir.map_or_else(|| PathBuf::from(name), |d| d.join(name));
    if name.ends_with(".toml") && path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let table = parse_toml(&text, &path.display().to_string())?;
        return resolve_table(table, path.parent(), depth + 1);
    }
    Err(ConfigError::UnknownPreset(name.into(), preset_names().join(", ")))
}

fn resolve_table(mut table: toml::Table, dir: Option<&Path>, depth: usize) -> Result<toml::Table, ConfigError> {
    match table.remove("extends") {
        None => Ok(table),
        Some(toml::Value::String(parent)) => {
            let mut base = load_base(&parent, dir, depth)?;
            merge(&mut base, table);
            Ok(base)
        }
        Some(_) => Err(invalid("extends", "must be a preset name or file path")),
    }
}

impl RunConfig {
    /// Parses configuration text; relative `extends` paths resolve against
    /// `dir`.
    pub fn from_toml(text: &str, origin: &str, dir: Option<&Path>) -> Result<Self, ConfigError> {
        let table = parse_toml(text, origin)?;
        let extends = table.get("extends").and_then(|v| v.as_str()).map(String::from);
        let resolved = resolve_table(table, dir, 0)?;
        let mut config: RunConfig = toml::Value::Table(resolved).try_into().map_err(|e: toml::de::Error| {
            ConfigError::Syntax {
                origin: origin.into(),
                message: e.to_string(),
            }
        })?;
        config.extends = extends;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string(), path.parent())
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        Self::from_toml(&format!("extends = \"{name}\"\n"), name, None)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn strategy(&self) -> Strategy {
        self.training.strategy
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        self.network
            .mlp()
            .validate()
            .map_err(|e| invalid("network", e.to_string()))?;
        let t = &self.training;
        let sobolev_like = matches!(self.problem, ProblemKind::Sobolev | ProblemKind::Forgetting);
        if t.strategy == Strategy::EpsilonOptimal && !sobolev_like {
            return Err(invalid(
                "training.strategy",
                format!("epsilon-optimal weights need energy integrals, which {} does not have", self.problem),
            ));
        }
        if self.problem == ProblemKind::Forgetting && t.stages.len() < 2 {
            return Err(invalid("training.stages", "a forgetting run needs at least two stages"));
        }
        if self.output.histogram_bins == 0 {
            return Err(invalid("output.histogram_bins", "must be positive"));
        }
        match self.problem {
            ProblemKind::Sobolev | ProblemKind::Forgetting => {
                self.sobolev.validate().map_err(|e| invalid("sobolev", e.to_string()))?;
                if self.sobolev.train_fraction >= 1.0 {
                    return Err(invalid("sobolev.train_fraction", "training runs need held-out nodes"));
                }
            }
            ProblemKind::Poisson => self.poisson.validate().map_err(|e| invalid("poisson", e.to_string()))?,
            ProblemKind::StiffnessProbe => {
                let p = &self.probe;
                if p.orders.is_empty() || p.orders.iter().any(|&m| m > crate::network::jet::MAX_ORDER) {
                    return Err(invalid("probe.orders", "orders must lie in 0..=4"));
                }
                if p.k0.is_empty() || p.k0[0] == 0 || p.k0.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("probe.k0", "wavenumbers must be increasing positive integers"));
                }
                if !p.grid.is_power_of_two() || 2 * p.k0[p.k0.len() - 1] >= p.grid {
                    return Err(invalid("probe.grid", "must be a power of two above twice the largest wavenumber"));
                }
            }
        }
        if self.problem != ProblemKind::StiffnessProbe {
            let n_obj = match self.problem {
                ProblemKind::Poisson => 2,
                _ => self.sobolev.max_order + 1,
            };
            let pool = match self.problem {
                ProblemKind::Poisson => self.poisson.interior,
                _ => {
                    let n = self.sobolev.grid * self.sobolev.grid;
                    ((n as f64) * self.sobolev.train_fraction).round() as usize
                }
            };
            t.validate(n_obj, pool).map_err(|e| invalid("training", e.to_string()))?;
        }
        Ok(())
    }
}

/// Output directory: `--out` if given, otherwise `<root>/<name>` where the
/// root comes from [`OUTPUT_ROOT_ENV`] or defaults to `runs`.
pub fn output_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ProblemKind::Sobolev,
            ProblemKind::Poisson,
            ProblemKind::StiffnessProbe,
            ProblemKind::Forgetting,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| format!("unknown problem `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in preset_names() {
            let c = RunConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.extends.as_deref(), Some(name));
        }
    }

    #[test]
    fn sobolev_paper_preset() {
        let c = RunConfig::preset("sobolev-paper").unwrap();
        assert_eq!(c.training.epochs, 20000);
        assert_eq!(c.training.batch_size, 4096);
        assert_eq!(c.training.lr, 1e-3);
        assert_eq!(c.training.milestones, vec![10000, 15000]);
        assert_eq!((c.sobolev.modes, c.sobolev.grid), (20, 128));
    }

    #[test]
    fn poisson_paper_preset() {
        let c = RunConfig::preset("poisson-paper").unwrap();
        assert_eq!((c.network.hidden_layers, c.network.width), (5, 50));
        assert_eq!(c.network.activation, Activation::Tanh);
        assert_eq!(c.training.epochs, 30000);
    }

    #[test]
    fn desk_presets_override_their_parents() {
        let c = RunConfig::preset("sobolev-desk").unwrap();
        assert_eq!((c.sobolev.modes, c.sobolev.grid, c.sobolev.max_order), (5, 64, 4));
        assert_eq!((c.network.hidden_layers, c.network.width), (4, 32));
        assert_eq!(c.network.activation, Activation::Sin);
        assert_eq!(c.training.epochs, 3000);
        assert_eq!(c.training.lr, 1e-3);
        let f = RunConfig::preset("forgetting-desk").unwrap();
        assert_eq!(f.training.stages.len(), 3);
        assert_eq!(f.training.stages[1].start, 600);
        assert!(f.training.milestones.is_empty());
    }

    #[test]
    fn epsilon_optimal_poisson_is_rejected() {
        let text = "extends = \"poisson-desk\"\n[training]\nstrategy = \"epsilon-optimal\"\n";
        let e = RunConfig::from_toml(text, "test", None).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref field, .. } if field == "training.strategy"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "extends = \"sobolev-desk\"\n[training]\nepochz = 3\n";
        let e = RunConfig::from_toml(text, "test", None).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let text = "extends = \"sobolev-desk\"\n\n[training\nepochs = 3\n";
        let e = RunConfig::from_toml(text, "cfg.toml", None).unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { .. }));
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn unknown_preset_and_cycles() {
        let e = RunConfig::from_toml("extends = \"nope\"\n", "t", None).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownPreset(..)));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "extends = \"b.toml\"\n").unwrap();
        std::fs::write(dir.path().join("b.toml"), "extends = \"a.toml\"\n").unwrap();
        let e = RunConfig::from_file(&dir.path().join("a.toml")).unwrap_err();
        assert!(matches!(e, ConfigError::ExtendsCycle(_)), "{e}");
    }

    #[test]
    fn file_extends_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "extends = \"sobolev-desk\"\n[training]\nepochs = 7\n").unwrap();
        std::fs::write(dir.path().join("top.toml"), "extends = \"base.toml\"\nseeds = [4]\n").unwrap();
        let c = RunConfig::from_file(&dir.path().join("top.toml")).unwrap();
        assert_eq!(c.training.epochs, 7);
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.sobolev.grid, 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::preset("forgetting-desk").unwrap();
        let again = RunConfig::from_toml(&c.to_toml(), "round trip", None).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn output_dir_precedence() {
        assert_eq!(output_dir(Some(Path::new("x/y")), "n"), PathBuf::from("x/y"));
    }
}
