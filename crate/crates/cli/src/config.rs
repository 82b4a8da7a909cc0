//! Run configuration: one TOML file drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tlc_core::cvmodels::{DeepTdaConfig, InputMode, NetConfig, VdeConfig};
use tlc_core::dynamics::LangevinParams;
use tlc_core::flowgen::TlcConfig;
use tlc_core::SystemSpec;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub system: SystemSpec,
    #[serde(default)]
    pub langevin: LangevinSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub project: ProjectSection,
    #[serde(default)]
    pub smd: SmdSection,
    #[serde(default)]
    pub opes: OpesSection,
    #[serde(default)]
    pub fes: FesSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangevinSection {
    pub dt: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl Default for LangevinSection {
    fn default() -> Self {
        Self {
            dt: 0.005,
            gamma: 1.0,
            temperature: 1.0,
        }
    }
}

impl LangevinSection {
    pub fn params(&self, seed: u64) -> LangevinParams {
        LangevinParams {
            dt: self.dt,
            gamma: self.gamma,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_trajs_per_basin: u64,
    pub n_steps: u64,
    pub stride: u64,
    pub tau_steps: u64,
    pub exclude_transitions: bool,
    pub max_pairs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_trajs_per_basin: 5,
            n_steps: 100_000,
            stride: 10,
            tau_steps: 100,
            exclude_transitions: true,
            max_pairs: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tlc,
    Tae,
    Vde,
    Deeptda,
    Tica,
    Lda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSection {
    pub reg: f64,
    pub input_mode: Option<InputMode>,
}

impl Default for LinearSection {
    fn default() -> Self {
        Self {
            reg: 1e-6,
            input_mode: None,
        }
    }
}

/// Learner choice plus per-learner settings. Seeds inside the learner tables
/// are replaced by the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub tlc: TlcConfig,
    pub tae: NetConfig,
    pub vde: VdeConfig,
    pub deeptda: DeepTdaConfig,
    pub linear: LinearSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Tlc,
            tlc: TlcConfig::default(),
            tae: NetConfig::default(),
            vde: VdeConfig::default(),
            deeptda: DeepTdaConfig::default(),
            linear: LinearSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectSection {
    /// Landscape nodes per axis.
    pub grid_nodes: usize,
}

impl Default for ProjectSection {
    fn default() -> Self {
        Self { grid_nodes: 121 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvChoice {
    Model,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmdSection {
    pub cv: CvChoice,
    pub k: f64,
    /// When set, one sub-run per force constant plus a best-under-cap summary.
    pub k_grid: Option<Vec<f64>>,
    pub horizon_steps: u64,
    pub n_replicas: usize,
    pub record_stride: u64,
    pub equilibration_steps: u64,
    pub hit_threshold: f64,
    /// Absolute cap on the mean E_TS. When absent, the cap is the maximum
    /// energy of an unbiased batch plus `cap_margin_kt` thermal units.
    pub energy_cap: Option<f64>,
    pub cap_margin_kt: f64,
    /// Also steer along the ground-truth coordinate for comparison.
    pub reference: bool,
}

impl Default for SmdSection {
    fn default() -> Self {
        Self {
            cv: CvChoice::Model,
            k: 100.0,
            k_grid: None,
            horizon_steps: 10_000,
            n_replicas: 64,
            record_stride: 10,
            equilibration_steps: 2000,
            hit_threshold: 0.2,
            energy_cap: None,
            cap_margin_kt: 2.0,
            reference: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpesSection {
    pub cv: CvChoice,
    pub pace: u64,
    pub sigma: f64,
    pub barrier: f64,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub record_stride: u64,
    pub total_steps: u64,
}

impl Default for OpesSection {
    fn default() -> Self {
        Self {
            cv: CvChoice::Model,
            pace: 500,
            sigma: 0.1,
            barrier: 10.0,
            gamma: None,
            epsilon: None,
            record_stride: 100,
            total_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FesCoordinate {
    GroundTruth,
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FesSection {
    pub coordinate: FesCoordinate,
    pub n_bins: usize,
    pub range: Option<(f64, f64)>,
    pub burn_in_fraction: f64,
    /// Basin boundary on the coordinate. Defaults to the system's basin
    /// threshold for the ground-truth coordinate and to 0 for the CV.
    pub split: Option<f64>,
    pub checkpoint_stride: usize,
    pub tolerance_kt: f64,
    pub final_window: f64,
}

impl Default for FesSection {
    fn default() -> Self {
        Self {
            coordinate: FesCoordinate::GroundTruth,
            n_bins: 64,
            range: None,
            burn_in_fraction: 0.15,
            split: None,
            checkpoint_stride: 100,
            tolerance_kt: 0.5,
            final_window: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run directories to aggregate; defaults to `out_dir` alone.
    pub runs: Vec<PathBuf>,
}

/// Parse `key.path=value`, reading the value as a TOML literal and falling
/// back to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path crosses non-table `{p}`")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            // Straight from the text, so schema errors carry line and column.
            return toml::from_str(text).map_err(|e| CliError::Config(e.to_string()));
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            // Prefer the line-anchored message when the file itself is at fault.
            match toml::from_str::<RunConfig>(text) {
                Err(file_err) => CliError::Config(file_err.to_string()),
                Ok(_) => CliError::Config(format!("after overrides: {e}")),
            }
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Sha-256 of the canonical JSON form, leaving out where the run is written.
    pub fn hash(&self) -> String {
        let content = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn langevin_params(&self) -> LangevinParams {
        self.langevin.params(self.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.langevin_params().validate()?;
        let d = &self.data;
        if d.n_trajs_per_basin == 0 || d.n_steps == 0 || d.stride == 0 || d.max_pairs == 0 {
            return bad("data: n_trajs_per_basin, n_steps, stride and max_pairs must be positive");
        }
        if d.tau_steps == 0 || d.tau_steps % d.stride != 0 {
            return bad("data: tau_steps must be a positive multiple of stride");
        }
        self.model.tlc.validate()?;
        self.model.tae.validate()?;
        self.model.vde.net.validate()?;
        self.model.deeptda.net.validate()?;
        if !(self.model.linear.reg >= 0.0) {
            return bad("model.linear.reg must be non-negative");
        }
        let s = &self.smd;
        if let Some(grid) = &s.k_grid {
            if grid.is_empty() || grid.iter().any(|k| !(*k > 0.0)) {
                return bad("smd.k_grid must hold positive force constants");
            }
        }
        if !(s.hit_threshold > 0.0) || s.n_replicas == 0 {
            return bad("smd: hit_threshold and n_replicas must be positive");
        }
        if self.project.grid_nodes < 2 {
            return bad("project.grid_nodes must be at least 2");
        }
        let f = &self.fes;
        if f.n_bins == 0 || f.checkpoint_stride == 0 || !(0.0..1.0).contains(&f.burn_in_fraction) {
            return bad("fes: n_bins and checkpoint_stride must be positive and burn_in_fraction in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[system]\nkind = \"doublewell1d\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.data, DataSection::default());
        assert_eq!(cfg.model.kind, ModelKind::Tlc);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_tables() {
        let o = [
            "model.tlc.lambda=0".to_string(),
            "smd.k_grid=[100.0, 200.0]".to_string(),
            "model.kind=tae".to_string(),
            "system.params.tilt=0.5".to_string(),
        ];
        let cfg = RunConfig::from_toml_str(MINIMAL, &o).unwrap();
        assert_eq!(cfg.model.tlc.lambda, 0.0);
        assert_eq!(cfg.smd.k_grid, Some(vec![100.0, 200.0]));
        assert_eq!(cfg.model.kind, ModelKind::Tae);
        assert_eq!(cfg.system.params()["tilt"], 0.5);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml_str(MINIMAL, &["data.n_stpes=5".to_string()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = RunConfig::from_toml_str("[system]\nkind = \"doublewell1d\"\nbogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(matches!(
            RunConfig::from_toml_str(MINIMAL, &["noequals".to_string()]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        let b = RunConfig::from_toml_str(MINIMAL, &["seed=1".to_string()]).unwrap();
        assert_eq!(a.hash(), RunConfig::from_toml_str(MINIMAL, &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        let moved = RunConfig::from_toml_str(MINIMAL, &["out_dir=\"elsewhere\"".to_string()]).unwrap();
        assert_eq!(a.hash(), moved.hash());
    }

    #[test]
    fn lag_must_be_a_stride_multiple() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &["data.tau_steps=15".to_string()]).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
