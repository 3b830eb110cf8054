//! Scenario configuration files for the simulation subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cislunar_core::ekf::EkfConfig;
use cislunar_core::family::FamilyCatalog;
use cislunar_core::model::MprModel;
use cislunar_core::nmpc::{ControllerMode, SolverSettings};
use cislunar_core::sim::{self, Disturbance, Scenario};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    FixedChi,
    VariableChi,
    FixedOrbit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub np: usize,
    pub nc: usize,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    /// Fixed-orbit target; defaults to the scenario member.
    #[serde(default)]
    pub chi_ref: Option<f64>,
    #[serde(default)]
    pub chi_bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub ts: Option<f64>,
    #[serde(default)]
    pub ts_hat: Option<f64>,
    #[serde(default)]
    pub q_diag: Option<[f64; 6]>,
    #[serde(default)]
    pub qt_diag: Option<[f64; 6]>,
    #[serde(default)]
    pub r_diag: Option<[f64; 3]>,
    #[serde(default)]
    pub dv_bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_mode() -> ModeName {
    ModeName::VariableChi
}

fn default_revolutions() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub np: Vec<usize>,
    pub nc: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub runs: usize,
    /// Standard deviation of the initial-state offset, per component.
    #[serde(default = "default_mc_dispersion")]
    pub dispersion: f64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_mc_dispersion() -> f64 {
    1e-3
}

fn default_bins() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Catalog and model paths, relative to the configuration file.
    pub catalog: PathBuf,
    pub model: PathBuf,
    /// Catalog index of the reference member; defaults to the middle of the
    /// slice holding the catalog midpoint.
    #[serde(default)]
    pub member: Option<usize>,
    #[serde(default = "default_revolutions")]
    pub revolutions: usize,
    #[serde(default)]
    pub disturbance: Disturbance,
    #[serde(default)]
    pub dispersion: f64,
    #[serde(default = "default_true")]
    pub estimate_error: bool,
    #[serde(default)]
    pub seed: u64,
    pub controller: ControllerSection,
    #[serde(default)]
    pub ekf: EkfConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloSection>,
}

pub struct Loaded {
    pub file: ScenarioFile,
    pub model: MprModel,
    pub scenario: Scenario,
}

fn diag<const N: usize>(d: [f64; N]) -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for i in 0..N {
        m[i][i] = d[i];
    }
    m
}

pub fn load(path: &Path, seed: Option<u64>, mu: Option<f64>) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: ScenarioFile = serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow::anyhow!("config {}: at `{}`: {}", path.display(), e.path(), e.inner()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let catalog_path = base.join(&file.catalog);
    let model_path = base.join(&file.model);
    let catalog = FamilyCatalog::load(&catalog_path)
        .with_context(|| format!("loading catalog {}", catalog_path.display()))?;
    let model = MprModel::load(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    if model.tag != catalog.tag || model.mu != catalog.mu {
        bail!("model {} does not belong to catalog {}", model.tag, catalog.tag);
    }
    if let Some(mu) = mu {
        if mu != model.mu {
            bail!("--mu {mu} disagrees with the model's mu {}", model.mu);
        }
    }

    let index = match file.member {
        Some(i) => i,
        None => sim::nominal_member(&catalog, &model)?,
    };
    let c = &file.controller;
    let mut scenario = sim::default_scenario(&catalog, &model, index, c.np, c.nc, ControllerMode::VariableChi)?;
    let member_chi = scenario.member.chi;
    scenario.nmpc.mode = match c.mode {
        ModeName::FixedChi => ControllerMode::FixedChi,
        ModeName::VariableChi => ControllerMode::VariableChi,
        ModeName::FixedOrbit => ControllerMode::FixedOrbit {
            chi_ref: c.chi_ref.unwrap_or(member_chi),
        },
    };
    if c.chi_ref.is_some() && c.mode != ModeName::FixedOrbit {
        bail!("config: at `controller.chi_ref`: only valid with mode fixed_orbit");
    }
    let n = &mut scenario.nmpc;
    if let Some(b) = c.chi_bounds {
        n.chi_bounds = b;
    }
    if let Some(ts) = c.ts {
        n.ts = ts;
        n.ts_hat = ts / cislunar_core::nmpc::DEFAULT_CONTROL_RATIO as f64;
    }
    if let Some(h) = c.ts_hat {
        n.ts_hat = h;
    }
    if let Some(d) = c.q_diag {
        n.q = diag(d);
    }
    if let Some(d) = c.qt_diag {
        n.qt = diag(d);
    }
    if let Some(d) = c.r_diag {
        n.r = diag(d);
    }
    if let Some(b) = c.dv_bounds {
        n.dv_bounds = b;
    }
    n.solver = c.solver;
    scenario.revolutions = file.revolutions;
    scenario.disturbance = file.disturbance;
    scenario.dispersion = file.dispersion;
    scenario.estimate_error = file.estimate_error;
    scenario.ekf = file.ekf;
    scenario.seed = seed.unwrap_or(file.seed);
    scenario.validate()?;
    Ok(Loaded {
        file,
        model,
        scenario,
    })
}
