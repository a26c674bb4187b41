//! Run configuration: a TOML file describing the grid, the scenario, the
//! solver settings, and optional CSV overrides for price, fleet, and
//! uncontrollable net loads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::grid::load_grid;
use crate::scenario::{
    build_instance, load_fleet_csv, load_netload_csv, load_price_csv, BaselineLoad, Instance,
    ScenarioConfig,
};

/// Top-level run configuration, loaded from TOML. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the grid description file.
    pub grid: PathBuf,
    /// Objective weight converting kWh of line loss into dollars.
    #[serde(default = "default_loss_weight")]
    pub loss_weight: f64,
    /// Optional wholesale price CSV (`step,usd_per_kwh`); synthetic
    /// double-peak curve when absent.
    #[serde(default)]
    pub price_csv: Option<PathBuf>,
    /// Optional fleet CSV replacing the sampled fleet.
    #[serde(default)]
    pub fleet_csv: Option<PathBuf>,
    /// Optional uncontrollable net-load CSV replacing the synthetic
    /// per-EVB profiles (profiles are assigned to EVBs in round-robin).
    #[serde(default)]
    pub netload_csv: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    /// Fixed baseline loads at named buses.
    #[serde(default)]
    pub baseline_loads: Vec<BaselineLoad>,
}

fn default_loss_weight() -> f64 {
    1.0
}

impl RunConfig {
    /// Parse `path` and resolve all contained paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.grid = resolve(base, &cfg.grid);
        for p in [&mut cfg.price_csv, &mut cfg.fleet_csv, &mut cfg.netload_csv]
            .into_iter()
            .flatten()
        {
            *p = resolve(base, p);
        }
        Ok(cfg)
    }

    /// Assemble the full problem instance: load the grid, sample or load
    /// the fleet and profiles, and apply any CSV overrides.
    pub fn build(&self) -> Result<Instance> {
        let net = load_grid(&self.grid)?;
        let horizon = self.scenario.horizon();
        let price = self
            .price_csv
            .as_deref()
            .map(|p| load_price_csv(p, &horizon))
            .transpose()?;
        let mut inst =
            build_instance(net, &self.scenario, &self.baseline_loads, price, self.loss_weight)?;

        if let Some(path) = self.fleet_csv.as_deref() {
            let sessions = load_fleet_csv(path, &horizon)?;
            for node in &mut inst.nodes {
                let mine: Vec<_> = sessions
                    .iter()
                    .filter(|s| s.agg_id == node.bus_id)
                    .cloned()
                    .collect();
                if mine.is_empty() {
                    return Err(Error::ConfigInvalid(format!(
                        "fleet file {} has no EVs for aggregator bus {}",
                        path.display(),
                        node.bus_id
                    )));
                }
                // Keep one synthetic profile per loaded EV (round-robin
                // over the sampled ones) unless a net-load file follows.
                let base = node.profiles.clone();
                node.profiles =
                    (0..mine.len()).map(|i| base[i % base.len()].clone()).collect();
                node.sessions = mine;
            }
        }

        if let Some(path) = self.netload_csv.as_deref() {
            let profiles = load_netload_csv(path, &horizon)?;
            if profiles.is_empty() {
                return Err(Error::ConfigInvalid(format!(
                    "net-load file {} contains no profiles",
                    path.display()
                )));
            }
            let mut next = 0usize;
            for node in &mut inst.nodes {
                for slot in node.profiles.iter_mut() {
                    *slot = profiles[next % profiles.len()].clone();
                    next += 1;
                }
            }
        }

        inst.validate()?;
        Ok(inst)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
