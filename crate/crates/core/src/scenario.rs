//! Experiment inputs: EV fleets, netload profiles, prices, and the
//! assembled problem instance. All randomness is seeded and reproducible.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::devices::{AggregatorNode, BesUnit, EvSession, EvbProfile};
use crate::error::{Error, Result};
use crate::grid::RadialNetwork;
use crate::Horizon;

/// Wholesale energy price per step [$ / kWh].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub values: Vec<f64>,
}

impl PriceSeries {
    pub fn validate(&self, horizon: &Horizon) -> Result<()> {
        if self.values.len() != horizon.n {
            return Err(Error::DimensionMismatch(format!(
                "price series length {} != horizon {}",
                self.values.len(),
                horizon.n
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid("price series has non-finite values".into()));
        }
        Ok(())
    }
}

/// Fixed baseline load at one (typically non-aggregator) bus, shaped by
/// the shared daily profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineLoad {
    pub bus: u32,
    /// Peak active load [kW].
    pub peak_kw: f64,
    /// Reactive-to-active ratio (tan phi).
    pub q_ratio: f64,
}

/// Stationary-battery parameters applied to every aggregator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BesConfig {
    pub c0_kwh: f64,
    pub c_min_kwh: f64,
    pub c_max_kwh: f64,
    pub eta: f64,
    pub s_rating_kva: f64,
}

impl Default for BesConfig {
    fn default() -> Self {
        BesConfig { c0_kwh: 30.0, c_min_kwh: 5.0, c_max_kwh: 55.0, eta: 0.95, s_rating_kva: 50.0 }
    }
}

/// Fleet and profile generation parameters.
///
/// Arrival and departure wall-clock windows are interpreted as
/// `mean +/- 2 sigma` of a normal distribution (mean at the window
/// center), with samples clipped to the window. The horizon is anchored
/// so evening arrivals and next-morning departures fall in one day.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub evs_per_agg: usize,
    pub horizon_steps: usize,
    pub step_hours: f64,
    /// Wall-clock time of step 0, "HH:MM".
    pub anchor: String,
    pub c0_range_kwh: [f64; 2],
    pub target_range_kwh: [f64; 2],
    pub arrival_window: [String; 2],
    pub departure_window: [String; 2],
    pub ev_capacity_kwh: f64,
    pub ev_eta: f64,
    pub ev_p_max_kw: f64,
    pub ev_p_min_kw: f64,
    pub bes: Option<BesConfig>,
    /// Mean per-EVB net-load scale [kW]; individual EVBs vary +/-30 %.
    pub evb_base_load_kw: f64,
    /// Reactive-to-active ratio of EVB consumption.
    pub evb_q_ratio: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            evs_per_agg: 20,
            horizon_steps: 48,
            step_hours: 0.5,
            anchor: "12:00".into(),
            c0_range_kwh: [8.0, 10.0],
            target_range_kwh: [22.0, 25.0],
            arrival_window: ["16:30".into(), "20:30".into()],
            departure_window: ["06:00".into(), "09:30".into()],
            ev_capacity_kwh: 30.0,
            ev_eta: 0.95,
            ev_p_max_kw: 4.0,
            ev_p_min_kw: -4.0,
            bes: Some(BesConfig::default()),
            evb_base_load_kw: 2.0,
            evb_q_ratio: 0.33,
        }
    }
}

impl ScenarioConfig {
    pub fn horizon(&self) -> Horizon {
        Horizon { n: self.horizon_steps, step_hours: self.step_hours }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.horizon_steps == 0 || self.step_hours <= 0.0 {
            return bad("horizon must be positive");
        }
        if self.c0_range_kwh[0] > self.c0_range_kwh[1]
            || self.target_range_kwh[0] > self.target_range_kwh[1]
        {
            return bad("energy ranges must be ordered");
        }
        if self.c0_range_kwh[1] > self.target_range_kwh[0] {
            return bad("initial-energy range must lie below the target range");
        }
        if self.target_range_kwh[1] > self.ev_capacity_kwh {
            return bad("target range exceeds EV capacity");
        }
        let h = self.horizon();
        let arr = self.window_steps(&self.arrival_window)?;
        let dep = self.window_steps(&self.departure_window)?;
        if arr.1 >= dep.0 {
            return bad("arrival window must close before the departure window opens");
        }
        if dep.1 > h.n {
            return bad("departure window outside horizon");
        }
        parse_hhmm(&self.anchor)?;
        Ok(())
    }

    /// Map a wall-clock window to (earliest, latest) step indices.
    fn window_steps(&self, window: &[String; 2]) -> Result<(usize, usize)> {
        Ok((self.time_to_step(&window[0])?, self.time_to_step(&window[1])?))
    }

    /// Floor a wall-clock "HH:MM" to the containing step index, measured
    /// from the anchor (wrapping past midnight).
    pub fn time_to_step(&self, hhmm: &str) -> Result<usize> {
        let anchor = parse_hhmm(&self.anchor)?;
        let t = parse_hhmm(hhmm)?;
        let hours = self.hours_since_anchor(t, anchor);
        Ok((hours / self.step_hours).floor() as usize)
    }

    fn hours_since_anchor(&self, t: f64, anchor: f64) -> f64 {
        let mut h = t - anchor;
        if h < 0.0 {
            h += 24.0;
        }
        h
    }
}

fn parse_hhmm(s: &str) -> Result<f64> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::ConfigInvalid(format!("bad wall-clock time '{s}' (want HH:MM)"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let h: f64 = parts[0].parse().map_err(|_| bad())?;
    let m: f64 = parts[1].parse().map_err(|_| bad())?;
    if !(0.0..24.0).contains(&h) || !(0.0..60.0).contains(&m) {
        return Err(bad());
    }
    Ok(h + m / 60.0)
}

/// Draw a seeded, reproducible EV fleet for the given aggregators.
///
/// Arrival/departure wall-clock times are drawn from clipped normals over
/// the configured windows; energies are uniform over their ranges. Every
/// returned session satisfies the feasibility invariant by construction.
pub fn sample_fleet(config: &ScenarioConfig, agg_ids: &[u32]) -> Result<Vec<EvSession>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let horizon = config.horizon();
    let anchor = parse_hhmm(&config.anchor)?;
    let mut sessions = Vec::new();
    let mut ev_id = 0u32;
    for &agg_id in agg_ids {
        for _ in 0..config.evs_per_agg {
            let arrival_h = sample_window_time(config, &config.arrival_window, anchor, &mut rng)?;
            let departure_h =
                sample_window_time(config, &config.departure_window, anchor, &mut rng)?;
            let arrival_step = (arrival_h / config.step_hours).floor() as usize;
            let departure_step = (departure_h / config.step_hours).floor() as usize;
            let c0 = rng.gen_range(config.c0_range_kwh[0]..=config.c0_range_kwh[1]);
            let c_target =
                rng.gen_range(config.target_range_kwh[0]..=config.target_range_kwh[1]);
            let session = EvSession {
                ev_id,
                agg_id,
                arrival_step,
                departure_step: departure_step.min(horizon.n),
                c0,
                c_target,
                capacity: config.ev_capacity_kwh,
                eta: config.ev_eta,
                p_min: config.ev_p_min_kw,
                p_max: config.ev_p_max_kw,
            };
            session.validate(&horizon)?;
            sessions.push(session);
            ev_id += 1;
        }
    }
    Ok(sessions)
}

/// Hours since the anchor, drawn from the clipped normal over a window.
fn sample_window_time(
    config: &ScenarioConfig,
    window: &[String; 2],
    anchor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let a = config.hours_since_anchor(parse_hhmm(&window[0])?, anchor);
    let b = config.hours_since_anchor(parse_hhmm(&window[1])?, anchor);
    let mean = 0.5 * (a + b);
    let sigma = (b - a) / 4.0;
    let dist = Normal::new(mean, sigma)
        .map_err(|e| Error::ConfigInvalid(format!("window distribution: {e}")))?;
    Ok(dist.sample(rng).clamp(a, b))
}

// ---------------------------------------------------------------------------
// Synthetic default curves
// ---------------------------------------------------------------------------

fn gauss(h: f64, center: f64, width: f64) -> f64 {
    let d = (h - center) / width;
    (-0.5 * d * d).exp()
}

/// Normalized daily load shape (peak = 1) over hours since 12:00 noon:
/// evening peak around 19:00, smaller morning peak around 07:30, low
/// night valley.
pub fn daily_load_shape(hours_since_noon: f64) -> f64 {
    let h = hours_since_noon.rem_euclid(24.0);
    let v = 0.35 + 0.65 * gauss(h, 7.0, 2.2) + 0.30 * gauss(h, 19.5, 1.6) - 0.12 * gauss(h, 1.0, 2.0);
    v.max(0.05)
}

/// Double-peak wholesale price curve [$ / kWh], qualitatively CAISO-like:
/// cheap overnight, moderate morning peak, pronounced evening peak.
pub fn synthetic_price(horizon: &Horizon) -> PriceSeries {
    let values = (0..horizon.n)
        .map(|t| {
            let h = (t as f64 + 0.5) * horizon.step_hours; // hours since noon
            0.05 + 0.20 * gauss(h, 7.0, 1.8) + 0.06 * gauss(h, 19.5, 1.5) - 0.015 * gauss(h, 14.0, 2.5)
        })
        .collect();
    PriceSeries { values }
}

/// Per-EVB net load: scaled daily shape with a midday solar dip.
fn synthetic_evb_profile(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> EvbProfile {
    let horizon = config.horizon();
    let scale = config.evb_base_load_kw * rng.gen_range(0.7..1.3);
    let solar = config.evb_base_load_kw * rng.gen_range(0.3..1.0);
    let mut p_uc = Vec::with_capacity(horizon.n);
    let mut q_uc = Vec::with_capacity(horizon.n);
    for t in 0..horizon.n {
        let h = (t as f64 + 0.5) * horizon.step_hours;
        let load = scale * daily_load_shape(h);
        let pv = solar * gauss(h, 2.0, 2.6); // solar output, early afternoon
        p_uc.push(load - pv);
        q_uc.push(config.evb_q_ratio * load);
    }
    EvbProfile { p_uc, q_uc }
}

// ---------------------------------------------------------------------------
// Assembled instance
// ---------------------------------------------------------------------------

/// Everything the solvers need for one run.
#[derive(Debug, Clone)]
pub struct Instance {
    pub net: RadialNetwork,
    pub nodes: Vec<AggregatorNode>,
    /// Fixed baseline load per bus `[bus][t]` [kW], consumption positive.
    pub base_p: Vec<Vec<f64>>,
    pub base_q: Vec<Vec<f64>>,
    pub price: PriceSeries,
    pub horizon: Horizon,
    /// Objective weight converting kWh of line loss into dollars.
    pub loss_weight: f64,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        self.price.validate(&self.horizon)?;
        for node in &self.nodes {
            node.validate(&self.horizon)?;
            if self.net.bus_index(node.bus_id).is_none() {
                return Err(Error::UnknownBus(node.bus_id));
            }
        }
        if self.base_p.len() != self.net.n_buses() || self.base_q.len() != self.net.n_buses() {
            return Err(Error::DimensionMismatch("baseline load arrays".into()));
        }
        Ok(())
    }

    /// Network bus index of each aggregator, in node order.
    pub fn agg_bus_indices(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .map(|n| self.net.bus_index(n.bus_id).expect("validated"))
            .collect()
    }
}

/// Build a fully synthetic instance on a network: sampled fleet, synthetic
/// EVB profiles, synthetic price (unless one is supplied), baseline loads
/// from the shared daily shape.
pub fn build_instance(
    net: RadialNetwork,
    config: &ScenarioConfig,
    baselines: &[BaselineLoad],
    price: Option<PriceSeries>,
    loss_weight: f64,
) -> Result<Instance> {
    config.validate()?;
    let horizon = config.horizon();
    let agg_ids: Vec<u32> = net.agg_buses.clone();
    if agg_ids.is_empty() {
        return Err(Error::ConfigInvalid("network declares no aggregator buses".into()));
    }
    let sessions = sample_fleet(config, &agg_ids)?;
    // Separate stream for profiles so fleet draws stay stable if the
    // profile model changes.
    let mut prof_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut nodes = Vec::new();
    for (ai, &agg_id) in agg_ids.iter().enumerate() {
        let my_sessions: Vec<EvSession> = sessions
            .iter()
            .filter(|s| s.agg_id == agg_id)
            .cloned()
            .collect();
        let profiles = (0..my_sessions.len())
            .map(|_| synthetic_evb_profile(config, &mut prof_rng))
            .collect();
        nodes.push(AggregatorNode {
            agg_id: ai as u32,
            bus_id: agg_id,
            bes: config.bes.as_ref().map(|b| BesUnit {
                c0: b.c0_kwh,
                c_min: b.c_min_kwh,
                c_max: b.c_max_kwh,
                eta: b.eta,
                s_rating: b.s_rating_kva,
            }),
            sessions: my_sessions,
            profiles,
        });
    }
    let mut base_p = vec![vec![0.0; horizon.n]; net.n_buses()];
    let mut base_q = vec![vec![0.0; horizon.n]; net.n_buses()];
    for bl in baselines {
        let bi = net.bus_index(bl.bus).ok_or(Error::UnknownBus(bl.bus))?;
        for t in 0..horizon.n {
            let h = (t as f64 + 0.5) * horizon.step_hours;
            let p = bl.peak_kw * daily_load_shape(h);
            base_p[bi][t] += p;
            base_q[bi][t] += bl.q_ratio * p;
        }
    }
    let price = match price {
        Some(p) => {
            p.validate(&horizon)?;
            p
        }
        None => synthetic_price(&horizon),
    };
    let inst = Instance { net, nodes, base_p, base_q, price, horizon, loss_weight };
    inst.validate()?;
    Ok(inst)
}

/// Small 4-bus reference instance: a feeder chain with two aggregators
/// (three EVs each, one with a battery), used by tests and docs.
pub fn desk_instance(seed: u64) -> Instance {
    use crate::grid::{build_network, Bus, Line};
    let buses = vec![
        Bus { id: 1, is_root: true, v_min_sq: 1.0, v_max_sq: 1.0, v_ref_sq: 1.0 },
        Bus { id: 2, is_root: false, v_min_sq: 0.9409, v_max_sq: 1.0609, v_ref_sq: 1.0 },
        Bus { id: 3, is_root: false, v_min_sq: 0.9409, v_max_sq: 1.0609, v_ref_sq: 1.0 },
        Bus { id: 4, is_root: false, v_min_sq: 0.9409, v_max_sq: 1.0609, v_ref_sq: 1.0 },
    ];
    let lines = vec![
        Line { from: 1, to: 2, r: 0.006, x: 0.012 },
        Line { from: 2, to: 3, r: 0.008, x: 0.010 },
        Line { from: 2, to: 4, r: 0.010, x: 0.008 },
    ];
    let net = build_network(buses, lines, 1000.0, 4.16, vec![3, 4]).expect("valid desk grid");
    let config = ScenarioConfig {
        seed,
        evs_per_agg: 3,
        evb_base_load_kw: 3.0,
        bes: Some(BesConfig { c0_kwh: 30.0, ..BesConfig::default() }),
        ..ScenarioConfig::default()
    };
    let baselines = vec![BaselineLoad { bus: 2, peak_kw: 220.0, q_ratio: 0.35 }];
    let mut inst = build_instance(net, &config, &baselines, None, 1.0).expect("desk instance");
    // Only the first aggregator keeps its battery.
    if let Some(node) = inst.nodes.get_mut(1) {
        node.bes = None;
    }
    inst
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?)
}

fn require_column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: format!("missing column '{name}'"),
        })
}

fn parse_field(rec: &csv::StringRecord, idx: usize, path: &Path, row: usize) -> Result<f64> {
    rec.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: format!("row {row}: bad numeric field"),
        })
}

/// Average `values` down to `n` steps; the file length must be an integer
/// multiple of `n`.
fn resample(values: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    if values.len() == n {
        return Ok(values);
    }
    if values.len() % n != 0 || values.is_empty() {
        return Err(Error::WrongHorizon { found: values.len(), expected: n });
    }
    let k = values.len() / n;
    Ok((0..n)
        .map(|i| values[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64)
        .collect())
}

/// Load a price CSV with header `step,usd_per_kwh`, resampling by
/// integer-ratio averaging to the horizon.
pub fn load_price_csv(path: &Path, horizon: &Horizon) -> Result<PriceSeries> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?
        .clone();
    let col = require_column(&headers, "usd_per_kwh", path)?;
    require_column(&headers, "step", path)?;
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        values.push(parse_field(&rec, col, path, row)?);
    }
    let series = PriceSeries { values: resample(values, horizon.n)? };
    series.validate(horizon)?;
    Ok(series)
}

/// Load EVB netload profiles with header `step,p_uc_kw,q_uc_kvar`.
/// Several profiles may be concatenated; each restarts at step 0.
pub fn load_netload_csv(path: &Path, horizon: &Horizon) -> Result<Vec<EvbProfile>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?
        .clone();
    let step_col = require_column(&headers, "step", path)?;
    let p_col = require_column(&headers, "p_uc_kw", path)?;
    let q_col = require_column(&headers, "q_uc_kvar", path)?;
    let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut prev_step = usize::MAX;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let step = parse_field(&rec, step_col, path, row)? as usize;
        if step == 0 || prev_step == usize::MAX {
            blocks.push((Vec::new(), Vec::new()));
        }
        prev_step = step;
        let block = blocks.last_mut().unwrap();
        block.0.push(parse_field(&rec, p_col, path, row)?);
        block.1.push(parse_field(&rec, q_col, path, row)?);
    }
    blocks
        .into_iter()
        .map(|(p, q)| {
            Ok(EvbProfile { p_uc: resample(p, horizon.n)?, q_uc: resample(q, horizon.n)? })
        })
        .collect()
}

/// Load a fleet CSV with header
/// `agg_id,arrival_step,departure_step,c0_kwh,target_kwh,capacity_kwh,eta,p_min_kw,p_max_kw`.
pub fn load_fleet_csv(path: &Path, horizon: &Horizon) -> Result<Vec<EvSession>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?
        .clone();
    let cols: Vec<usize> = [
        "agg_id",
        "arrival_step",
        "departure_step",
        "c0_kwh",
        "target_kwh",
        "capacity_kwh",
        "eta",
        "p_min_kw",
        "p_max_kw",
    ]
    .iter()
    .map(|c| require_column(&headers, c, path))
    .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let f = |i: usize| parse_field(&rec, cols[i], path, row);
        let session = EvSession {
            ev_id: row as u32,
            agg_id: f(0)? as u32,
            arrival_step: f(1)? as usize,
            departure_step: f(2)? as usize,
            c0: f(3)?,
            c_target: f(4)?,
            capacity: f(5)?,
            eta: f(6)?,
            p_min: f(7)?,
            p_max: f(8)?,
        };
        session.validate(horizon)?;
        out.push(session);
    }
    Ok(out)
}

pub fn write_fleet_csv(path: &Path, sessions: &[EvSession]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "agg_id,arrival_step,departure_step,c0_kwh,target_kwh,capacity_kwh,eta,p_min_kw,p_max_kw"
    )?;
    for s in sessions {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            s.agg_id,
            s.arrival_step,
            s.departure_step,
            s.c0,
            s.c_target,
            s.capacity,
            s.eta,
            s.p_min,
            s.p_max
        )?;
    }
    Ok(())
}

pub fn write_price_csv(path: &Path, price: &PriceSeries) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,usd_per_kwh")?;
    for (t, v) in price.values.iter().enumerate() {
        writeln!(f, "{t},{v}")?;
    }
    Ok(())
}

pub fn write_netload_csv(path: &Path, profiles: &[EvbProfile]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,p_uc_kw,q_uc_kvar")?;
    for prof in profiles {
        for t in 0..prof.p_uc.len() {
            writeln!(f, "{},{},{}", t, prof.p_uc[t], prof.q_uc[t])?;
        }
    }
    Ok(())
}
