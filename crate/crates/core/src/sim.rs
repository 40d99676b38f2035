//! Slot loop, Monte-Carlo replications, parameter sweeps and CSV export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::blockage::{enumerate_subsets, rate_of, sinr_actual, SubsetError, SubsetFamily};
use crate::channel::{apply_blockage, draw_channel, ChannelState};
use crate::config::{emit_config, ConfigError, Policy, ScenarioConfig};
use crate::geometry::{generate_geometry, Geometry};
use crate::queueing::{draw_arrivals, outage_indicator, slot_weight, update_queue, update_virtual, QueueState};
use crate::rng::Streams;
use crate::serving::{estimate_blockage, select_l, strongest_rru};
use crate::solver::{solve_subproblem, Problem, SolverOptions};

/// First line of every `slots.csv`.
pub const SLOTS_SCHEMA: &str = "# schema=robust-comp/slots/v1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Subsets(#[from] SubsetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> SimError + '_ {
    move |source| SimError::Csv { path: path.to_path_buf(), source }
}

/// One user's record of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserSlot {
    /// Arrivals `A_k(t)`, bits.
    pub arrivals: f64,
    /// Scheduled rate `r_k`, bits per slot.
    pub rate: f64,
    /// Rate the realized channel supports, `c_k`.
    pub supported: f64,
    /// `r_k > 0` and `r_k > c_k`.
    pub outage: bool,
    /// Outage indicator as seen by the scheduler, fed to the estimator.
    pub indicator: bool,
    pub served: f64,
    /// Backlog after the update, `Q_k(t + 1)`.
    pub backlog: f64,
    /// `Z_k(t + 1)`.
    pub virtual_backlog: f64,
    pub subset_size: usize,
    /// Blockage estimate used to pick `subset_size`.
    pub rho: f64,
    /// `||f_k||^2`, mW.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub replication: usize,
    /// 1-based slot index.
    pub slot: usize,
    /// Sum transmit power, mW.
    pub power_mw: f64,
    pub users: Vec<UserSlot>,
    pub solver_iterations: usize,
    pub solver_converged: bool,
}

impl SlotMetrics {
    /// `None` when nothing was transmitted.
    pub fn power_dbm(&self) -> Option<f64> {
        (self.power_mw > 0.0).then(|| 10.0 * self.power_mw.log10())
    }
}

/// Mutable state of one replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: usize,
    pub geometry: Geometry,
    pub queues: QueueState,
    pub streams: Streams,
    /// Slots completed so far.
    pub slot: usize,
}

impl Replication {
    pub fn new(cfg: &ScenarioConfig, index: usize) -> Self {
        Self {
            index,
            geometry: generate_geometry(cfg, index as u64),
            queues: QueueState::new(cfg.num_ues, cfg.averaging_window_slots),
            streams: Streams::new(cfg.master_seed, index as u64),
            slot: 0,
        }
    }
}

/// Subset families and per-user `L` for this slot's policy.
fn serving_families(
    cfg: &ScenarioConfig,
    geom: &Geometry,
    nominal: &ChannelState,
    rho: &[f64],
) -> Result<(Vec<SubsetFamily>, Vec<usize>), SubsetError> {
    let mut families = Vec::with_capacity(cfg.num_ues);
    let mut sizes = Vec::with_capacity(cfg.num_ues);
    for (k, base) in geom.serving_sets.iter().enumerate() {
        let n = base.len();
        let (base, l) = match cfg.policy() {
            Policy::Fixed(l) => (base.clone(), l.min(n)),
            Policy::Dynamic => (base.clone(), select_l(n, rho[k], cfg.violation_tolerance)),
            Policy::CbBaseline => (vec![strongest_rru(nominal, k, base)], 1),
            Policy::FullJtBaseline => (base.clone(), n),
        };
        families.push(enumerate_subsets(k, &base, l)?);
        sizes.push(l);
    }
    Ok((families, sizes))
}

/// Runs slot `rep.slot + 1`: arrivals, channel, subset choice, beamforming,
/// blockage, then the queue updates.
pub fn run_slot(rep: &mut Replication, cfg: &ScenarioConfig) -> Result<SlotMetrics, SimError> {
    let t = rep.slot + 1;
    let nk = cfg.num_ues;
    let arrivals = draw_arrivals(cfg.arrival_rate_bits_per_slot, nk, &mut rep.streams.arrivals);
    rep.queues.a.clone_from(&arrivals);
    let nominal = draw_channel(&rep.geometry, cfg, t, &mut rep.streams.fading);

    let rho: Vec<f64> = (0..nk)
        .map(|k| estimate_blockage(rep.queues.history(k), cfg.averaging_window_slots, t, cfg.blockage_prior).rho)
        .collect();
    let (families, sizes) = serving_families(cfg, &rep.geometry, &nominal, &rho)?;
    let weights: Vec<f64> = (0..nk)
        .map(|k| slot_weight(rep.queues.q[k], arrivals[k], rep.queues.z[k]))
        .collect();

    let problem = Problem {
        h: &nominal,
        families: &families,
        weights: &weights,
        v: cfg.tradeoff_v,
        noise: cfg.noise_power_mw,
    };
    let sol = solve_subproblem(&problem, &SolverOptions::from_config(cfg), &mut rep.streams.solver_init);
    let rates = sol.rates();

    let realized = apply_blockage(&nominal, cfg.blockage_prob, &mut rep.streams.blockage);
    let mut users = Vec::with_capacity(nk);
    for k in 0..nk {
        let supported = rate_of(sinr_actual(&sol.beamformers, &realized, k, cfg.noise_power_mw));
        let q = rep.queues.q[k];
        let (q_next, outage) = update_queue(q, rates[k], supported, arrivals[k]);
        let z_next = update_virtual(rep.queues.z[k], q_next, cfg.violation_tolerance, cfg.queue_threshold_bits);
        let indicator = outage_indicator(rates[k], q, arrivals[k], q_next);
        rep.queues.q[k] = q_next;
        rep.queues.z[k] = z_next;
        rep.queues.record_outage(k, indicator);
        users.push(UserSlot {
            arrivals: arrivals[k],
            rate: rates[k],
            supported,
            outage,
            indicator,
            served: if outage { 0.0 } else { rates[k] },
            backlog: q_next,
            virtual_backlog: z_next,
            subset_size: sizes[k],
            rho: rho[k],
            power: sol.beamformers.power(k),
        });
    }
    rep.slot = t;
    Ok(SlotMetrics {
        replication: rep.index,
        slot: t,
        power_mw: sol.beamformers.total_power(),
        users,
        solver_iterations: sol.iterations,
        solver_converged: sol.converged,
    })
}

/// All `num_slots` slots of replication `index`.
pub fn run_replication(cfg: &ScenarioConfig, index: usize) -> Result<Vec<SlotMetrics>, SimError> {
    let mut rep = Replication::new(cfg, index);
    (0..cfg.num_slots).map(|_| run_slot(&mut rep, cfg)).collect()
}

/// Sorted samples with step-function evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { sorted: samples }
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&s| s <= x) as f64 / self.sorted.len() as f64
    }

    /// Smallest sample with at least a `p` fraction at or below it.
    pub fn quantile(&self, p: f64) -> Option<f64> {
        let n = self.sorted.len();
        if n == 0 {
            return None;
        }
        let i = ((p.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        Some(self.sorted[i - 1])
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub policy: Policy,
    pub num_slots: usize,
    pub master_seed: u64,
    /// Replication indices; each seeds its own sub-streams.
    pub replications: Vec<usize>,
    /// Sum power averaged over slots and replications, mW.
    pub avg_power_mw: f64,
    /// Per user, pooled over slots and replications.
    pub prob_backlog_exceeds: Vec<f64>,
    /// Failed transmissions over transmissions.
    pub outage_rate: Vec<f64>,
    /// Failed transmissions over slots.
    pub outage_per_slot: Vec<f64>,
    pub mean_backlog: Vec<f64>,
    pub mean_rate: Vec<f64>,
    pub backlog_cdf: Vec<EmpiricalCdf>,
    pub rate_cdf: Vec<EmpiricalCdf>,
    pub unconverged_slots: usize,
    pub mean_solver_iterations: f64,
}

impl RunSummary {
    pub fn avg_power_dbm(&self) -> Option<f64> {
        (self.avg_power_mw > 0.0).then(|| 10.0 * self.avg_power_mw.log10())
    }

    pub fn from_slots(cfg: &ScenarioConfig, slots: &[SlotMetrics]) -> Self {
        let nk = cfg.num_ues;
        let n = slots.len().max(1) as f64;
        let mut replications: Vec<usize> = slots.iter().map(|s| s.replication).collect();
        replications.dedup();
        let per_user = |f: &dyn Fn(&UserSlot) -> f64| -> Vec<f64> {
            (0..nk).map(|k| slots.iter().map(|s| f(&s.users[k])).sum::<f64>() / n).collect()
        };
        let outage_rate = (0..nk)
            .map(|k| {
                let sent = slots.iter().filter(|s| s.users[k].rate > 0.0).count();
                let failed = slots.iter().filter(|s| s.users[k].outage).count();
                if sent == 0 { 0.0 } else { failed as f64 / sent as f64 }
            })
            .collect();
        let th = cfg.queue_threshold_bits;
        Self {
            policy: cfg.policy(),
            num_slots: cfg.num_slots,
            master_seed: cfg.master_seed,
            replications,
            avg_power_mw: slots.iter().map(|s| s.power_mw).sum::<f64>() / n,
            prob_backlog_exceeds: per_user(&|u| f64::from(u8::from(u.backlog >= th))),
            outage_rate,
            outage_per_slot: per_user(&|u| f64::from(u8::from(u.outage))),
            mean_backlog: per_user(&|u| u.backlog),
            mean_rate: per_user(&|u| u.rate),
            backlog_cdf: (0..nk)
                .map(|k| EmpiricalCdf::new(slots.iter().map(|s| s.users[k].backlog).collect()))
                .collect(),
            rate_cdf: (0..nk)
                .map(|k| EmpiricalCdf::new(slots.iter().map(|s| s.users[k].rate).collect()))
                .collect(),
            unconverged_slots: slots.iter().filter(|s| !s.solver_converged).count(),
            mean_solver_iterations: slots.iter().map(|s| s.solver_iterations as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub summary: RunSummary,
    /// Replication-major, slot-minor.
    pub slots: Vec<SlotMetrics>,
}

/// Runs every replication (concurrently) and aggregates.
pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let per_rep: Vec<Vec<SlotMetrics>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect::<Result<_, _>>()?;
    let slots: Vec<SlotMetrics> = per_rep.into_iter().flatten().collect();
    Ok(SimOutput { summary: RunSummary::from_slots(cfg, &slots), slots })
}

fn slot_header(num_ues: usize) -> Vec<String> {
    let mut h: Vec<String> = ["replication", "slot", "power_mw", "power_dbm", "solver_iterations", "solver_converged"]
        .map(String::from)
        .to_vec();
    for k in 0..num_ues {
        for col in ["a", "r", "c", "outage", "indicator", "served", "q", "z", "l", "rho", "p"] {
            h.push(format!("{col}_{k}"));
        }
    }
    h
}

fn slot_record(s: &SlotMetrics) -> Vec<String> {
    let mut rec = vec![
        s.replication.to_string(),
        s.slot.to_string(),
        s.power_mw.to_string(),
        s.power_dbm().map(|x| x.to_string()).unwrap_or_default(),
        s.solver_iterations.to_string(),
        u8::from(s.solver_converged).to_string(),
    ];
    for u in &s.users {
        rec.extend([
            u.arrivals.to_string(),
            u.rate.to_string(),
            u.supported.to_string(),
            u8::from(u.outage).to_string(),
            u8::from(u.indicator).to_string(),
            u.served.to_string(),
            u.backlog.to_string(),
            u.virtual_backlog.to_string(),
            u.subset_size.to_string(),
            u.rho.to_string(),
            u.power.to_string(),
        ]);
    }
    rec
}

/// Writes the schema line and one row per (replication, slot). Floats use
/// the shortest round-tripping representation.
pub fn write_slots<W: Write>(w: W, num_ues: usize, slots: &[SlotMetrics]) -> Result<(), csv::Error> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{SLOTS_SCHEMA}")?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record(slot_header(num_ues))?;
    for s in slots {
        c.write_record(slot_record(s))?;
    }
    c.flush()?;
    Ok(())
}

const SUMMARY_COLUMNS: [&str; 12] = [
    "policy",
    "user",
    "avg_power_mw",
    "avg_power_dbm",
    "prob_backlog_exceeds",
    "outage_rate",
    "outage_per_slot",
    "mean_backlog",
    "mean_rate",
    "replications",
    "num_slots",
    "master_seed",
];

fn summary_records(s: &RunSummary) -> Vec<Vec<String>> {
    (0..s.outage_rate.len())
        .map(|k| {
            vec![
                s.policy.to_string(),
                k.to_string(),
                s.avg_power_mw.to_string(),
                s.avg_power_dbm().map(|x| x.to_string()).unwrap_or_default(),
                s.prob_backlog_exceeds[k].to_string(),
                s.outage_rate[k].to_string(),
                s.outage_per_slot[k].to_string(),
                s.mean_backlog[k].to_string(),
                s.mean_rate[k].to_string(),
                s.replications.len().to_string(),
                s.num_slots.to_string(),
                s.master_seed.to_string(),
            ]
        })
        .collect()
}

/// One row per user.
pub fn write_summary<W: Write>(w: W, s: &RunSummary) -> Result<(), csv::Error> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(SUMMARY_COLUMNS)?;
    for rec in summary_records(s) {
        c.write_record(rec)?;
    }
    c.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<File, SimError> {
    File::create(path).map_err(io_err(path))
}

/// Writes `slots.csv`, `summary.csv` and `resolved_config.toml` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ScenarioConfig, out: &SimOutput) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("slots.csv");
    write_slots(create(&path)?, cfg.num_ues, &out.slots).map_err(csv_err(&path))?;
    let path = dir.join("summary.csv");
    write_summary(create(&path)?, &out.summary).map_err(csv_err(&path))?;
    write_resolved_config(dir, cfg)
}

pub fn write_resolved_config(dir: &Path, cfg: &ScenarioConfig) -> Result<(), SimError> {
    let path = dir.join("resolved_config.toml");
    fs::write(&path, emit_config(cfg)?).map_err(io_err(&path))
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Trade-off `V`.
    V,
    /// Blockage probability `q`.
    Q,
    /// Fixed subset size `L`.
    L,
    Policy,
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v" => Ok(SweepAxis::V),
            "q" => Ok(SweepAxis::Q),
            "l" => Ok(SweepAxis::L),
            "policy" => Ok(SweepAxis::Policy),
            _ => Err(ConfigError::Invalid(format!("unknown sweep axis `{s}` (expected V, q, L or policy)"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::V => "V",
            SweepAxis::Q => "q",
            SweepAxis::L => "L",
            SweepAxis::Policy => "policy",
        })
    }
}

fn parse_num<T: std::str::FromStr>(axis: SweepAxis, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("bad {axis} value `{value}`")))
}

/// `cfg` with one axis set to `value`, validated.
pub fn config_at(cfg: &ScenarioConfig, axis: SweepAxis, value: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::V => c.tradeoff_v = parse_num(axis, value)?,
        SweepAxis::Q => c.blockage_prob = parse_num(axis, value)?,
        SweepAxis::L => c.set_policy(Policy::Fixed(parse_num(axis, value)?)),
        SweepAxis::Policy => c.set_policy(value.parse()?),
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    pub result: Result<RunSummary, SimError>,
}

/// One full run per value with the base seed; a failing point is recorded
/// and the sweep goes on.
pub fn sweep(cfg: &ScenarioConfig, axis: SweepAxis, values: &[String]) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|v| SweepPoint {
            value: v.clone(),
            result: config_at(cfg, axis, v)
                .map_err(SimError::from)
                .and_then(|c| run_simulation(&c))
                .map(|o| o.summary),
        })
        .collect()
}

/// Consolidated table: the summary columns prefixed by axis, value and an
/// error message (empty on success).
pub fn write_sweep<W: Write>(w: W, axis: SweepAxis, points: &[SweepPoint]) -> Result<(), csv::Error> {
    let mut c = csv::Writer::from_writer(w);
    let mut header = vec!["axis", "value", "error"];
    header.extend(SUMMARY_COLUMNS);
    c.write_record(&header)?;
    for p in points {
        match &p.result {
            Ok(s) => {
                for rec in summary_records(s) {
                    let mut row = vec![axis.to_string(), p.value.clone(), String::new()];
                    row.extend(rec);
                    c.write_record(row)?;
                }
            }
            Err(e) => {
                let mut row = vec![axis.to_string(), p.value.clone(), e.to_string()];
                row.resize(header.len(), String::new());
                c.write_record(row)?;
            }
        }
    }
    c.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            antennas_per_rru: 2,
            num_slots: 12,
            replications: 2,
            ..Default::default()
        }
    }

    #[test]
    fn cdf_steps() {
        let c = EmpiricalCdf::new(vec![3.0, 1.0, 2.0, 2.0]);
        assert_eq!(c.eval(0.5), 0.0);
        assert_eq!(c.eval(2.0), 0.75);
        assert_eq!(c.eval(3.0), 1.0);
        assert_eq!(c.quantile(0.5), Some(2.0));
        assert_eq!(c.quantile(1.0), Some(3.0));
        assert_eq!(EmpiricalCdf::new(vec![]).quantile(0.5), None);
    }

    #[test]
    fn slot_records_line_up_with_header() {
        let cfg = small();
        let out = run_simulation(&cfg).unwrap();
        assert_eq!(out.slots.len(), 24);
        let h = slot_header(cfg.num_ues);
        assert!(out.slots.iter().all(|s| slot_record(s).len() == h.len()));
        assert_eq!(out.summary.replications, vec![0, 1]);
    }

    #[test]
    fn policy_families() {
        let cfg = small();
        let geom = generate_geometry(&cfg, 0);
        let mut h = ChannelState::zeros(4, 4, 1, 0);
        for k in 0..4 {
            h.h_mut(2, k)[0] = num_complex::Complex64::new(5.0, 0.0);
        }
        let rho = [0.0; 4];
        let with = |p: Policy| {
            let mut c = cfg.clone();
            c.set_policy(p);
            serving_families(&c, &geom, &h, &rho).unwrap()
        };
        let (f, l) = with(Policy::CbBaseline);
        assert!(f.iter().all(|x| x.base.to_vec() == vec![2] && x.len() == 1) && l == vec![1; 4]);
        let (f, l) = with(Policy::FullJtBaseline);
        assert!(f.iter().all(|x| x.len() == 1 && x.subsets[0].len() == 4) && l == vec![4; 4]);
        let (f, _) = with(Policy::Fixed(2));
        assert!(f.iter().all(|x| x.len() == 11));
        // no blockage seen yet: the dynamic rule serves with every RRU
        let (_, l) = with(Policy::Dynamic);
        assert_eq!(l, vec![4; 4]);
    }

    #[test]
    fn sweep_values_parse() {
        let cfg = small();
        assert_eq!(config_at(&cfg, SweepAxis::V, "10").unwrap().tradeoff_v, 10.0);
        assert_eq!(config_at(&cfg, SweepAxis::L, "3").unwrap().policy(), Policy::Fixed(3));
        assert_eq!(config_at(&cfg, SweepAxis::Policy, "cb").unwrap().policy(), Policy::CbBaseline);
        assert!(config_at(&cfg, SweepAxis::Q, "1.5").is_err());
        assert!(config_at(&cfg, SweepAxis::L, "9").is_err());
        assert!("x".parse::<SweepAxis>().is_err());
    }
}
