//! Self-checks run by `robust-comp validate`: pipeline invariants on short
//! simulations plus the numerical properties of the building blocks.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blockage::{enumerate_subsets, subset_count, CrossGains, SubsetFamily};
use crate::channel::ChannelState;
use crate::config::{Policy, ScenarioConfig};
use crate::serving::success_prob;
use crate::sim::{run_simulation, write_slots, SlotMetrics};
use crate::solver::{fp_surrogate, solve_subproblem, update_aux_nu, Problem, SolverOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }
}

/// Parsed `slots.csv`: header plus raw records.
#[derive(Debug, Clone)]
pub struct SlotTable {
    pub header: Vec<String>,
    pub rows: Vec<csv::StringRecord>,
}

impl SlotTable {
    /// Skips `#` comment lines such as the schema line.
    pub fn parse(text: &str) -> Result<Self, csv::Error> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric cell; empty cells read as NaN.
    pub fn value(&self, row: usize, name: &str) -> f64 {
        let i = self.column(name).unwrap_or_else(|| panic!("no column {name}"));
        self.rows[row][i].parse().unwrap_or(f64::NAN)
    }
}

pub fn slots_csv(num_ues: usize, slots: &[SlotMetrics]) -> String {
    let mut buf = Vec::new();
    write_slots(&mut buf, num_ues, slots).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8 csv")
}

/// Largest violation of `Q(t+1) = max(0, Q(t) - served + A)` recomputed from
/// the table alone; backlogs start at zero in every replication.
pub fn conservation_error(t: &SlotTable, num_ues: usize) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..num_ues {
        let mut prev = 0.0;
        for row in 0..t.rows.len() {
            if t.value(row, "slot") == 1.0 {
                prev = 0.0;
            }
            let q = t.value(row, &format!("q_{k}"));
            let expect = (prev - t.value(row, &format!("served_{k}")) + t.value(row, &format!("a_{k}"))).max(0.0);
            worst = worst.max((q - expect).abs());
            prev = q;
        }
    }
    worst
}

/// Largest relative gap between the sum-power column and the per-user norms.
pub fn power_accounting_error(t: &SlotTable, num_ues: usize) -> f64 {
    (0..t.rows.len())
        .map(|row| {
            let total = t.value(row, "power_mw");
            let sum: f64 = (0..num_ues).map(|k| t.value(row, &format!("p_{k}"))).sum();
            (total - sum).abs() / total.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

/// Circularly-symmetric Gaussian channel with unit-variance entries.
pub fn random_channel<R: Rng + ?Sized>(nb: usize, nk: usize, n: usize, rng: &mut R) -> ChannelState {
    let mut h = ChannelState::zeros(nb, nk, n, 0);
    for b in 0..nb {
        for k in 0..nk {
            for x in h.h_mut(b, k) {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *x = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
            }
        }
    }
    h
}

/// Every user served by all RRUs with subsets of size at least `l`.
pub fn full_families(nb: usize, nk: usize, l: usize) -> Vec<SubsetFamily> {
    let base: Vec<usize> = (0..nb).collect();
    (0..nk).map(|k| enumerate_subsets(k, &base, l).expect("valid subset size")).collect()
}

/// Worst stationarity and complementary-slackness residuals of converged
/// solves on random `B = K = N = 2`, `L = 1` instances, and how many converged.
pub fn kkt_residuals(instances: usize, seed: u64) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let families = full_families(2, 2, 1);
    let (mut stat, mut cs, mut converged) = (0.0f64, 0.0f64, 0);
    for _ in 0..instances {
        let h = random_channel(2, 2, 2, &mut rng);
        let weights = [rng.random_range(0.5..10.0), rng.random_range(0.5..10.0)];
        let p = Problem { h: &h, families: &families, weights: &weights, v: 1.0, noise: 1.0 };
        let r = solve_subproblem(&p, &SolverOptions::default(), &mut rng);
        if r.converged {
            converged += 1;
            stat = stat.max(r.stationarity);
            cs = cs.max(r.cs_residuals.iter().fold(0.0, |a, x| a.max(x.abs())));
        }
    }
    (stat, cs, converged)
}

/// Worst `|surrogate(nu*) - SINR|` over random instances and hypotheses.
pub fn fp_identity_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (nb, nk, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let h = random_channel(nb, nk, n, &mut rng);
        let mut f = crate::blockage::Beamformers::zeros(nk, nb, n);
        for k in 0..nk {
            for x in f.stacked_mut(k) {
                *x = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            }
        }
        let noise = rng.random_range(0.1..2.0);
        let gains = CrossGains::new(&h, &f);
        let families = full_families(nb, nk, 1);
        for (k, fam) in families.iter().enumerate() {
            for c in 0..fam.len() {
                let mask = fam.reach(c, nb);
                let nu = update_aux_nu(&gains, mask, k, noise);
                let s = fp_surrogate(&gains, mask, k, nu, noise);
                worst = worst.max((s - gains.sinr(mask, k, noise)).abs());
            }
        }
    }
    worst
}

/// Subset enumeration against power-set filtering for every `n <= 8`.
fn combinatorics_ok() -> bool {
    (1..=8usize).all(|n| {
        (1..=n).all(|l| {
            let base: Vec<usize> = (0..n).collect();
            let fam = enumerate_subsets(0, &base, l).expect("valid");
            let brute: Vec<u64> = (0u64..1 << n).filter(|m| m.count_ones() as usize >= l).collect();
            let mut got: Vec<u64> = fam.subsets.iter().map(|s| s.0).collect();
            got.sort_unstable();
            subset_count(n, l) == Ok(brute.len() as u64) && got == brute
        })
    })
}

fn success_prob_ok() -> bool {
    (1..=8usize).all(|n| {
        (1..=n).all(|l| {
            (0..=10).all(|i| {
                let rho = i as f64 / 10.0;
                let direct: f64 = (0u32..1 << n)
                    .filter(|m| m.count_ones() as usize >= l)
                    .map(|m| (1.0 - rho).powi(m.count_ones() as i32) * rho.powi(n as i32 - m.count_ones() as i32))
                    .sum();
                success_prob(n, l, rho).is_ok_and(|p| (p - direct).abs() < 1e-12)
            })
        })
    })
}

/// `cfg` shrunk to a few short replications.
fn small(cfg: &ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        antennas_per_rru: cfg.antennas_per_rru.min(4),
        num_slots: cfg.num_slots.min(40),
        replications: cfg.replications.min(2),
        ..cfg.clone()
    }
}

fn sim_check(name: &'static str, cfg: &ScenarioConfig, f: impl FnOnce(&[SlotMetrics]) -> (bool, String)) -> Check {
    match run_simulation(cfg) {
        Ok(out) => {
            let (ok, detail) = f(&out.slots);
            Check::new(name, ok, detail)
        }
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Runs every check; none of them aborts the others.
pub fn run_checks(cfg: &ScenarioConfig) -> Vec<Check> {
    let base = small(cfg);
    let nk = base.num_ues;
    let mut out = Vec::new();

    out.push(sim_check("csv conservation and power accounting", &base, |slots| {
        let csv = slots_csv(nk, slots);
        match SlotTable::parse(&csv) {
            Ok(t) => {
                let (c, p) = (conservation_error(&t, nk), power_accounting_error(&t, nk));
                (c == 0.0 && p <= 1e-9, format!("backlog error {c:e}, power error {p:e}"))
            }
            Err(e) => (false, e.to_string()),
        }
    }));

    out.push(match (run_simulation(&base), run_simulation(&base)) {
        (Ok(a), Ok(b)) => {
            let same = slots_csv(nk, &a.slots) == slots_csv(nk, &b.slots);
            Check::new("determinism", same, if same { "identical slots.csv" } else { "slots.csv differs" })
        }
        (Err(e), _) | (_, Err(e)) => Check::new("determinism", false, e.to_string()),
    });

    let no_block = ScenarioConfig { blockage_prob: 0.0, ..base.clone() };
    out.push(sim_check("no outage without blockage", &no_block, |slots| {
        let n = slots.iter().flat_map(|s| &s.users).filter(|u| u.outage).count();
        (n == 0, format!("{n} outages"))
    }));

    let idle = ScenarioConfig { arrival_rate_bits_per_slot: 0.0, ..base.clone() };
    out.push(sim_check("zero arrivals, zero power", &idle, |slots| {
        let p = slots.iter().map(|s| s.power_mw).fold(0.0, f64::max);
        (p == 0.0, format!("max power {p:e} mW"))
    }));

    let mut fixed_all = no_block.clone();
    fixed_all.set_policy(Policy::Fixed(base.num_rrus));
    let mut full_jt = no_block.clone();
    full_jt.set_policy(Policy::FullJtBaseline);
    out.push(match (run_simulation(&fixed_all), run_simulation(&full_jt)) {
        (Ok(a), Ok(b)) => {
            let same = a.slots == b.slots;
            Check::new("fixed(B) matches full JT without blockage", same, if same { "identical" } else { "trajectories differ" })
        }
        (Err(e), _) | (_, Err(e)) => Check::new("fixed(B) matches full JT without blockage", false, e.to_string()),
    });

    out.push(Check::new("subset enumeration", combinatorics_ok(), "brute force, n <= 8"));
    out.push(Check::new("success probability", success_prob_ok(), "pattern enumeration, n <= 8"));

    let fp = fp_identity_error(200, cfg.master_seed);
    out.push(Check::new("quadratic transform identity", fp <= 1e-9, format!("max error {fp:e}")));

    let (stat, cs, conv) = kkt_residuals(20, cfg.master_seed);
    out.push(Check::new(
        "KKT residuals",
        conv > 0 && stat <= 1e-6 && cs <= 1e-3,
        format!("{conv}/20 converged, stationarity {stat:e}, slackness {cs:e}"),
    ));
    out
}
