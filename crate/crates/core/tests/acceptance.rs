//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs the CI profile (N = 8, T = 500, R = 5) unless
//! `ACCEPTANCE_PROFILE=desk` selects N = 16, T = 2000, R = 20. Failures are
//! reported, not fatal, unless `ACCEPTANCE_STRICT` is set.

use std::collections::BTreeMap;
use std::process::ExitCode;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_comp::blockage::{enumerate_subsets, inner, subset_count};
use robust_comp::config::{Policy, ScenarioConfig};
use robust_comp::serving::success_prob;
use robust_comp::sim::{run_simulation, SimOutput};
use robust_comp::solver::{solve_subproblem, Problem, SolverOptions};
use robust_comp::validate::{fp_identity_error, full_families, kkt_residuals, random_channel, slots_csv};

const POLICIES: [Policy; 6] = [
    Policy::Fixed(1),
    Policy::Fixed(2),
    Policy::Fixed(3),
    Policy::CbBaseline,
    Policy::FullJtBaseline,
    Policy::Dynamic,
];
const VS: [f64; 3] = [0.1, 1.0, 10.0];

fn base_config() -> ScenarioConfig {
    let (antennas, slots, reps) = match std::env::var("ACCEPTANCE_PROFILE").as_deref() {
        Ok("desk") => (16, 2000, 20),
        _ => (8, 500, 5),
    };
    ScenarioConfig {
        antennas_per_rru: antennas,
        num_slots: slots,
        replications: reps,
        blockage_prob: 0.1,
        tradeoff_v: 1.0,
        ..Default::default()
    }
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} {id}. {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

type Runs = BTreeMap<(String, String), SimOutput>;

fn run(runs: &mut Runs, policy: Policy, v: f64) -> &SimOutput {
    runs.entry((policy.to_string(), v.to_string())).or_insert_with(|| {
        let mut cfg = ScenarioConfig { tradeoff_v: v, ..base_config() };
        cfg.set_policy(policy);
        let t = std::time::Instant::now();
        let out = run_simulation(&cfg).expect("simulation runs");
        eprintln!(
            "  ran {policy} V={v}: {:.2} dBm, {:.0} s",
            out.summary.avg_power_dbm().unwrap_or(f64::NEG_INFINITY),
            t.elapsed().as_secs_f64()
        );
        out
    })
}

fn dbm(out: &SimOutput) -> f64 {
    out.summary.avg_power_dbm().unwrap_or(f64::NEG_INFINITY)
}

fn latency(report: &mut Report, runs: &mut Runs) {
    let mut worst = Vec::new();
    for p in POLICIES {
        let s = &run(runs, p, 1.0).summary;
        worst.push((p, s.prob_backlog_exceeds.iter().copied().fold(0.0, f64::max)));
    }
    let ok = worst.iter().all(|&(_, w)| w <= 0.12);
    let detail = worst.iter().map(|(p, w)| format!("{p} {w:.3}")).collect::<Vec<_>>().join(", ");
    report.line(1, "latency, max_k Pr[Q_k >= 5] <= 0.12", ok, detail);
}

fn power_gaps(report: &mut Report, runs: &mut Runs) {
    let l2 = dbm(run(runs, Policy::Fixed(2), 1.0));
    let cb = dbm(run(runs, Policy::CbBaseline, 1.0));
    let jt = dbm(run(runs, Policy::FullJtBaseline, 1.0));
    let ordered = l2 < cb && cb < jt;
    let (g_cb, g_jt) = (cb - l2, jt - l2);
    let ok = ordered && (g_cb - 8.0).abs() <= 3.0 && (g_jt - 18.0).abs() <= 4.0;
    report.line(
        2,
        "power ordering L=2 < CB < JT, gaps 8 +- 3 dB and 18 +- 4 dB",
        ok,
        format!("L=2 {l2:.2} dBm, CB {cb:.2} dBm, JT {jt:.2} dBm; gaps {g_cb:.2} dB, {g_jt:.2} dB"),
    );
}

fn v_monotone(report: &mut Report, runs: &mut Runs) {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in POLICIES {
        let levels: Vec<f64> = VS.iter().map(|&v| dbm(run(runs, p, v))).collect();
        ok &= levels.windows(2).all(|w| w[1] <= w[0] + 0.5);
        parts.push(format!("{p} {}", levels.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")));
    }
    report.line(3, "power nonincreasing over V = 0.1/1/10 (0.5 dB slack)", ok, parts.join(", "));
}

fn outage(report: &mut Report, runs: &mut Runs) {
    let l4 = run(runs, Policy::FullJtBaseline, 1.0).summary.outage_rate.clone();
    let l2 = run(runs, Policy::Fixed(2), 1.0).summary.outage_rate.clone();
    let ok = l4.iter().all(|&r| (r - 0.35).abs() <= 0.10) && l2.iter().all(|&r| r < 0.02);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{:.3}", r)).collect::<Vec<_>>().join("/");
    report.line(
        4,
        "outage rate L=4 in 0.35 +- 0.10, L=2 below 0.02",
        ok,
        format!("L=4 {}, L=2 {}", fmt(&l4), fmt(&l2)),
    );
}

fn estimator(report: &mut Report, runs: &mut Runs) {
    let tau = base_config().averaging_window_slots;
    let out = run(runs, Policy::FullJtBaseline, 1.0);
    let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for s in out.slots.iter().filter(|s| s.slot > tau) {
        for (k, u) in s.users.iter().enumerate() {
            let e = acc.entry((s.replication, k)).or_default();
            e.0 += u.rho;
            e.1 += f64::from(u8::from(u.outage));
            e.2 += 1;
        }
    }
    let worst = acc.values().map(|&(r, o, n)| (r - o).abs() / n as f64).fold(0.0, f64::max);
    report.line(
        5,
        "blockage estimate within 0.05 of outage frequency",
        !acc.is_empty() && worst <= 0.05,
        format!("{} user-replications, worst gap {worst:.4}", acc.len()),
    );
}

fn identity(report: &mut Report) {
    let err = fp_identity_error(1000, 6);
    report.line(6, "quadratic transform identity on 1000 instances", err <= 1e-9, format!("max error {err:.2e}"));
}

/// Best `V p - w log2(1 + |h^H f|^2)` over a dense grid of power and
/// two-antenna directions.
fn grid_oracle(h: &[Complex64]) -> f64 {
    let mut best = 0.0f64;
    let steps = 200;
    for ip in 0..=steps {
        let pw = 3.0 * ip as f64 / steps as f64;
        for it in 0..=60 {
            let th = std::f64::consts::FRAC_PI_2 * it as f64 / 60.0;
            for iph in 0..60 {
                let ph = std::f64::consts::TAU * iph as f64 / 60.0;
                let f = [Complex64::new(pw.sqrt() * th.cos(), 0.0), Complex64::from_polar(pw.sqrt() * th.sin(), ph)];
                best = best.min(pw - (1.0 + inner(h, &f).norm_sqr()).log2());
            }
        }
    }
    best
}

fn kkt(report: &mut Report) {
    let (stat, cs, converged) = kkt_residuals(100, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let families = full_families(1, 1, 1);
    let mut worst_rel = 0.0f64;
    for _ in 0..10 {
        let h = random_channel(1, 1, 2, &mut rng);
        let p = Problem { h: &h, families: &families, weights: &[1.0], v: 1.0, noise: 1.0 };
        let r = solve_subproblem(&p, &SolverOptions::default(), &mut rng);
        let best = grid_oracle(h.h(0, 0));
        worst_rel = worst_rel.max((r.objective - best).abs() / best.abs().max(1e-12));
    }
    let ok = converged > 0 && stat <= 1e-6 && cs <= 1e-3 && worst_rel <= 1e-2;
    report.line(
        7,
        "KKT residuals and single-user grid oracle",
        ok,
        format!("{converged}/100 converged, stationarity {stat:.2e}, slackness {cs:.2e}, oracle gap {worst_rel:.2e}"),
    );
}

fn combinatorics(report: &mut Report) {
    let enum_ok = (1..=8usize).all(|n| {
        (1..=n).all(|l| {
            let base: Vec<usize> = (0..n).collect();
            let mut got: Vec<u64> = enumerate_subsets(0, &base, l).expect("valid").subsets.iter().map(|s| s.0).collect();
            got.sort_unstable();
            let brute: Vec<u64> = (0u64..1 << n).filter(|m| m.count_ones() as usize >= l).collect();
            subset_count(n, l) == Ok(brute.len() as u64) && got == brute
        })
    });
    let pairs = [(1, 1), (2, 1), (4, 2), (6, 3), (8, 5)];
    let rhos = [0.05, 0.1, 0.3, 0.5, 0.8];
    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_z = 0.0f64;
    for &(n, l) in &pairs {
        for &rho in &rhos {
            let hits = (0..draws)
                .filter(|_| (0..n).filter(|_| !rng.random_bool(rho)).count() >= l)
                .count();
            let est = hits as f64 / draws as f64;
            let exact = success_prob(n, l, rho).expect("valid");
            let se = (exact * (1.0 - exact) / draws as f64).sqrt();
            let z = if se > 0.0 { (est - exact).abs() / se } else if est == exact { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
        }
    }
    report.line(
        8,
        "subset enumeration vs power set; success probability vs Monte Carlo",
        enum_ok && worst_z <= 3.0,
        format!("enumeration {}, worst deviation {worst_z:.2} standard errors", if enum_ok { "exact" } else { "mismatch" }),
    );
}

fn determinism(report: &mut Report, runs: &mut Runs) {
    let mut cfg = base_config();
    cfg.set_policy(Policy::FullJtBaseline);
    let nk = cfg.num_ues;
    let first = slots_csv(nk, &run(runs, Policy::FullJtBaseline, 1.0).slots);
    let second = slots_csv(nk, &run_simulation(&cfg).expect("simulation runs").slots);
    report.line(
        9,
        "identical seed and config give identical slots.csv",
        first == second,
        format!("{} bytes, {}", first.len(), if first == second { "identical" } else { "differ" }),
    );
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    let mut runs = Runs::new();
    latency(&mut report, &mut runs);
    power_gaps(&mut report, &mut runs);
    v_monotone(&mut report, &mut runs);
    outage(&mut report, &mut runs);
    estimator(&mut report, &mut runs);
    identity(&mut report);
    kkt(&mut report);
    combinatorics(&mut report);
    determinism(&mut report, &mut runs);
    println!("{} of 9 criteria failed", report.failed);
    if report.failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
