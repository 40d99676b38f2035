//! Per-slot weighted rate/power problem solved by the quadratic-transform
//! KKT iteration.
//!
//! For fixed quadratic-transform auxiliaries the problem is convex. Its duals
//! (one per user and blockage hypothesis) are found by projected Newton ascent
//! on the dual function; the beamformers and SINR targets then follow in
//! closed form from the stationarity conditions. The auxiliaries are
//! refreshed after every such solve. The best iterate by the true objective
//! with pessimistic SINRs is returned.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::blockage::{Beamformers, CrossGains, RruSet, SubsetFamily};
use crate::channel::ChannelState;
use crate::config::{ScenarioConfig, StepRule};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("dual variables sum to zero")]
    ZeroDualSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Maximum dual steps per auxiliary refresh.
    pub aux_period: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub step_rule: StepRule,
    pub step_size: f64,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self::from_config(&ScenarioConfig::default())
    }
}

impl SolverOptions {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            max_iters: cfg.outer_iters,
            aux_period: cfg.inner_iters,
            tolerance: cfg.solver_tolerance,
            patience: 5,
            step_rule: cfg.dual_step_rule,
            step_size: cfg.dual_step_size,
            record_trace: false,
        }
    }
}

/// One slot's problem data.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub h: &'a ChannelState,
    pub families: &'a [SubsetFamily],
    /// Queue weights `Q + A + Z`.
    pub weights: &'a [f64],
    pub v: f64,
    pub noise: f64,
}

impl Problem<'_> {
    fn num_ues(&self) -> usize {
        self.weights.len()
    }

    fn active(&self, k: usize) -> bool {
        self.weights[k] > 0.0
    }

    /// Rate weight in nats: the stationarity conditions are written for
    /// `w log2(1 + gamma) = (w / ln 2) ln(1 + gamma)`.
    fn nat_weight(&self, k: usize) -> f64 {
        self.weights[k] / LN_2
    }

    fn reach(&self, k: usize, c: usize) -> RruSet {
        self.families[k].reach(c, self.h.num_rrus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub f: Beamformers,
    pub gamma: Vec<f64>,
    pub nu: Vec<Vec<Complex64>>,
    pub e: Vec<Vec<f64>>,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub max_cs_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub beamformers: Beamformers,
    /// Pessimistic SINR of the returned beamformers.
    pub gamma: Vec<f64>,
    pub objective: f64,
    /// `e_{k,c} (gamma_k - Gamma_{k,c})` in (k, c) order.
    pub cs_residuals: Vec<f64>,
    /// Largest relative stationarity residual seen right after any
    /// beamformer update.
    pub stationarity: f64,
    /// Auxiliary refreshes used.
    pub iterations: usize,
    pub dual_steps: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

impl SolveResult {
    pub fn rates(&self) -> Vec<f64> {
        self.gamma.iter().map(|&g| crate::blockage::rate_of(g)).collect()
    }
}

/// `V sum ||f||^2 - sum w log2(1 + gamma)`.
pub fn objective(f: &Beamformers, gamma: &[f64], weights: &[f64], v: f64) -> f64 {
    let rate: f64 = weights.iter().zip(gamma).map(|(w, g)| w * (1.0 + g).log2()).sum();
    v * f.total_power() - rate
}

/// Optimal quadratic-transform auxiliary of user `k` under `mask`.
pub fn update_aux_nu(gains: &CrossGains, mask: RruSet, k: usize, noise: f64) -> Complex64 {
    let (s, d) = gains.signal_and_interference(mask, k, noise);
    s / d
}

/// `2 Re{nu* h^H f_k} - |nu|^2 (noise + interference)`.
pub fn fp_surrogate(gains: &CrossGains, mask: RruSet, k: usize, nu: Complex64, noise: f64) -> f64 {
    let (s, d) = gains.signal_and_interference(mask, k, noise);
    2.0 * (nu.conj() * s).re - nu.norm_sqr() * d
}

/// SINR target from the dual sum, floored at zero.
pub fn kkt_gamma_update(w: f64, duals: &[f64]) -> Result<f64, SolverError> {
    let sum: f64 = duals.iter().sum();
    if sum <= 0.0 {
        return Err(SolverError::ZeroDualSum);
    }
    Ok((w / sum - 1.0).max(0.0))
}

/// Projected subgradient step.
pub fn dual_update(e: f64, gamma: f64, surrogate: f64, beta: f64) -> f64 {
    (e + beta * (gamma - surrogate)).max(0.0)
}

/// Per-RRU Gram matrices `gram[b][u][u'] = h_{b,u}^H h_{b,u'}`.
#[derive(Debug, Clone)]
pub struct Grams {
    num_ues: usize,
    g: Vec<Complex64>,
}

impl Grams {
    pub fn new(h: &ChannelState) -> Self {
        let nk = h.num_ues;
        let mut g = vec![ZERO; h.num_rrus * nk * nk];
        for b in 0..h.num_rrus {
            for u in 0..nk {
                for w in u..nk {
                    let x = crate::blockage::inner(h.h(b, u), h.h(b, w));
                    g[(b * nk + u) * nk + w] = x;
                    g[(b * nk + w) * nk + u] = x.conj();
                }
            }
        }
        Self { num_ues: nk, g }
    }

    pub fn at(&self, b: usize, u: usize, w: usize) -> Complex64 {
        self.g[(b * self.num_ues + u) * self.num_ues + w]
    }
}

/// `W_u[b][b'] = sum_c e_{u,c} |nu_{u,c}|^2 1[b in G_u^c] 1[b' in G_u^c]`.
fn interference_weights(p: &Problem, st: &SolverState, u: usize) -> DMatrix<f64> {
    let nb = p.h.num_rrus;
    let mut w = DMatrix::zeros(nb, nb);
    for (c, (&e, nu)) in st.e[u].iter().zip(&st.nu[u]).enumerate() {
        let a = e * nu.norm_sqr();
        if a == 0.0 {
            continue;
        }
        let mask = p.reach(u, c);
        for b in mask.iter() {
            for b2 in mask.iter() {
                w[(b, b2)] += a;
            }
        }
    }
    w
}

/// `beta_b = sum_c e_{k,c} nu_{k,c} 1[b in G_k^c]`.
fn rhs_coefficients(p: &Problem, st: &SolverState, k: usize) -> Vec<Complex64> {
    let mut beta = vec![ZERO; p.h.num_rrus];
    for (c, (&e, &nu)) in st.e[k].iter().zip(&st.nu[k]).enumerate() {
        for b in p.reach(k, c).iter() {
            beta[b] += nu * e;
        }
    }
    beta
}

/// Ridge-guarded `V`: the operator is `V I` plus a PSD term, so it is only
/// near-singular when `V` is negligible against its mean eigenvalue.
fn regularized_v(v: f64, mean_eig: f64) -> f64 {
    let ridge = 1e-10 * (1.0 + mean_eig);
    if v < ridge {
        v + ridge
    } else {
        v
    }
}

/// `x = sum_b alpha_b (e_b (x) h_{b,user})`: a stacked vector in the span of
/// one user's per-RRU channels.
#[derive(Debug, Clone)]
struct Span {
    user: usize,
    alpha: Vec<Complex64>,
}

/// User `u`'s stationarity operator
/// `A_u = V I + sum_{j != u} sum_c e_{j,c} |nu_{j,c}|^2 h_j^c h_j^{cH}` on
/// the blocks of its serving set, kept in reduced form: with `U` the
/// interfering channels and `W` their weights, `A^{-1} x = (x - U z) / V`
/// where `(V I + U^H U W) y = U^H x` and `z = W y`.
struct Operator {
    bs: Vec<usize>,
    others: Vec<usize>,
    /// `W_j` restricted to `bs`, one per entry of `others`.
    w: Vec<DMatrix<f64>>,
    v: f64,
    lu: Option<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl Operator {
    fn new(p: &Problem, grams: &Grams, weights: &[DMatrix<f64>], u: usize) -> Self {
        let bs = p.families[u].base.to_vec();
        let nbk = bs.len();
        let others: Vec<usize> = (0..p.num_ues())
            .filter(|&j| j != u && weights[j].iter().any(|&x| x != 0.0))
            .collect();
        let w: Vec<DMatrix<f64>> = others
            .iter()
            .map(|&j| DMatrix::from_fn(nbk, nbk, |a, b| weights[j][(bs[a], bs[b])]))
            .collect();
        let trace: f64 = others
            .iter()
            .zip(&w)
            .map(|(&j, wj)| (0..nbk).map(|a| wj[(a, a)] * grams.at(bs[a], j, j).re).sum::<f64>())
            .sum();
        let v = regularized_v(p.v, trace / (nbk * p.h.antennas) as f64);
        let m = others.len() * nbk;
        let lu = (m > 0).then(|| {
            let mut mat = DMatrix::<Complex64>::zeros(m, m);
            for (ui, &o) in others.iter().enumerate() {
                for (bi, &b) in bs.iter().enumerate() {
                    let row = ui * nbk + bi;
                    mat[(row, row)] += Complex64::new(v, 0.0);
                    for (uj, &o2) in others.iter().enumerate() {
                        let g = grams.at(b, o, o2);
                        for bj in 0..nbk {
                            let x = w[uj][(bi, bj)];
                            if x != 0.0 {
                                mat[(row, uj * nbk + bj)] += g * x;
                            }
                        }
                    }
                }
            }
            mat.lu()
        });
        Self { bs, others, w, v, lu }
    }

    fn z_for(&self, grams: &Grams, x: &Span) -> Vec<Complex64> {
        let nbk = self.bs.len();
        let m = self.others.len() * nbk;
        let Some(lu) = &self.lu else {
            return Vec::new();
        };
        let rhs = DVector::from_fn(m, |row, _| {
            let (ui, bi) = (row / nbk, row % nbk);
            let b = self.bs[bi];
            x.alpha[b] * grams.at(b, self.others[ui], x.user)
        });
        let y = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(m));
        (0..m)
            .map(|row| {
                let (ui, bi) = (row / nbk, row % nbk);
                (0..nbk).map(|bj| y[ui * nbk + bj] * self.w[ui][(bi, bj)]).sum()
            })
            .collect()
    }


    /// `E^H A^{-1} E` where the columns of `E` are every user's channel on
    /// each serving block, indexed `(user, block)` as `user * nbk + block`.
    fn kernel(&self, grams: &Grams, nk: usize) -> DMatrix<Complex64> {
        let nbk = self.bs.len();
        let dim = nk * nbk;
        let mut k = DMatrix::<Complex64>::zeros(dim, dim);
        for x in 0..nk {
            for y in 0..nk {
                for (bi, &b) in self.bs.iter().enumerate() {
                    k[(x * nbk + bi, y * nbk + bi)] = grams.at(b, x, y);
                }
            }
        }
        if let Some(lu) = &self.lu {
            let m = self.others.len() * nbk;
            let rhs = DMatrix::from_fn(m, dim, |row, col| {
                let (ui, bi) = (row / nbk, row % nbk);
                let (y, bj) = (col / nbk, col % nbk);
                if bi == bj { grams.at(self.bs[bi], self.others[ui], y) } else { ZERO }
            });
            let y = lu.solve(&rhs).unwrap_or_else(|| DMatrix::zeros(m, dim));
            let mut z = DMatrix::<Complex64>::zeros(m, dim);
            for (ui, w) in self.w.iter().enumerate() {
                for bi in 0..nbk {
                    for bj in 0..nbk {
                        let wv = w[(bi, bj)];
                        if wv != 0.0 {
                            for col in 0..dim {
                                z[(ui * nbk + bi, col)] += y[(ui * nbk + bj, col)] * wv;
                            }
                        }
                    }
                }
            }
            for x in 0..nk {
                for (bi, &b) in self.bs.iter().enumerate() {
                    for (ui, &o) in self.others.iter().enumerate() {
                        let g = grams.at(b, x, o);
                        for col in 0..dim {
                            k[(x * nbk + bi, col)] -= g * z[(ui * nbk + bi, col)];
                        }
                    }
                }
            }
        }
        k / Complex64::new(self.v, 0.0)
    }
    /// `A^{-1} x` as a stacked vector.
    fn apply(&self, h: &ChannelState, x: &Span, z: &[Complex64]) -> Vec<Complex64> {
        let n = h.antennas;
        let nbk = self.bs.len();
        let mut f = vec![ZERO; h.num_rrus * n];
        for (bi, &b) in self.bs.iter().enumerate() {
            let block = &mut f[b * n..(b + 1) * n];
            for (o, hb) in block.iter_mut().zip(h.h(b, x.user)) {
                *o = x.alpha[b] * hb;
            }
            for (ui, &o) in self.others.iter().enumerate() {
                let c = z[ui * nbk + bi];
                for (t, ho) in block.iter_mut().zip(h.h(b, o)) {
                    *t -= c * ho;
                }
            }
            for t in block.iter_mut() {
                *t /= self.v;
            }
        }
        f
    }
}

/// Stationarity update of user `k`'s stacked beamformer,
/// `f_k = A_k^{-1} sum_c e_{k,c} nu_{k,c} h_k^c`, zero outside the serving
/// set.
pub fn kkt_beamformer_update(p: &Problem, st: &SolverState, k: usize) -> Vec<Complex64> {
    if !p.active(k) {
        return vec![ZERO; p.h.num_rrus * p.h.antennas];
    }
    let grams = Grams::new(p.h);
    let weights: Vec<DMatrix<f64>> = (0..p.num_ues()).map(|u| interference_weights(p, st, u)).collect();
    let op = Operator::new(p, &grams, &weights, k);
    let x = Span { user: k, alpha: rhs_coefficients(p, st, k) };
    op.apply(p.h, &x, &op.z_for(&grams, &x))
}

/// Explicit `(A f, rhs)` of user `k`'s stationarity condition on the active
/// blocks, computed without forming `A`.
fn stationarity_terms(
    p: &Problem,
    st: &SolverState,
    f: &[Complex64],
    k: usize,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let (nb, n) = (p.h.num_rrus, p.h.antennas);
    let base = p.families[k].base;
    let mut af = vec![ZERO; nb * n];
    let mut rhs = vec![ZERO; nb * n];
    for b in base.iter() {
        for i in 0..n {
            af[b * n + i] = f[b * n + i] * p.v;
        }
    }
    for u in 0..p.num_ues() {
        for (c, (&e, &nu)) in st.e[u].iter().zip(&st.nu[u]).enumerate() {
            if e == 0.0 {
                continue;
            }
            let mask = p.reach(u, c);
            if u == k {
                for b in mask.iter().filter(|&b| base.contains(b)) {
                    for (i, hb) in p.h.h(b, k).iter().enumerate() {
                        rhs[b * n + i] += nu * e * hb;
                    }
                }
            } else {
                // h_u^{cH} f_k over the shared active blocks
                let proj: Complex64 = mask
                    .iter()
                    .filter(|&b| base.contains(b))
                    .map(|b| crate::blockage::inner(p.h.h(b, u), &f[b * n..(b + 1) * n]))
                    .sum();
                let a = proj * (e * nu.norm_sqr());
                for b in mask.iter().filter(|&b| base.contains(b)) {
                    for (i, hb) in p.h.h(b, u).iter().enumerate() {
                        af[b * n + i] += a * hb;
                    }
                }
            }
        }
    }
    (af, rhs)
}

fn norm(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Relative residual `||A f - rhs|| / max(||A f||, ||rhs||)` of the
/// beamformer stationarity condition of user `k`.
pub fn stationarity_residual(p: &Problem, st: &SolverState, f: &[Complex64], k: usize) -> f64 {
    let (af, rhs) = stationarity_terms(p, st, f, k);
    let scale = norm(&af).max(norm(&rhs));
    if scale == 0.0 {
        return 0.0;
    }
    let diff: Vec<Complex64> = af.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    norm(&diff) / scale
}

/// Dense reference for [`kkt_beamformer_update`]: forms `A` on the active
/// subspace and solves the Hermitian system by Cholesky (LU fallback).
pub fn kkt_beamformer_update_dense(p: &Problem, st: &SolverState, k: usize) -> Vec<Complex64> {
    let (nb, n) = (p.h.num_rrus, p.h.antennas);
    let mut f = vec![ZERO; nb * n];
    if !p.active(k) {
        return f;
    }
    let bs = p.families[k].base.to_vec();
    let dim = bs.len() * n;
    let stacked = |u: usize, mask: RruSet| -> DVector<Complex64> {
        DVector::from_iterator(
            dim,
            bs.iter().flat_map(|&b| {
                let on = mask.contains(b);
                p.h.h(b, u).iter().map(move |&x| if on { x } else { ZERO })
            }),
        )
    };
    let mut a = DMatrix::<Complex64>::zeros(dim, dim);
    let mut rhs = DVector::<Complex64>::zeros(dim);
    for u in 0..p.num_ues() {
        for (c, (&e, &nu)) in st.e[u].iter().zip(&st.nu[u]).enumerate() {
            let hu = stacked(u, p.reach(u, c));
            if u == k {
                rhs += &hu * (nu * e);
            } else {
                a += &hu * hu.adjoint() * Complex64::new(e * nu.norm_sqr(), 0.0);
            }
        }
    }
    let mean_eig = a.trace().re / dim as f64;
    let v = regularized_v(p.v, mean_eig);
    for i in 0..dim {
        a[(i, i)] += Complex64::new(v, 0.0);
    }
    let x = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(dim)),
    };
    for (bi, &b) in bs.iter().enumerate() {
        f[b * n..(b + 1) * n].copy_from_slice(&x.as_slice()[bi * n..(bi + 1) * n]);
    }
    f
}

/// Random unit-power start on the active blocks, pessimistic SINR targets,
/// optimal auxiliaries and duals spread evenly so their sum meets the SINR
/// stationarity condition. Consumes `B N` complex draws per user whatever
/// the serving sets are.
pub fn init_feasible<R: Rng + ?Sized>(p: &Problem, rng: &mut R) -> SolverState {
    let (nb, nk, n) = (p.h.num_rrus, p.num_ues(), p.h.antennas);
    let mut f = Beamformers::zeros(nk, nb, n);
    for k in 0..nk {
        let base = p.families[k].base;
        let fk = f.stacked_mut(k);
        for (i, x) in fk.iter_mut().enumerate() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *x = if base.contains(i / n) { Complex64::new(re, im) } else { ZERO };
        }
        let s = norm(fk);
        if s > 0.0 {
            fk.iter_mut().for_each(|x| *x /= s);
        }
    }
    let gains = CrossGains::new(p.h, &f);
    let mut st = SolverState {
        f,
        gamma: vec![0.0; nk],
        nu: Vec::with_capacity(nk),
        e: Vec::with_capacity(nk),
        iteration: 0,
    };
    for k in 0..nk {
        let fam = &p.families[k];
        let (g0, _) = crate::blockage::pessimistic_from_gains(&gains, k, fam, nb, p.noise);
        st.gamma[k] = g0;
        st.nu.push((0..fam.len()).map(|c| update_aux_nu(&gains, p.reach(k, c), k, p.noise)).collect());
        let e0 = if p.active(k) { p.nat_weight(k) / (fam.len() as f64 * (1.0 + g0)) } else { 0.0 };
        st.e.push(vec![e0; fam.len()]);
    }
    st
}

fn pessimistic_all(p: &Problem, gains: &CrossGains) -> Vec<f64> {
    (0..p.num_ues())
        .map(|k| crate::blockage::pessimistic_from_gains(gains, k, &p.families[k], p.h.num_rrus, p.noise).0)
        .collect()
}

fn cs_residuals(p: &Problem, st: &SolverState, gains: &CrossGains) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..p.num_ues() {
        for c in 0..p.families[k].len() {
            let sinr = gains.sinr(p.reach(k, c), k, p.noise);
            out.push(st.e[k][c] * (st.gamma[k] - sinr));
        }
    }
    out
}

/// Complementary slackness within `tol (1 + w_k / ln 2)` for every pair.
fn cs_within(p: &Problem, residuals: &[f64], tol: f64) -> bool {
    let mut i = 0;
    for (k, fam) in p.families.iter().enumerate() {
        let bound = tol * (1.0 + p.nat_weight(k));
        if residuals[i..i + fam.len()].iter().any(|r| r.abs() > bound) {
            return false;
        }
        i += fam.len();
    }
    true
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Everything that follows from the duals once the auxiliaries are fixed.
struct Eval {
    f: Beamformers,
    gains: CrossGains,
    gamma: Vec<f64>,
    /// Surrogate values in (k, c) order.
    s: Vec<Vec<f64>>,
    ops: Vec<Option<Operator>>,
    /// Dual function value, `-inf` when an active user's duals sum to zero.
    dual: f64,
}

/// Beamformer and SINR-target updates for the current duals, plus the
/// Lagrangian at that minimizer.
fn evaluate(p: &Problem, grams: &Grams, st: &SolverState) -> Eval {
    let nk = p.num_ues();
    let weights: Vec<DMatrix<f64>> = (0..nk).map(|u| interference_weights(p, st, u)).collect();
    let mut f = Beamformers::zeros(nk, p.h.num_rrus, p.h.antennas);
    let mut ops = Vec::with_capacity(nk);
    for k in 0..nk {
        if !p.active(k) {
            ops.push(None);
            continue;
        }
        let op = Operator::new(p, grams, &weights, k);
        let x = Span { user: k, alpha: rhs_coefficients(p, st, k) };
        let fk = op.apply(p.h, &x, &op.z_for(grams, &x));
        f.stacked_mut(k).copy_from_slice(&fk);
        ops.push(Some(op));
    }
    let gains = CrossGains::new(p.h, &f);
    let mut gamma = vec![0.0; nk];
    let mut s = Vec::with_capacity(nk);
    let mut dual = p.v * f.total_power();
    for k in 0..nk {
        let sk: Vec<f64> = (0..p.families[k].len())
            .map(|c| fp_surrogate(&gains, p.reach(k, c), k, st.nu[k][c], p.noise))
            .collect();
        if p.active(k) {
            let w = p.nat_weight(k);
            match kkt_gamma_update(w, &st.e[k]) {
                Ok(g) => {
                    gamma[k] = g;
                    let slack: f64 = st.e[k].iter().zip(&sk).map(|(e, s)| e * (g - s)).sum();
                    dual += slack - w * g.ln_1p();
                }
                Err(_) => dual = f64::NEG_INFINITY,
            }
        }
        s.push(sk);
    }
    Eval { f, gains, gamma, s, ops, dual }
}

/// Negated Hessian of the dual function over the listed duals. The
/// SINR-target part is `(1 + gamma_k)^2 / w_k` within a user's block; the
/// beamformer part is `2 sum_u Re{g_{u,i}^H A_u^{-1} g_{u,j}}` where
/// `g_{u,i}` is the derivative direction of `A_u f_u` in dual `i`.
fn dual_curvature(p: &Problem, grams: &Grams, st: &SolverState, ev: &Eval, idx: &[(usize, usize)]) -> DMatrix<f64> {
    let n = idx.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (a, &(ka, _)) in idx.iter().enumerate() {
        if ev.gamma[ka] <= 0.0 {
            continue;
        }
        let curv = (1.0 + ev.gamma[ka]).powi(2) / p.nat_weight(ka);
        for (b, &(kb, _)) in idx.iter().enumerate() {
            if kb == ka {
                m[(a, b)] += curv;
            }
        }
    }
    for (u, op) in ev.ops.iter().enumerate() {
        let Some(op) = op else { continue };
        let base = p.families[u].base;
        let nbk = op.bs.len();
        let kern = op.kernel(grams, p.num_ues());
        // each direction is `coef` times user j's channel on the blocks in
        // `blocks`; keep `K` applied to it so pairs cost one masked sum
        let mut spans = Vec::new();
        for (i, &(j, c)) in idx.iter().enumerate() {
            let mask = p.reach(j, c);
            let nu = st.nu[j][c];
            let coef = if j == u { nu } else { -ev.gains.masked(mask, j, u) * nu.norm_sqr() };
            if coef == ZERO || (mask.0 & base.0) == 0 {
                continue;
            }
            let blocks: Vec<usize> = (0..nbk).filter(|&bi| mask.contains(op.bs[bi])).collect();
            let applied: Vec<Complex64> = (0..kern.nrows())
                .map(|r| coef * blocks.iter().map(|&bj| kern[(r, j * nbk + bj)]).sum::<Complex64>())
                .collect();
            spans.push((i, j, coef, blocks, applied));
        }
        for (a, (ia, ja, ca, blocks_a, _)) in spans.iter().enumerate() {
            for (ib, _, _, _, kb) in &spans[a..] {
                let s: Complex64 = blocks_a.iter().map(|&bi| kb[ja * nbk + bi]).sum();
                let val = 2.0 * (ca.conj() * s).re;
                m[(*ia, *ib)] += val;
                if ia != ib {
                    m[(*ib, *ia)] += val;
                }
            }
        }
    }
    m
}

fn active_duals(p: &Problem, st: &SolverState) -> Vec<(usize, usize)> {
    (0..p.num_ues())
        .filter(|&k| p.active(k))
        .flat_map(|k| (0..st.e[k].len()).map(move |c| (k, c)))
        .collect()
}

/// One damped projected Newton step on the dual function. The damping `mu`
/// scales the curvature diagonal (Levenberg-Marquardt) and is adapted from
/// the ratio of actual to predicted ascent; it persists across calls.
/// Returns `None` once the free constraints hold to a relative `tol`, no
/// meaningful ascent is left, or no acceptable step is found.
fn newton_step(p: &Problem, grams: &Grams, st: &mut SolverState, ev: &Eval, tol: f64, mu: &mut f64) -> Option<Eval> {
    let idx = active_duals(p, st);
    if idx.is_empty() || !ev.dual.is_finite() {
        return None;
    }
    let d: Vec<f64> = idx.iter().map(|&(k, c)| ev.gamma[k] - ev.s[k][c]).collect();
    let free: Vec<usize> = (0..idx.len())
        .filter(|&i| st.e[idx[i].0][idx[i].1] > 0.0 || d[i] > 0.0)
        .collect();
    if free.is_empty() {
        return None;
    }
    let violation = free
        .iter()
        .map(|&i| d[i].abs() / (1.0 + ev.gamma[idx[i].0]))
        .fold(0.0, f64::max);
    if violation <= tol {
        return None;
    }
    let m = dual_curvature(p, grams, st, ev, &idx);
    let nf = free.len();
    let mf = DMatrix::from_fn(nf, nf, |a, b| m[(free[a], free[b])]);
    let df = DVector::from_fn(nf, |a, _| d[free[a]]);
    let diag_max = (0..nf).fold(0.0f64, |a, i| a.max(mf[(i, i)]));
    let ridge = 1e-12 * (1.0 + diag_max);
    let e0 = st.e.clone();
    for _ in 0..60 {
        let mut a = mf.clone();
        for i in 0..nf {
            a[(i, i)] += ridge + *mu * (mf[(i, i)] + ridge);
        }
        let Some(step) = a.cholesky().map(|ch| ch.solve(&df)) else {
            *mu = (*mu * 10.0).max(1e-8);
            continue;
        };
        let mut moved = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            let (k, c) = idx[i];
            let e = (e0[k][c] + step[a]).max(0.0);
            moved[a] = e - e0[k][c];
            st.e[k][c] = e;
        }
        let predicted = df.dot(&moved) - 0.5 * moved.dot(&(&mf * &moved));
        if !(predicted > 1e-13 * (1.0 + ev.dual.abs())) {
            if *mu < 1e-6 {
                break;
            }
            *mu *= 4.0;
            continue;
        }
        let next = evaluate(p, grams, st);
        let ratio = (next.dual - ev.dual) / predicted;
        if ratio > 1e-4 {
            if ratio > 0.75 {
                *mu /= 3.0;
            } else if ratio < 0.25 {
                *mu *= 2.0;
            }
            return Some(next);
        }
        *mu = (*mu * 4.0).max(1e-8);
    }
    st.e = e0;
    None
}

/// The plain projected subgradient step with a fixed step size.
fn constant_step(p: &Problem, st: &mut SolverState, ev: &Eval, beta: f64) {
    for k in (0..p.num_ues()).filter(|&k| p.active(k)) {
        for c in 0..st.e[k].len() {
            st.e[k][c] = dual_update(st.e[k][c], ev.gamma[k], ev.s[k][c], beta);
        }
        if st.e[k].iter().all(|&e| e == 0.0) {
            // every constraint went slack: reseat the tightest one
            let (c, s) = ev.s[k]
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |a, (c, s)| if s < a.1 { (c, s) } else { a });
            st.e[k][c] = p.nat_weight(k) / (1.0 + s.max(0.0));
        }
    }
}

/// Runs the KKT iteration from `init_feasible`.
pub fn solve_subproblem<R: Rng + ?Sized>(p: &Problem, opts: &SolverOptions, rng: &mut R) -> SolveResult {
    let st = init_feasible(p, rng);
    solve_from(p, opts, st)
}

/// Runs the KKT iteration from a given state. Each outer iteration holds the
/// auxiliaries fixed for up to `aux_period` dual steps, then refreshes them.
pub fn solve_from(p: &Problem, opts: &SolverOptions, mut st: SolverState) -> SolveResult {
    let nk = p.num_ues();
    let grams = Grams::new(p.h);

    let gains = CrossGains::new(p.h, &st.f);
    let gamma0 = pessimistic_all(p, &gains);
    let mut best = SolveResult {
        beamformers: st.f.clone(),
        objective: objective(&st.f, &gamma0, p.weights, p.v),
        gamma: gamma0,
        cs_residuals: cs_residuals(p, &st, &gains),
        stationarity: 0.0,
        iterations: 0,
        dual_steps: 0,
        converged: false,
        trace: Vec::new(),
    };
    let mut prev = best.objective;
    let mut current = best.objective;
    let mut streak = 0;

    for it in 1..=opts.max_iters {
        best.iterations = it;
        let mut ev = evaluate(p, &grams, &st);
        let mut mu = 1e-3;
        let steps_before = best.dual_steps;
        for _ in 0..opts.aux_period {
            match opts.step_rule {
                StepRule::Newton => match newton_step(p, &grams, &mut st, &ev, opts.tolerance, &mut mu) {
                    Some(next) => ev = next,
                    None => break,
                },
                StepRule::Constant => {
                    constant_step(p, &mut st, &ev, opts.step_size);
                    ev = evaluate(p, &grams, &st);
                }
            }
            best.dual_steps += 1;
        }
        for k in (0..nk).filter(|&k| p.active(k)) {
            let r = stationarity_residual(p, &st, ev.f.stacked(k), k);
            best.stationarity = best.stationarity.max(r);
        }
        st.iteration = it;

        let feasible = pessimistic_all(p, &ev.gains);
        let obj = objective(&ev.f, &feasible, p.weights, p.v);
        // an unfinished dual solve can land far above the current iterate;
        // keep the iterate and its auxiliaries and carry on from these duals,
        // or stop once the dual solve makes no further progress
        if it > 1 && obj > current + opts.tolerance * current.abs() {
            if opts.record_trace {
                best.trace.push(TracePoint { iteration: it, objective: obj, max_cs_residual: f64::NAN });
            }
            streak = 0;
            if best.dual_steps == steps_before {
                break;
            }
            continue;
        }
        current = obj;
        st.f = ev.f;
        st.gamma = ev.gamma;
        let residuals = cs_residuals(p, &st, &ev.gains);
        let slack_ok = cs_within(p, &residuals, opts.tolerance);
        if opts.record_trace {
            best.trace.push(TracePoint { iteration: it, objective: obj, max_cs_residual: max_abs(&residuals) });
        }
        if obj < best.objective {
            best.beamformers = st.f.clone();
            best.gamma = feasible;
            best.objective = obj;
            best.cs_residuals = residuals;
        }

        for k in 0..nk {
            for c in 0..st.nu[k].len() {
                st.nu[k][c] = update_aux_nu(&ev.gains, p.reach(k, c), k, p.noise);
            }
        }

        let rel = (obj - prev).abs() / obj.abs().max(prev.abs()).max(f64::MIN_POSITIVE);
        prev = obj;
        streak = if rel < opts.tolerance && slack_ok { streak + 1 } else { 0 };
        if streak >= opts.patience {
            best.converged = true;
            break;
        }
    }
    best
}
