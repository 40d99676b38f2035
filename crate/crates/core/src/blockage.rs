//! Blockage-subset families and the SINR evaluators built on them.
//!
//! A family lists every subset of a user's serving set that may survive
//! blockage with at least `L` members. The pessimistic SINR is the minimum
//! of the subset SINRs over the family.

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::ChannelState;

/// Largest family size accepted by the configuration layer.
pub const MAX_SUBSETS: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubsetError {
    #[error("subset size L = {l} outside [1, {n}]")]
    Range { n: usize, l: usize },
    #[error("serving set of {0} RRUs exceeds the 64-RRU bitmask")]
    TooLarge(usize),
}

/// A set of RRU indices below 64, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RruSet(pub u64);

impl RruSet {
    pub fn from_indices(idx: &[usize]) -> Self {
        RruSet(idx.iter().fold(0u64, |m, &b| m | (1u64 << b)))
    }

    /// `{0, 1, ..., n-1}`.
    pub fn full(n: usize) -> Self {
        if n >= 64 {
            RruSet(u64::MAX)
        } else {
            RruSet((1u64 << n) - 1)
        }
    }

    pub fn contains(self, b: usize) -> bool {
        b < 64 && self.0 >> b & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn difference(self, other: RruSet) -> RruSet {
        RruSet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            (bits != 0).then(|| {
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                b
            })
        })
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }
}

fn binom(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of subsets of an `n`-set with at least `l` members.
pub fn subset_count(n: usize, l: usize) -> Result<u64, SubsetError> {
    if l < 1 || l > n {
        return Err(SubsetError::Range { n, l });
    }
    let total: u128 = (l..=n).map(|s| binom(n, s)).sum();
    Ok(u64::try_from(total).unwrap_or(u64::MAX))
}

/// Surviving-subset hypotheses of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetFamily {
    pub user: usize,
    pub base: RruSet,
    pub min_size: usize,
    /// Ordered by size, then lexicographically.
    pub subsets: Vec<RruSet>,
}

impl SubsetFamily {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// RRUs assumed blocked under hypothesis `c`.
    pub fn excluded(&self, c: usize) -> RruSet {
        self.base.difference(self.subsets[c])
    }

    /// `G = all \ excluded(c)`: the RRUs whose signals still reach the user
    /// under hypothesis `c`, for the wanted and the interfering streams alike.
    pub fn reach(&self, c: usize, num_rrus: usize) -> RruSet {
        RruSet::full(num_rrus).difference(self.excluded(c))
    }
}

/// All subsets of `base` with at least `l` members.
pub fn enumerate_subsets(user: usize, base: &[usize], l: usize) -> Result<SubsetFamily, SubsetError> {
    let mut items = base.to_vec();
    items.sort_unstable();
    items.dedup();
    let n = items.len();
    if n > 64 || items.last().is_some_and(|&b| b >= 64) {
        return Err(SubsetError::TooLarge(n));
    }
    if l < 1 || l > n {
        return Err(SubsetError::Range { n, l });
    }
    let mut subsets = Vec::new();
    for size in l..=n {
        // lexicographic combinations of positions
        let mut pos: Vec<usize> = (0..size).collect();
        loop {
            subsets.push(RruSet(pos.iter().fold(0u64, |m, &p| m | 1u64 << items[p])));
            let Some(i) = (0..size).rev().find(|&i| pos[i] != i + n - size) else {
                break;
            };
            pos[i] += 1;
            for j in i + 1..size {
                pos[j] = pos[j - 1] + 1;
            }
        }
    }
    Ok(SubsetFamily {
        user,
        base: RruSet::from_indices(&items),
        min_size: l,
        subsets,
    })
}

/// Per-user stacked beamformers; block `b` of user `k` is `f_{b,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformers {
    pub num_rrus: usize,
    pub antennas: usize,
    data: Vec<Vec<Complex64>>,
}

impl Beamformers {
    pub fn zeros(num_ues: usize, num_rrus: usize, antennas: usize) -> Self {
        Self {
            num_rrus,
            antennas,
            data: vec![vec![Complex64::new(0.0, 0.0); num_rrus * antennas]; num_ues],
        }
    }

    pub fn num_ues(&self) -> usize {
        self.data.len()
    }

    pub fn stacked(&self, k: usize) -> &[Complex64] {
        &self.data[k]
    }

    pub fn stacked_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.data[k]
    }

    pub fn block(&self, k: usize, b: usize) -> &[Complex64] {
        &self.data[k][b * self.antennas..(b + 1) * self.antennas]
    }

    pub fn block_mut(&mut self, k: usize, b: usize) -> &mut [Complex64] {
        let n = self.antennas;
        &mut self.data[k][b * n..(b + 1) * n]
    }

    pub fn power(&self, k: usize) -> f64 {
        self.data[k].iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn total_power(&self) -> f64 {
        (0..self.num_ues()).map(|k| self.power(k)).sum()
    }
}

/// Achievable rate `log2(1 + sinr)`, bits per channel use. Scheduled and
/// supported rates both go through here so equal SINRs give equal rates.
pub fn rate_of(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

/// `x^H y`.
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Cross gains `g[b][k][u] = h_{b,k}^H f_{b,u}`; every SINR in this crate is
/// a masked sum of these.
#[derive(Debug, Clone)]
pub struct CrossGains {
    num_ues: usize,
    g: Vec<Complex64>,
}

impl CrossGains {
    pub fn new(h: &ChannelState, f: &Beamformers) -> Self {
        let (nb, nk) = (h.num_rrus, h.num_ues);
        let mut g = Vec::with_capacity(nb * nk * nk);
        for b in 0..nb {
            for k in 0..nk {
                let hb = h.h(b, k);
                for u in 0..nk {
                    g.push(inner(hb, f.block(u, b)));
                }
            }
        }
        Self { num_ues: nk, g }
    }

    pub fn at(&self, b: usize, k: usize, u: usize) -> Complex64 {
        self.g[(b * self.num_ues + k) * self.num_ues + u]
    }

    /// `sum_{b in mask} h_{b,k}^H f_{b,u}`.
    pub fn masked(&self, mask: RruSet, k: usize, u: usize) -> Complex64 {
        mask.iter().map(|b| self.at(b, k, u)).sum()
    }

    /// Signal term and interference-plus-noise of user `k` under `mask`.
    pub fn signal_and_interference(&self, mask: RruSet, k: usize, noise: f64) -> (Complex64, f64) {
        let signal = self.masked(mask, k, k);
        let interference: f64 = (0..self.num_ues)
            .filter(|&u| u != k)
            .map(|u| self.masked(mask, k, u).norm_sqr())
            .sum();
        (signal, noise + interference)
    }

    pub fn sinr(&self, mask: RruSet, k: usize, noise: f64) -> f64 {
        let (s, d) = self.signal_and_interference(mask, k, noise);
        s.norm_sqr() / d
    }
}

/// SINR of user `k` when exactly the RRUs in `families[k].excluded(c)` are
/// blocked towards it, from per-RRU sums over the serving sets.
pub fn sinr_subset(
    f: &Beamformers,
    h: &ChannelState,
    k: usize,
    c: usize,
    families: &[SubsetFamily],
    noise: f64,
) -> f64 {
    let fam = &families[k];
    let dropped = fam.excluded(c);
    let num: Complex64 = fam.subsets[c]
        .iter()
        .map(|b| inner(h.h(b, k), f.block(k, b)))
        .sum();
    let mut interference = 0.0;
    for (u, fu) in families.iter().enumerate() {
        if u == k {
            continue;
        }
        let s: Complex64 = fu
            .base
            .difference(dropped)
            .iter()
            .map(|g| inner(h.h(g, k), f.block(u, g)))
            .sum();
        interference += s.norm_sqr();
    }
    num.norm_sqr() / (noise + interference)
}

/// Stacked channel of user `k` with the blocks outside `mask` zeroed.
pub fn stacked_channel(h: &ChannelState, k: usize, mask: RruSet) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(h.num_rrus * h.antennas);
    for b in 0..h.num_rrus {
        if mask.contains(b) {
            out.extend_from_slice(h.h(b, k));
        } else {
            out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), h.antennas));
        }
    }
    out
}

/// The same SINR evaluated on stacked, masked vectors.
pub fn sinr_subset_stacked(
    f: &Beamformers,
    h: &ChannelState,
    k: usize,
    c: usize,
    family: &SubsetFamily,
    noise: f64,
) -> f64 {
    let hk = stacked_channel(h, k, family.reach(c, h.num_rrus));
    let num = inner(&hk, f.stacked(k)).norm_sqr();
    let interference: f64 = (0..f.num_ues())
        .filter(|&u| u != k)
        .map(|u| inner(&hk, f.stacked(u)).norm_sqr())
        .sum();
    num / (noise + interference)
}

/// Minimum subset SINR and the first hypothesis attaining it.
pub fn pessimistic_sinr(
    f: &Beamformers,
    h: &ChannelState,
    k: usize,
    families: &[SubsetFamily],
    noise: f64,
) -> (f64, usize) {
    let gains = CrossGains::new(h, f);
    pessimistic_from_gains(&gains, k, &families[k], h.num_rrus, noise)
}

pub(crate) fn pessimistic_from_gains(
    gains: &CrossGains,
    k: usize,
    family: &SubsetFamily,
    num_rrus: usize,
    noise: f64,
) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for c in 0..family.len() {
        let s = gains.sinr(family.reach(c, num_rrus), k, noise);
        if s < best.0 {
            best = (s, c);
        }
    }
    best
}

/// Received SINR on a realized channel (blocked pairs already zeroed).
pub fn sinr_actual(f: &Beamformers, realized: &ChannelState, k: usize, noise: f64) -> f64 {
    let mut signal = Complex64::new(0.0, 0.0);
    let mut interference = 0.0;
    for u in 0..f.num_ues() {
        let s: Complex64 = (0..realized.num_rrus)
            .map(|b| inner(realized.h(b, k), f.block(u, b)))
            .sum();
        if u == k {
            signal = s;
        } else {
            interference += s.norm_sqr();
        }
    }
    signal.norm_sqr() / (noise + interference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(n: usize, l: usize) -> Vec<u64> {
        let mut v: Vec<u64> = (1u64..1 << n).filter(|m| m.count_ones() as usize >= l).collect();
        v.sort_by_key(|m| {
            let idx: Vec<usize> = (0..n).filter(|b| m >> b & 1 == 1).collect();
            (idx.len(), idx)
        });
        v
    }

    #[test]
    fn three_rru_example() {
        let fam = enumerate_subsets(0, &[1, 2, 3], 2).unwrap();
        let got: Vec<Vec<usize>> = fam.subsets.iter().map(|s| s.to_vec()).collect();
        assert_eq!(got, vec![vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 2, 3]]);
        assert_eq!(fam.excluded(0).to_vec(), vec![3]);
        assert_eq!(subset_count(3, 2), Ok(4));
    }

    #[test]
    fn full_set_only_and_counts() {
        let fam = enumerate_subsets(0, &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(fam.subsets, vec![RruSet(0b1111)]);
        assert_eq!(enumerate_subsets(0, &[0, 1, 2, 3], 2).unwrap().len(), 11);
        assert_eq!(subset_count(4, 2), Ok(11));
        for n in 1..=20 {
            assert_eq!(subset_count(n, 1), Ok((1u64 << n) - 1));
        }
        assert_eq!(subset_count(3, 0), Err(SubsetError::Range { n: 3, l: 0 }));
        assert!(enumerate_subsets(0, &[0, 1], 3).is_err());
    }

    #[test]
    fn enumeration_matches_power_set_filter() {
        for n in 1..=8 {
            let base: Vec<usize> = (0..n).collect();
            for l in 1..=n {
                let fam = enumerate_subsets(0, &base, l).unwrap();
                let got: Vec<u64> = fam.subsets.iter().map(|s| s.0).collect();
                let want = brute_force(n, l);
                assert_eq!(got, want, "n={n} l={l}");
                assert_eq!(subset_count(n, l).unwrap() as usize, want.len());
            }
        }
    }

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    }

    /// Random channel and beamformers honouring the serving-set zero pattern.
    fn instance(seed: u64, nb: usize, nk: usize, n: usize, l: usize) -> (ChannelState, Beamformers, Vec<SubsetFamily>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = ChannelState::zeros(nb, nk, n, 0);
        for b in 0..nb {
            for k in 0..nk {
                for x in h.h_mut(b, k) {
                    *x = rand_c(&mut rng);
                }
            }
        }
        let mut f = Beamformers::zeros(nk, nb, n);
        let mut fams = Vec::new();
        for k in 0..nk {
            // random nonempty serving set
            let mut base: Vec<usize> = (0..nb).filter(|_| rng.random::<bool>()).collect();
            if base.is_empty() {
                base.push(rng.random_range(0..nb));
            }
            for &b in &base {
                for x in f.block_mut(k, b) {
                    *x = rand_c(&mut rng);
                }
            }
            let l = l.min(base.len());
            fams.push(enumerate_subsets(k, &base, l).unwrap());
        }
        (h, f, fams)
    }

    #[test]
    fn single_user_sinr() {
        let mut h = ChannelState::zeros(1, 1, 1, 0);
        h.h_mut(0, 0)[0] = Complex64::new(1.0, 0.0);
        let mut f = Beamformers::zeros(1, 1, 1);
        f.block_mut(0, 0)[0] = Complex64::new(2.0, 0.0);
        let fams = vec![enumerate_subsets(0, &[0], 1).unwrap()];
        assert!((sinr_subset(&f, &h, 0, 0, &fams, 1.0) - 4.0).abs() < 1e-12);
        let zero = Beamformers::zeros(1, 1, 1);
        assert_eq!(sinr_subset(&zero, &h, 0, 0, &fams, 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn stacked_and_per_rru_forms_agree(seed in any::<u64>(), nb in 1usize..=4, nk in 1usize..=3, n in 1usize..=3, l in 1usize..=4) {
            let (h, f, fams) = instance(seed, nb, nk, n, l);
            let gains = CrossGains::new(&h, &f);
            for k in 0..nk {
                for c in 0..fams[k].len() {
                    let a = sinr_subset(&f, &h, k, c, &fams, 0.7);
                    let b = sinr_subset_stacked(&f, &h, k, c, &fams[k], 0.7);
                    let g = gains.sinr(fams[k].reach(c, nb), k, 0.7);
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
                    prop_assert!((a - g).abs() <= 1e-12 * (1.0 + a));
                }
            }
        }

        #[test]
        fn pessimistic_is_min_and_monotone_in_l(seed in any::<u64>(), nk in 1usize..=3) {
            let (h, f, _) = instance(seed, 4, nk, 2, 1);
            let mut prev = f64::NEG_INFINITY;
            for l in 1..=4 {
                let fams: Vec<SubsetFamily> = (0..nk)
                    .map(|k| enumerate_subsets(k, &[0, 1, 2, 3], l).unwrap())
                    .collect();
                // beamformers above may use any RRU, consistent with full serving sets
                let (v, c) = pessimistic_sinr(&f, &h, 0, &fams, 0.3);
                let all: Vec<f64> = (0..fams[0].len()).map(|c| sinr_subset(&f, &h, 0, c, &fams, 0.3)).collect();
                let m = all.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!((v - m).abs() <= 1e-12 * (1.0 + m));
                prop_assert_eq!(c, all.iter().position(|&x| x == all[c]).unwrap());
                prop_assert!(v >= prev - 1e-12 * (1.0 + v));
                prev = v;
            }
        }

        #[test]
        fn realized_subset_matches_actual_sinr(seed in any::<u64>(), nk in 1usize..=3, mask in 1u64..16) {
            // block exactly D = {0..3} \ mask towards user 0 and nothing else
            let (h, f, _) = instance(seed, 4, nk, 2, 1);
            let fams: Vec<SubsetFamily> = (0..nk).map(|k| enumerate_subsets(k, &[0, 1, 2, 3], 1).unwrap()).collect();
            let c = fams[0].subsets.iter().position(|s| s.0 == mask).unwrap();
            let mut realized = h.clone();
            for b in 0..4 {
                if mask >> b & 1 == 0 {
                    realized.h_mut(b, 0).fill(Complex64::new(0.0, 0.0));
                }
            }
            let a = sinr_actual(&f, &realized, 0, 0.5);
            let s = sinr_subset(&f, &h, 0, c, &fams, 0.5);
            prop_assert!((a - s).abs() <= 1e-12 * (1.0 + s));
            let (p, _) = pessimistic_sinr(&f, &h, 0, &fams, 0.5);
            prop_assert!(p <= s + 1e-12 * (1.0 + s));
        }
    }

    #[test]
    fn actual_sinr_edge_cases() {
        let (h, f, _) = instance(5, 2, 2, 2, 1);
        let mut realized = h.clone();
        for b in 0..2 {
            realized.h_mut(b, 0).fill(Complex64::new(0.0, 0.0));
        }
        assert_eq!(sinr_actual(&f, &realized, 0, 1.0), 0.0);

        // single user, nothing blocked: actual equals the full-set subset SINR
        let (h1, f1, _) = instance(6, 3, 1, 2, 1);
        let full = vec![enumerate_subsets(0, &[0, 1, 2], 3).unwrap()];
        let mut f1 = f1;
        for b in 0..3 {
            if !full[0].base.contains(b) {
                f1.block_mut(0, b).fill(Complex64::new(0.0, 0.0));
            }
        }
        let a = sinr_actual(&f1, &h1, 0, 1.0);
        let s = sinr_subset(&f1, &h1, 0, 0, &full, 1.0);
        assert!((a - s).abs() < 1e-12 * (1.0 + s));

        // user 0 served by RRU 0, user 1 by RRU 1, link (1, 0) blocked:
        // interference towards user 0 vanishes
        let mut f2 = Beamformers::zeros(2, 2, 2);
        f2.block_mut(0, 0).copy_from_slice(f.block(0, 0));
        f2.block_mut(1, 1).copy_from_slice(f.block(1, 1));
        let mut r = h.clone();
        r.h_mut(1, 0).fill(Complex64::new(0.0, 0.0));
        let want = inner(h.h(0, 0), f2.block(0, 0)).norm_sqr() / 1.0;
        assert!((sinr_actual(&f2, &r, 0, 1.0) - want).abs() < 1e-12 * (1.0 + want));
    }
}
