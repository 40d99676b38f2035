//! Sparse geometric mmWave channels with independent on/off link blockage.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ScenarioConfig;
use crate::geometry::Geometry;

/// Half-wavelength ULA response; element `n` is `exp(j pi n sin(phi))`.
pub fn ula_response(phi: f64, n: usize) -> Vec<Complex64> {
    let s = PI * phi.sin();
    (0..n).map(|i| Complex64::from_polar(1.0, s * i as f64)).collect()
}

/// Per-slot channel of every RRU-UE pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub slot: usize,
    pub num_rrus: usize,
    pub num_ues: usize,
    pub antennas: usize,
    h: Vec<Complex64>,
    blocked: Vec<bool>,
}

impl ChannelState {
    pub fn zeros(num_rrus: usize, num_ues: usize, antennas: usize, slot: usize) -> Self {
        Self {
            slot,
            num_rrus,
            num_ues,
            antennas,
            h: vec![Complex64::new(0.0, 0.0); num_rrus * num_ues * antennas],
            blocked: vec![false; num_rrus * num_ues],
        }
    }

    fn offset(&self, b: usize, k: usize) -> usize {
        (b * self.num_ues + k) * self.antennas
    }

    /// Channel vector `h_{b,k}` (the zero vector when the pair is blocked in a
    /// realized state).
    pub fn h(&self, b: usize, k: usize) -> &[Complex64] {
        let o = self.offset(b, k);
        &self.h[o..o + self.antennas]
    }

    pub fn h_mut(&mut self, b: usize, k: usize) -> &mut [Complex64] {
        let o = self.offset(b, k);
        let n = self.antennas;
        &mut self.h[o..o + n]
    }

    pub fn is_blocked(&self, b: usize, k: usize) -> bool {
        self.blocked[b * self.num_ues + k]
    }

    pub fn norm_sqr(&self, b: usize, k: usize) -> f64 {
        self.h(b, k).iter().map(|z| z.norm_sqr()).sum()
    }

    /// Number of blocked pairs.
    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&x| x).count()
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws the nominal (unblocked) channel of slot `t`. Gains, path-loss
/// exponents and angles are fresh for every pair and path.
pub fn draw_channel<R: Rng + ?Sized>(
    geom: &Geometry,
    cfg: &ScenarioConfig,
    t: usize,
    rng: &mut R,
) -> ChannelState {
    let (nb, nk, n, m) = (geom.num_rrus(), geom.num_ues(), cfg.antennas_per_rru, cfg.num_paths);
    let [lo, hi] = cfg.pathloss_exponent_range;
    let scale = (n as f64 / m as f64).sqrt();
    let mut ch = ChannelState::zeros(nb, nk, n, t);
    for b in 0..nb {
        for k in 0..nk {
            let d = geom.distances[b][k];
            let h = ch.h_mut(b, k);
            for _ in 0..m {
                let omega = complex_gaussian(rng);
                let psi = lo + (hi - lo) * rng.random::<f64>();
                let phi = -FRAC_PI_2 + PI * rng.random::<f64>();
                let g = omega * (scale * d.powf(-psi));
                let s = PI * phi.sin();
                for (i, x) in h.iter_mut().enumerate() {
                    *x += g * Complex64::from_polar(1.0, -s * i as f64);
                }
            }
        }
    }
    ch
}

/// Blocks every pair independently with probability `q`. Exactly one uniform
/// is consumed per pair whatever `q` is.
pub fn apply_blockage<R: Rng + ?Sized>(nominal: &ChannelState, q: f64, rng: &mut R) -> ChannelState {
    let mut out = nominal.clone();
    for b in 0..out.num_rrus {
        for k in 0..out.num_ues {
            let u: f64 = rng.random();
            if u < q {
                out.blocked[b * out.num_ues + k] = true;
                out.h_mut(b, k).fill(Complex64::new(0.0, 0.0));
            }
        }
    }
    out
}

/// Debug dump: one `slot,b,k,blocked,norm_sq` row per pair.
pub fn write_channel_dump<W: Write>(
    w: &mut csv::Writer<W>,
    nominal: &ChannelState,
    realized: &ChannelState,
) -> csv::Result<()> {
    for b in 0..nominal.num_rrus {
        for k in 0..nominal.num_ues {
            w.write_record([
                nominal.slot.to_string(),
                b.to_string(),
                k.to_string(),
                u8::from(realized.is_blocked(b, k)).to_string(),
                nominal.norm_sqr(b, k).to_string(),
            ])?;
        }
    }
    Ok(())
}
