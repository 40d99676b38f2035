//! Scenario geometry: RRUs on a fixed grid, UEs dropped uniformly.

use rand::Rng;

use crate::config::ScenarioConfig;
use crate::rng::{stream_rng, Stream};

/// Smallest admissible RRU-UE distance in meters.
pub const MIN_DISTANCE_M: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub area_side_m: f64,
    pub rru_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    /// `distances[b][k]`, meters.
    pub distances: Vec<Vec<f64>>,
    /// Serving RRU indices of each user, ascending.
    pub serving_sets: Vec<Vec<usize>>,
}

impl Geometry {
    pub fn num_rrus(&self) -> usize {
        self.rru_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }
}

/// RRUs sit at the centres of a `cols x rows` grid of equal cells, filled
/// column by column. Four RRUs give the quadrant centres.
pub fn rru_grid(num_rrus: usize, side: f64) -> Vec<[f64; 2]> {
    let cols = (num_rrus as f64).sqrt().ceil() as usize;
    let rows = num_rrus.div_ceil(cols);
    let (dx, dy) = (side / cols as f64, side / rows as f64);
    (0..num_rrus)
        .map(|i| {
            let (cx, cy) = (i / rows, i % rows);
            [(cx as f64 + 0.5) * dx, (cy as f64 + 0.5) * dy]
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Pushes `ue` away from the nearest offending RRU until every distance is
/// at least [`MIN_DISTANCE_M`]. RRUs are at least a cell apart, so one push
/// never creates a new violation for realistic layouts; a bounded loop guards
/// the degenerate ones.
fn clamp_position(mut ue: [f64; 2], rrus: &[[f64; 2]], side: f64) -> [f64; 2] {
    for _ in 0..8 {
        let Some(rru) = rrus.iter().copied().find(|&r| dist(r, ue) < MIN_DISTANCE_M) else {
            break;
        };
        let d = dist(rru, ue);
        let (mut ux, mut uy) = if d > 0.0 {
            ((ue[0] - rru[0]) / d, (ue[1] - rru[1]) / d)
        } else {
            (1.0, 0.0)
        };
        // keep the drop inside the square
        let target = [rru[0] + ux * MIN_DISTANCE_M, rru[1] + uy * MIN_DISTANCE_M];
        if !(0.0..=side).contains(&target[0]) || !(0.0..=side).contains(&target[1]) {
            ux = -ux;
            uy = -uy;
        }
        ue = [rru[0] + ux * MIN_DISTANCE_M, rru[1] + uy * MIN_DISTANCE_M];
    }
    ue
}

/// Deterministic in `(cfg, seed)`: RRU grid plus uniform UE drops from the
/// geometry stream of replication `seed`.
pub fn generate_geometry(cfg: &ScenarioConfig, seed: u64) -> Geometry {
    let side = cfg.area_side_m;
    let rru_positions = rru_grid(cfg.num_rrus, side);
    let mut rng = stream_rng(cfg.master_seed, seed, Stream::Geometry);
    let ue_positions: Vec<[f64; 2]> = (0..cfg.num_ues)
        .map(|_| {
            let p = [rng.random::<f64>() * side, rng.random::<f64>() * side];
            clamp_position(p, &rru_positions, side)
        })
        .collect();
    let distances = rru_positions
        .iter()
        .map(|&r| ue_positions.iter().map(|&u| dist(r, u)).collect())
        .collect();
    let serving_sets = vec![(0..cfg.num_rrus).collect(); cfg.num_ues];
    Geometry {
        area_side_m: side,
        rru_positions,
        ue_positions,
        distances,
        serving_sets,
    }
}
