//! Actual and virtual queues with the outage-aware service rule.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Queue state of all users in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    /// Backlog `Q_k`, bits.
    pub q: Vec<f64>,
    /// Virtual queue `Z_k`, bits.
    pub z: Vec<f64>,
    /// Arrivals of the current slot, bits.
    pub a: Vec<f64>,
    history: Vec<VecDeque<bool>>,
    window: usize,
}

impl QueueState {
    pub fn new(num_ues: usize, window: usize) -> Self {
        Self {
            q: vec![0.0; num_ues],
            z: vec![0.0; num_ues],
            a: vec![0.0; num_ues],
            history: vec![VecDeque::with_capacity(window); num_ues],
            window,
        }
    }

    pub fn num_ues(&self) -> usize {
        self.q.len()
    }

    /// Appends an outage indicator, dropping the oldest beyond the window.
    pub fn record_outage(&mut self, k: usize, flag: bool) {
        let h = &mut self.history[k];
        if h.len() == self.window {
            h.pop_front();
        }
        h.push_back(flag);
    }

    /// Outage indicators of user `k`, oldest first.
    pub fn history(&self, k: usize) -> &VecDeque<bool> {
        &self.history[k]
    }
}

/// Independent Poisson arrivals, one per user.
pub fn draw_arrivals<R: Rng + ?Sized>(lambda: f64, num_ues: usize, rng: &mut R) -> Vec<f64> {
    match Poisson::new(lambda) {
        Ok(p) => (0..num_ues).map(|_| p.sample(rng)).collect(),
        // only lambda = 0 reaches here after validation
        Err(_) => vec![0.0; num_ues],
    }
}

/// Serves `r` only when it does not exceed the supported rate; a failed
/// transmission serves nothing. Returns the new backlog and the outage flag.
pub fn update_queue(q: f64, r: f64, c_sup: f64, a: f64) -> (f64, bool) {
    let ok = r <= c_sup;
    let served = if ok { r } else { 0.0 };
    ((q - served + a).max(0.0), r > 0.0 && !ok)
}

pub fn update_virtual(z: f64, q_next: f64, eps: f64, q_th: f64) -> f64 {
    (z + q_next - eps * q_th).max(0.0)
}

/// Per-slot weight of a user's rate in the drift-plus-penalty objective.
pub fn slot_weight(q: f64, a: f64, z: f64) -> f64 {
    q + a + z
}

/// Outage indicator observed by the scheduler: a nonzero rate was assigned
/// yet the backlog grew by exactly the arrivals.
pub fn outage_indicator(r: f64, q: f64, a: f64, q_next: f64) -> bool {
    r != 0.0 && q_next == q + a
}
