//! Deterministic synthetic interaction stream for tests and benchmarks.
//!
//! Sources interact with destination nodes that are grouped into clusters of
//! two. Each source has a preferred cluster and sends 90% of its events
//! there, picking uniformly inside the chosen cluster. Edge features encode
//! the actual destination cluster as a noisy point on the unit circle, so a
//! model that checks whether a candidate destination is consistent with the
//! event's features can rank true destinations far above random ones. Event
//! labels carry the parity of the source's preferred cluster for the node
//! classification task.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::ctdg::{Event, EventLog};
use crate::error::{Error, Result};

/// Probability that an event goes to the source's preferred cluster.
pub const PREFERRED_RATE: f64 = 0.9;
/// Standard deviation of the feature noise.
pub const FEATURE_NOISE: f64 = 0.1;
/// Destinations per cluster.
pub const CLUSTER_SIZE: usize = 2;

/// Generates `events` interactions over `nodes` nodes, split evenly into
/// sources and destinations. Identical arguments produce an identical log.
pub fn generate_synthetic(nodes: usize, events: usize, seed: u64) -> Result<EventLog> {
    let n_src = nodes / 2;
    let n_dst = nodes - n_src;
    let n_clusters = n_dst / CLUSTER_SIZE;
    if n_src == 0 || n_clusters < 2 {
        return Err(Error::usage(format!(
            "synthetic stream needs sources and at least two destination clusters, got {nodes} nodes"
        )));
    }
    if events == 0 {
        return Err(Error::usage("synthetic stream needs at least one event"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let preferred: Vec<usize> = (0..n_src).map(|_| rng.gen_range(0..n_clusters)).collect();

    let mut t = 0.0;
    let mut events_out = Vec::with_capacity(events);
    for _ in 0..events {
        // unit-rate exponential gaps keep timestamps strictly increasing
        t += -(1.0 - rng.gen::<f64>()).ln();
        let src = rng.gen_range(0..n_src);
        let cluster = if rng.gen_bool(PREFERRED_RATE) {
            preferred[src]
        } else {
            // uniform over the other clusters
            let other = rng.gen_range(0..n_clusters - 1);
            if other >= preferred[src] {
                other + 1
            } else {
                other
            }
        };
        let dst = n_src + cluster * CLUSTER_SIZE + rng.gen_range(0..CLUSTER_SIZE);
        let angle = 2.0 * std::f64::consts::PI * cluster as f64 / n_clusters as f64;
        let features = vec![
            (angle.cos() + FEATURE_NOISE * gaussian(&mut rng)) as f32,
            (angle.sin() + FEATURE_NOISE * gaussian(&mut rng)) as f32,
        ];
        events_out.push(Event {
            src,
            dst,
            t,
            label: Some((preferred[src] % 2) as u8),
            features,
        });
    }
    EventLog::from_dense(events_out, n_src, n_dst)
}

/// Cluster of a destination node in a generated log.
pub fn dst_cluster(log: &EventLog, dst: usize) -> usize {
    (dst - log.n_src()) / CLUSTER_SIZE
}

fn gaussian(rng: &mut StdRng) -> f64 {
    // Box-Muller transform
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
