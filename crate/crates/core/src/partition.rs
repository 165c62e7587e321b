//! Splitting a labelled dataset across clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// Uniform shuffle, equal-sized slices.
    #[default]
    Iid,
    /// Label-sorted data cut into `K * shards_per_client` contiguous segments,
    /// dealt out in a seeded random order.
    Shards { shards_per_client: usize },
    /// Per-label client proportions drawn from `Dirichlet(concentration)`.
    Dirichlet { concentration: f64 },
}

const DIRICHLET_ATTEMPTS: usize = 100;

/// Returns one sorted index set per client. Sets are disjoint and cover
/// every index.
pub fn partition<R: Rng + ?Sized>(
    labels: &[usize],
    strategy: PartitionStrategy,
    num_clients: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if num_clients > n {
        return Err(Error::config(format!(
            "{num_clients} clients but only {n} data points"
        )));
    }
    let mut parts = match strategy {
        PartitionStrategy::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            split_even(&idx, num_clients)
        }
        PartitionStrategy::Shards { shards_per_client } => {
            let shards = num_clients * shards_per_client;
            if shards_per_client == 0 || shards > n {
                return Err(Error::config(format!(
                    "cannot cut {n} points into {shards} shards"
                )));
            }
            let mut sorted: Vec<usize> = (0..n).collect();
            sorted.sort_by_key(|&i| (labels[i], i));
            let segments = split_even(&sorted, shards);
            let mut order: Vec<usize> = (0..shards).collect();
            order.shuffle(rng);
            order
                .chunks(shards_per_client)
                .map(|ids| {
                    ids.iter()
                        .flat_map(|&s| segments[s].iter().copied())
                        .collect()
                })
                .collect()
        }
        PartitionStrategy::Dirichlet { concentration } => {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(Error::config("Dirichlet concentration must be positive"));
            }
            let mut attempt = 0;
            loop {
                let parts = dirichlet_split(labels, num_clients, concentration, rng);
                if parts.iter().all(|p| !p.is_empty()) {
                    break parts;
                }
                attempt += 1;
                if attempt == DIRICHLET_ATTEMPTS {
                    return Err(Error::config(format!(
                        "Dirichlet({concentration}) left a client empty after {attempt} draws"
                    )));
                }
            }
        }
    };
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

fn split_even(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = idx.len();
    (0..parts)
        .map(|k| idx[k * n / parts..(k + 1) * n / parts].to_vec())
        .collect()
}

/// Symmetric Dirichlet draw computed in log space, so tiny concentrations
/// do not underflow to an all-zero vector.
fn dirichlet<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let (shape, boost) = if concentration < 1.0 {
        (concentration + 1.0, true)
    } else {
        (concentration, false)
    };
    let gamma = Gamma::new(shape, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let mut l = gamma.sample(rng).ln();
            if boost {
                // Gamma(a) = Gamma(a + 1) * U^(1/a)
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                l += u.ln() / concentration;
            }
            l
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn dirichlet_split<R: Rng + ?Sized>(
    labels: &[usize],
    k: usize,
    concentration: f64,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut parts = vec![Vec::new(); k];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let p = dirichlet(k, concentration, rng);
        let n = idx.len() as f64;
        let mut start = 0;
        let mut cum = 0.0;
        for (client, share) in p.iter().enumerate() {
            cum += share;
            let end = if client + 1 == k {
                idx.len()
            } else {
                ((cum * n).round() as usize).clamp(start, idx.len())
            };
            parts[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    parts
}
