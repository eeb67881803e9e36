//! Agglomerative clustering of clients by the cosine similarity of their
//! model updates (average linkage).

use crate::error::{Error, Result};
use crate::protocol::ModelUpdate;

/// Dense cluster labels for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub round: usize,
    /// `assignment[client] = cluster`, ids dense in `0..n_clusters`.
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn members_of(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&c| self.assignment[c] == cluster)
            .collect()
    }
}

/// Pairwise cosine similarities of flattened updates. Any pair involving a
/// zero-norm update gets similarity -1.
pub fn pairwise_cosine(updates: &[ModelUpdate]) -> Vec<Vec<f64>> {
    let flats: Vec<Vec<f64>> = updates.iter().map(ModelUpdate::flatten).collect();
    let norms: Vec<f64> = flats
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let n = updates.len();
    let mut sims = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                -1.0
            } else {
                let dot: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    sims
}

/// Average-linkage agglomerative clustering on `d(i,j) = 1 - cos(i,j)`,
/// merging until `n_clusters` remain. Merge ties break on the smallest
/// `(i, j)` pair of cluster anchor ids (an anchor is a cluster's smallest
/// member). Zero-norm updates are excluded from the similarity structure and
/// attached to the largest cluster afterwards.
pub fn cluster_clients(updates: &[ModelUpdate], n_clusters: usize, round: usize) -> Result<ClusterAssignment> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Protocol("clustering with no updates".into()));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::Protocol(format!(
            "n_clusters {n_clusters} out of range for {n} clients"
        )));
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(ModelUpdate::flatten).collect();
    let norms: Vec<f64> = flats
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let active: Vec<usize> = (0..n).filter(|&i| norms[i] > 0.0).collect();
    let zeros: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();

    let mut clusters: Vec<Vec<usize>> = if active.is_empty() {
        Vec::new()
    } else {
        let mut dist = vec![vec![0.0; n]; n];
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let dot: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
                let d = 1.0 - (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }
        merge_to(active.iter().map(|&i| vec![i]).collect(), &dist, n_clusters)
    };

    // Zero-norm clients: attach to the largest cluster (ties to the one with
    // the smallest anchor); if everyone is zero, one cluster holds them all.
    if clusters.is_empty() {
        clusters.push(zeros.clone());
    } else {
        for &z in &zeros {
            let target = (0..clusters.len())
                .max_by(|&a, &b| {
                    clusters[a]
                        .len()
                        .cmp(&clusters[b].len())
                        .then(clusters[b][0].cmp(&clusters[a][0]))
                })
                .expect("at least one cluster");
            clusters[target].push(z);
            clusters[target].sort_unstable();
        }
    }

    // Dense labels ordered by smallest member.
    clusters.sort_by_key(|c| c[0]);
    let mut assignment = vec![0usize; n];
    for (label, members) in clusters.iter().enumerate() {
        for &m in members {
            assignment[m] = label;
        }
    }
    Ok(ClusterAssignment {
        round,
        assignment,
        n_clusters: clusters.len(),
    })
}

/// Repeated nearest-pair merging with the stated tie-break. A cluster's
/// anchor is its smallest member id; ties on average distance pick the
/// lexicographically smallest anchor pair.
fn merge_to(mut clusters: Vec<Vec<usize>>, dist: &[Vec<f64>], target: usize) -> Vec<Vec<usize>> {
    while clusters.len() > target {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += dist[i][j];
                    }
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                let lo = clusters[a][0].min(clusters[b][0]);
                let hi = clusters[a][0].max(clusters[b][0]);
                let better = match best {
                    None => true,
                    Some((d, i, j)) => avg < d || (avg == d && (lo, hi) < (i, j)),
                };
                if better {
                    best = Some((avg, lo, hi));
                }
            }
        }
        let Some((_, lo, hi)) = best else { break };
        let mut ia = clusters.iter().position(|c| c[0] == lo).expect("anchor exists");
        let ib = clusters.iter().position(|c| c[0] == hi).expect("anchor exists");
        let moved = clusters.remove(ib);
        if ib < ia {
            ia -= 1;
        }
        clusters[ia].extend(moved);
        clusters[ia].sort_unstable();
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamMap;
    use crate::protocol::Stage;
    use crate::tensor::Tensor;

    fn updates_from(vectors: &[Vec<f64>]) -> Vec<ModelUpdate> {
        vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut deltas = ParamMap::new();
                deltas.insert("w".into(), Tensor::new(vec![v.len()], v.clone()).unwrap());
                ModelUpdate {
                    client_id: i,
                    round: 0,
                    stage: Stage::Assign,
                    deltas,
                    sample_count: 1,
                }
            })
            .collect()
    }

    #[test]
    fn n_clusters_equal_n_means_no_merges() {
        let ups = updates_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let a = cluster_clients(&ups, 3, 0).unwrap();
        assert_eq!(a.assignment, vec![0, 1, 2]);
        assert_eq!(a.n_clusters, 3);
    }

    #[test]
    fn single_cluster_merges_everyone() {
        let ups = updates_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let a = cluster_clients(&ups, 1, 0).unwrap();
        assert_eq!(a.assignment, vec![0, 0, 0]);
        assert_eq!(a.n_clusters, 1);
    }

    #[test]
    fn four_directions_split_into_two_pairs() {
        let ups = updates_from(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.9],
        ]);
        let a = cluster_clients(&ups, 2, 0).unwrap();
        assert_eq!(a.assignment, vec![0, 0, 1, 1]);
    }

    #[test]
    fn zero_norm_update_attaches_to_largest_cluster() {
        let ups = updates_from(&[
            vec![1.0, 0.0],
            vec![0.95, 0.05],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ]);
        let a = cluster_clients(&ups, 2, 0).unwrap();
        // Clients 0..2 cluster together; the zero-norm client 4 joins them.
        assert_eq!(a.assignment[0], a.assignment[1]);
        assert_eq!(a.assignment[0], a.assignment[2]);
        assert_eq!(a.assignment[4], a.assignment[0]);
        assert_ne!(a.assignment[3], a.assignment[0]);
    }

    #[test]
    fn all_zero_updates_collapse_to_one_cluster() {
        let ups = updates_from(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let a = cluster_clients(&ups, 2, 0).unwrap();
        assert_eq!(a.assignment, vec![0, 0]);
        assert_eq!(a.n_clusters, 1);
    }

    #[test]
    fn zero_norm_pairs_have_similarity_minus_one() {
        let ups = updates_from(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let sims = pairwise_cosine(&ups);
        assert_eq!(sims[0][1], -1.0);
        assert_eq!(sims[1][0], -1.0);
    }
}
