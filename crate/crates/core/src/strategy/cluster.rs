//! Cosine-similarity DBSCAN over strategy summaries, medoid selection and
//! small-cluster pruning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::similarity::{SimilarityError, SimilarityMatrix};
use crate::model::{StrategyCluster, StrategySummary};
use crate::scalar::Real;

/// DBSCAN with the neighborhood `cos(p, q) >= eps_sim`.
///
/// A point is core when it has at least `min_pts` neighbors, itself
/// included. Clusters are the connected components of the core-point
/// neighbor graph, numbered by their lowest-index core point. A non-core
/// point within reach of some core point joins the cluster of its
/// lowest-index core neighbor; everything else is noise (`None`).
pub fn dbscan<T: Real, V: AsRef<[T]>>(
    points: &[V],
    eps_sim: T,
    min_pts: usize,
) -> Result<Vec<Option<usize>>, SimilarityError> {
    let n = points.len();
    if let Some(first) = points.first() {
        let d = first.as_ref().len();
        if let Some(bad) = points.iter().find(|p| p.as_ref().len() != d) {
            return Err(SimilarityError::Dimension(d, bad.as_ref().len()));
        }
    }
    let sim = SimilarityMatrix::from_vectors(points)?;
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| sim.get(i, j) >= eps_sim).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next_label = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next_label);
        let mut frontier = vec![seed];
        while let Some(p) = frontier.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next_label);
                    frontier.push(q);
                }
            }
        }
        next_label += 1;
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbors[i].iter().find(|&&j| core[j]).and_then(|&j| labels[j]);
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<StrategyCluster>,
    /// Hashes of summaries that belong to no cluster, sorted.
    pub noise: Vec<String>,
}

/// Member maximizing mean similarity to its co-members; ties go to the
/// lexicographically smallest hash.
pub fn medoid<'a, T: Real>(members: &[&'a StrategySummary<T>]) -> Result<&'a StrategySummary<T>, SimilarityError> {
    let mut sorted: Vec<&StrategySummary<T>> = members.to_vec();
    sorted.sort_by(|a, b| a.commit_hash.cmp(&b.commit_hash));
    let vectors: Vec<&[T]> = sorted.iter().map(|s| s.embedding.as_slice()).collect();
    let sim = SimilarityMatrix::from_vectors(&vectors)?;
    let idx = sim.most_central().expect("medoid of an empty cluster");
    Ok(sorted[idx])
}

/// Clusters summaries and returns clusters ordered by size (descending),
/// then smallest member hash. Input order does not matter: summaries are
/// processed in commit-hash order.
pub fn cluster_summaries<T: Real>(
    summaries: &[StrategySummary<T>],
    eps_sim: T,
    min_pts: usize,
) -> Result<Clustering, SimilarityError> {
    let mut ordered: Vec<&StrategySummary<T>> = summaries.iter().collect();
    ordered.sort_by(|a, b| a.commit_hash.cmp(&b.commit_hash));
    let vectors: Vec<&[T]> = ordered.iter().map(|s| s.embedding.as_slice()).collect();
    let labels = dbscan(&vectors, eps_sim, min_pts)?;

    let mut groups: BTreeMap<usize, Vec<&StrategySummary<T>>> = BTreeMap::new();
    let mut noise = Vec::new();
    for (s, label) in ordered.iter().zip(&labels) {
        match label {
            Some(l) => groups.entry(*l).or_default().push(s),
            None => noise.push(s.commit_hash.clone()),
        }
    }

    let mut clusters = groups
        .into_values()
        .map(|members| {
            let m = medoid(&members)?;
            let member_hashes: Vec<String> = members.iter().map(|s| s.commit_hash.clone()).collect();
            Ok(StrategyCluster {
                cluster_id: String::new(),
                strategy_text: m.text.clone(),
                size: member_hashes.len(),
                medoid_hash: m.commit_hash.clone(),
                member_hashes,
            })
        })
        .collect::<Result<Vec<_>, SimilarityError>>()?;
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.member_hashes[0].cmp(&b.member_hashes[0])));
    for (i, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = format!("cluster-{i:04}");
    }
    Ok(Clustering { clusters, noise })
}

/// Drops clusters smaller than `min_cluster_size` and sets each survivor's
/// strategy text to the summary of its medoid.
pub fn prune_clusters<T: Real>(
    clusters: Vec<StrategyCluster>,
    summaries: &[StrategySummary<T>],
    min_cluster_size: usize,
) -> Result<Vec<StrategyCluster>, SimilarityError> {
    let by_hash: BTreeMap<&str, &StrategySummary<T>> =
        summaries.iter().map(|s| (s.commit_hash.as_str(), s)).collect();
    clusters
        .into_iter()
        .filter(|c| c.size >= min_cluster_size)
        .map(|mut c| {
            let members: Vec<&StrategySummary<T>> =
                c.member_hashes.iter().filter_map(|h| by_hash.get(h.as_str()).copied()).collect();
            if !members.is_empty() {
                let m = medoid(&members)?;
                c.strategy_text = m.text.clone();
                c.medoid_hash = m.commit_hash.clone();
            }
            Ok(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(hash: char, v: Vec<f64>) -> StrategySummary {
        StrategySummary {
            commit_hash: hash.to_string().repeat(40),
            text: format!("summary {hash}"),
            embedding: v,
            candidate_texts: vec![format!("summary {hash}")],
        }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![1.0f64, 2.0, 3.0]; 5];
        let labels = dbscan(&pts, 0.89, 2).unwrap();
        assert!(labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn orthogonal_points_are_noise() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert!(dbscan(&pts, 0.89, 2).unwrap().iter().all(Option::is_none));
    }

    #[test]
    fn border_point_joins_lowest_index_core_neighbor() {
        // cos(0.451) ~= 0.9: angular radius of the neighborhood
        let ang = |t: f64| vec![t.cos(), t.sin()];
        let mut pts: Vec<Vec<f64>> = [0.50, 0.48, 0.46, 0.44].iter().map(|&t| ang(t)).collect();
        pts.extend([-0.44, -0.46, -0.48, -0.50].iter().map(|&t| ang(t)));
        pts.push(ang(0.0));
        let labels = dbscan(&pts, 0.9, 4).unwrap();
        assert!(labels[..4].iter().all(|l| *l == Some(0)));
        assert!(labels[4..8].iter().all(|l| *l == Some(1)));
        // the middle point reaches index 3 and index 4 only; 3 is lower
        assert_eq!(labels[8], Some(0));
    }

    #[test]
    fn dimension_mismatch() {
        let pts = vec![vec![1.0f64, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(dbscan(&pts, 0.5, 2), Err(SimilarityError::Dimension(2, 3)));
    }

    #[test]
    fn clusters_sorted_and_pruned() {
        let s = vec![
            summary('a', vec![1.0, 0.0, 0.0]),
            summary('b', vec![0.99, 0.05, 0.0]),
            summary('c', vec![0.98, 0.0, 0.05]),
            summary('d', vec![0.0, 1.0, 0.0]),
            summary('e', vec![0.0, 0.99, 0.02]),
            summary('f', vec![0.0, 0.0, 1.0]),
        ];
        let out = cluster_summaries(&s, 0.89, 2).unwrap();
        assert_eq!(out.clusters.len(), 2);
        assert_eq!(out.clusters[0].size, 3);
        assert_eq!(out.clusters[0].cluster_id, "cluster-0000");
        assert_eq!(out.noise, vec!["f".repeat(40)]);
        let kept = prune_clusters(out.clusters.clone(), &s, 3).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(prune_clusters(out.clusters.clone(), &s, 1).unwrap(), out.clusters);
    }

    #[test]
    fn medoid_matches_brute_force() {
        // hand-built triple: b is closest to both others
        let s = vec![
            summary('a', vec![1.0, 0.0]),
            summary('b', vec![0.8, 0.6]),
            summary('c', vec![0.0, 1.0]),
        ];
        let refs: Vec<_> = s.iter().collect();
        let m = medoid(&refs).unwrap();
        // brute force: mean similarity of each member to the other two
        let dot = |x: &[f64], y: &[f64]| x[0] * y[0] + x[1] * y[1];
        let means: Vec<f64> = (0..3)
            .map(|i| (0..3).filter(|&j| j != i).map(|j| dot(&s[i].embedding, &s[j].embedding)).sum::<f64>() / 2.0)
            .collect();
        let best = (0..3).max_by(|&i, &j| means[i].partial_cmp(&means[j]).unwrap().then(j.cmp(&i))).unwrap();
        assert_eq!(m.commit_hash, s[best].commit_hash);
        assert_eq!(m.commit_hash, "b".repeat(40));
    }

    #[test]
    fn generic_over_f32() {
        let pts = vec![vec![1.0f32, 0.0], vec![0.99, 0.1], vec![0.0, 1.0]];
        let labels = dbscan(&pts, 0.89f32, 2).unwrap();
        assert_eq!(labels, vec![Some(0), Some(0), None]);
    }
}
