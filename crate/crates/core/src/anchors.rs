//! Trajectory anchors from K-Means over ground-truth trajectories.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenario::Pose;

pub const ANCHOR_SCHEMA: &str = "anchorplan-anchors/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_sha256: String,
    pub seed: u64,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBank {
    pub schema: String,
    pub modes: usize,
    pub horizon: usize,
    /// `modes x horizon` waypoints, most populated cluster first.
    pub anchors: Vec<Vec<Pose>>,
    pub cluster_sizes: Vec<usize>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTrace {
    /// Objective after each assign/update iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// Final member assignment (indices into the sorted anchors).
    pub assignment: Vec<usize>,
}

/// SHA-256 over the little-endian bits of every `(x, y, heading)`.
pub fn trajectory_hash(trajs: &[Vec<Pose>]) -> String {
    let mut h = Sha256::new();
    for t in trajs {
        h.update((t.len() as u64).to_le_bytes());
        for p in t {
            for v in p.to_array() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten_xy(t: &[Pose]) -> Vec<f64> {
    t.iter().flat_map(|p| [p.x_m, p.y_m]).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row (lowest index on ties) and its squared distance.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).unwrap())
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn circular_mean(angles: &[f64]) -> f64 {
    if angles.iter().all(|a| *a == angles[0]) {
        return angles[0];
    }
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    s.atan2(c)
}

/// Lloyd's algorithm with k-means++ seeding on flattened `(x, y)` waypoints.
pub fn cluster_anchors(
    trajs: &[Vec<Pose>],
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(AnchorBank, ClusterTrace)> {
    if trajs.is_empty() {
        return Err(Error::invalid("no trajectories to cluster"));
    }
    if m == 0 || trajs.len() < m {
        return Err(Error::invalid(format!(
            "cannot form {m} clusters from {} trajectories",
            trajs.len()
        )));
    }
    let horizon = trajs[0].len();
    if horizon == 0 || trajs.iter().any(|t| t.len() != horizon) {
        return Err(Error::shape("trajectories must share a non-zero horizon"));
    }
    let points: Vec<Vec<f64>> = trajs.iter().map(|t| flatten_xy(t)).collect();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trajectory coordinates".into()));
    }
    let n = points.len();
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&points, m, &mut rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut history = Vec::new();
    let mut converged = false;

    for iter in 0..max_iters.max(1) {
        if iter > 0 {
            let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
            if next == assign {
                converged = true;
                break;
            }
            assign = next;
        }
        // sums of offsets from each cluster's first member keep identical members exact
        let mut base: Vec<Option<usize>> = vec![None; m];
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (i, (p, &a)) in points.iter().zip(&assign).enumerate() {
            counts[a] += 1;
            let b = *base[a].get_or_insert(i);
            for ((s, v), v0) in sums[a].iter_mut().zip(p).zip(&points[b]) {
                *s += v - v0;
            }
        }
        let mut reseeded = vec![false; n];
        for j in 0..m {
            if counts[j] > 0 {
                let b = &points[base[j].unwrap()];
                centroids[j] = sums[j]
                    .iter()
                    .zip(b)
                    .map(|(s, v0)| v0 + s / counts[j] as f64)
                    .collect();
            } else {
                // empty cluster: move it onto the worst-served point
                let far = (0..n)
                    .filter(|&i| !reseeded[i])
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assign[a]]);
                        let db = sq_dist(&points[b], &centroids[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                reseeded[far] = true;
                centroids[j] = points[far].clone();
            }
        }
        let obj = objective(&points, &centroids, &assign);
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            assert!(
                obj <= prev + 1e-9 * prev.abs().max(1.0),
                "k-means objective increased from {prev} to {obj}"
            );
        }
        history.push(obj);
    }
    if !converged {
        // Final check: the last update may already be a fixed point.
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        converged = next == assign;
    }

    let mut counts = vec![0usize; m];
    for &a in &assign {
        counts[a] += 1;
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0; m];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }

    let anchors: Vec<Vec<Pose>> = order
        .iter()
        .map(|&j| {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            (0..horizon)
                .map(|k| {
                    let heading = if members.is_empty() {
                        let src = trajs
                            .iter()
                            .position(|t| flatten_xy(t) == centroids[j])
                            .unwrap_or(0);
                        trajs[src][k].heading_rad
                    } else {
                        let hs: Vec<f64> =
                            members.iter().map(|&i| trajs[i][k].heading_rad).collect();
                        circular_mean(&hs)
                    };
                    Pose::new(centroids[j][2 * k], centroids[j][2 * k + 1], heading)
                })
                .collect()
        })
        .collect();
    let bank = AnchorBank {
        schema: ANCHOR_SCHEMA.to_string(),
        modes: m,
        horizon,
        anchors,
        cluster_sizes: order.iter().map(|&j| counts[j]).collect(),
        provenance: Provenance {
            corpus_sha256: trajectory_hash(trajs),
            seed,
            iterations: history.len(),
            objective: *history.last().unwrap(),
        },
    };
    let trace = ClusterTrace {
        objective: history,
        converged,
        assignment: assign.iter().map(|&a| rank[a]).collect(),
    };
    Ok((bank, trace))
}

impl AnchorBank {
    pub fn validate(&self) -> Result<()> {
        if self.schema != ANCHOR_SCHEMA {
            return Err(Error::Schema(format!(
                "unexpected anchor schema {}",
                self.schema
            )));
        }
        if self.modes == 0 || self.anchors.len() != self.modes {
            return Err(Error::Schema("anchor count does not match modes".into()));
        }
        if self.anchors.iter().any(|a| a.len() != self.horizon) {
            return Err(Error::Schema("anchor length does not match horizon".into()));
        }
        Ok(())
    }

    /// Anchor closest to `gt` in summed squared `(x, y)` distance; lowest index on ties.
    pub fn nearest(&self, gt: &[Pose]) -> Result<usize> {
        if gt.len() != self.horizon {
            return Err(Error::shape(format!(
                "trajectory has {} waypoints, anchors {}",
                gt.len(),
                self.horizon
            )));
        }
        let x = flatten_xy(gt);
        let flat: Vec<Vec<f64>> = self.anchors.iter().map(|a| flatten_xy(a)).collect();
        Ok(nearest(&flat, &x).0)
    }

    /// Waypoints as `[modes, horizon * 3]`, negative zeros normalized.
    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.anchors
            .iter()
            .map(|a| {
                a.iter()
                    .flat_map(|p| p.to_array())
                    .map(|v| v + 0.0)
                    .collect()
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: AnchorBank = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        bank.validate()?;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(dx: f64, dy: f64, t: usize) -> Vec<Pose> {
        (1..=t)
            .map(|k| Pose::new(dx * k as f64, dy * k as f64, dy.atan2(dx)))
            .collect()
    }

    #[test]
    fn identical_inputs_single_mode() {
        let trajs = vec![line(1.0, 0.2, 4); 7];
        let (bank, trace) = cluster_anchors(&trajs, 1, 3, 50).unwrap();
        assert_eq!(bank.anchors[0], trajs[0]);
        assert_eq!(trace.objective.last().copied(), Some(0.0));
    }

    #[test]
    fn m_equals_n_reproduces_inputs() {
        let trajs: Vec<_> = (0..6)
            .map(|i| line(1.0 + i as f64 * 0.3, 0.1 * i as f64, 4))
            .collect();
        let (bank, trace) = cluster_anchors(&trajs, 6, 9, 50).unwrap();
        assert_eq!(bank.provenance.objective, 0.0);
        assert!(trace.converged);
        for a in &bank.anchors {
            assert!(trajs.contains(a));
        }
    }

    #[test]
    fn two_groups_recover_group_means() {
        let trajs = vec![
            line(1.0, 0.0, 3),
            line(1.2, 0.0, 3),
            line(1.1, 0.1, 3),
            line(0.0, 2.0, 3),
            line(0.1, 2.1, 3),
            line(0.0, 1.9, 3),
        ];
        // exhaustive oracle: the optimal 2-partition is {0,1,2} / {3,4,5}
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..63 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<_> = (0..6).filter(|i| (mask >> i & 1 == 1) == side).collect();
                let flat: Vec<_> = members.iter().map(|&i| flatten_xy(&trajs[i])).collect();
                let mean: Vec<f64> = (0..6)
                    .map(|d| flat.iter().map(|f| f[d]).sum::<f64>() / flat.len() as f64)
                    .collect();
                cost += flat.iter().map(|f| sq_dist(f, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        assert!(best.1 == 0b000111 || best.1 == 0b111000);
        let (bank, _) = cluster_anchors(&trajs, 2, 0, 50).unwrap();
        let mean = |idx: [usize; 3], k: usize, c: usize| {
            idx.iter().map(|&i| trajs[i][k].to_array()[c]).sum::<f64>() / 3.0
        };
        let mut got: Vec<_> = bank.anchors.iter().map(|a| a[2].x_m).collect();
        got.sort_by(f64::total_cmp);
        let mut want = vec![mean([0, 1, 2], 2, 0), mean([3, 4, 5], 2, 0)];
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((bank.provenance.objective - best.0).abs() < 1e-12);
    }

    #[test]
    fn errors_and_tie_break() {
        assert!(cluster_anchors(&[], 1, 0, 10).is_err());
        assert!(cluster_anchors(&[line(1.0, 0.0, 2)], 2, 0, 10).is_err());
        let trajs = vec![line(1.0, 1.0, 2), line(1.0, -1.0, 2), line(3.0, 0.0, 2)];
        let (bank, _) = cluster_anchors(&trajs, 3, 0, 10).unwrap();
        let probe = line(1.0, 0.0, 2);
        let i = bank.nearest(&probe).unwrap();
        let d: Vec<f64> = bank
            .anchors
            .iter()
            .map(|a| sq_dist(&flatten_xy(a), &flatten_xy(&probe)))
            .collect();
        let first_min = d
            .iter()
            .position(|v| *v == d.iter().copied().fold(f64::INFINITY, f64::min))
            .unwrap();
        assert_eq!(i, first_min);
        assert!(bank.nearest(&line(1.0, 0.0, 3)).is_err());
    }

    #[test]
    fn anchors_sorted_by_popularity() {
        let mut trajs = vec![line(1.0, 0.0, 3); 5];
        trajs.extend(vec![line(0.0, 1.0, 3); 2]);
        let (bank, trace) = cluster_anchors(&trajs, 2, 4, 20).unwrap();
        assert_eq!(bank.cluster_sizes, vec![5, 2]);
        assert_eq!(bank.anchors[0], trajs[0]);
        assert_eq!(trace.assignment, vec![0, 0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn circular_mean_wraps() {
        let m = circular_mean(&[3.1, -3.1]);
        assert!((m.abs() - std::f64::consts::PI).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn objective_monotone_and_means_at_convergence(seed in 0u64..1000, n in 6usize..40, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let trajs: Vec<Vec<Pose>> = (0..n)
                .map(|_| line(rng.gen_range(-1.0..3.0), rng.gen_range(-2.0..2.0), 4))
                .collect();
            let (bank, trace) = cluster_anchors(&trajs, m.min(n), seed, 200).unwrap();
            for w in trace.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
            if trace.converged {
                for (j, a) in bank.anchors.iter().enumerate() {
                    let members: Vec<_> = (0..n).filter(|&i| trace.assignment[i] == j).collect();
                    if members.is_empty() { continue; }
                    for k in 0..4 {
                        let mx = members.iter().map(|&i| trajs[i][k].x_m).sum::<f64>() / members.len() as f64;
                        prop_assert!((a[k].x_m - mx).abs() < 1e-9);
                    }
                }
            }
            let (again, _) = cluster_anchors(&trajs, m.min(n), seed, 200).unwrap();
            prop_assert_eq!(bank, again);
        }
    }
}
