//! Anchor shapes: k-means over box extents and the EMA update between rounds.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box3};
use crate::scalar::Scalar;

pub type Shape<T> = [T; 3];

pub const DEFAULT_ANCHORS: usize = 3;

/// Momenta of the three exponential moving averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub alpha_mu: f64,
    pub alpha_h: f64,
    pub beta: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha_mu: 0.9,
            alpha_h: 0.9,
            beta: 0.9,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_mu", self.alpha_mu),
            ("alpha_h", self.alpha_h),
            ("beta", self.beta),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}
const MAX_LLOYD_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct AnchorSet<T> {
    /// Anchor extents in voxels, volume ascending.
    pub shapes: Vec<Shape<T>>,
    /// Number of EMA updates applied.
    pub round: usize,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn new(mut shapes: Vec<Shape<T>>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::AnchorCountMismatch {
                expected: 1,
                got: 0,
            });
        }
        if let Some(s) = shapes.iter().find(|s| s.iter().any(|&v| !(v > T::zero()))) {
            return Err(Error::InvalidBox(format!("anchor shape {s:?}")));
        }
        canonical_order(&mut shapes);
        Ok(Self { shapes, round: 0 })
    }

    pub fn k(&self) -> usize {
        self.shapes.len()
    }
}

fn shape_volume<T: Scalar>(s: &Shape<T>) -> T {
    s[0] * s[1] * s[2]
}

fn shape_cmp<T: Scalar>(a: &Shape<T>, b: &Shape<T>) -> Ordering {
    shape_volume(a)
        .partial_cmp(&shape_volume(b))
        .unwrap_or(Ordering::Equal)
        .then_with(|| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Sorts shapes by volume, ties broken lexicographically.
pub fn canonical_order<T: Scalar>(shapes: &mut [Shape<T>]) {
    shapes.sort_by(shape_cmp);
}

fn sq_dist<T: Scalar>(a: &Shape<T>, b: &Shape<T>) -> T {
    (0..3).fold(T::zero(), |acc, i| {
        let d = a[i] - b[i];
        acc + d * d
    })
}

#[derive(Debug, Clone)]
pub struct KMeansFit<T> {
    /// Centroids in canonical (volume ascending) order.
    pub centroids: Vec<Shape<T>>,
    /// Cluster of each input point, indexing `centroids`.
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances after each Lloyd step.
    pub inertia: Vec<T>,
}

/// Lloyd's k-means on raw `(w, h, d)` voxel extents with k-means++ seeding.
pub fn kmeans_shapes<T: Scalar>(boxes: &[Box3<T>], k: usize, seed: u64) -> Result<Vec<Shape<T>>> {
    let points: Vec<Shape<T>> = boxes.iter().map(|b| b.shape()).collect();
    Ok(kmeans_points(&points, k, seed)?.centroids)
}

pub fn kmeans_points<T: Scalar>(points: &[Shape<T>], k: usize, seed: u64) -> Result<KMeansFit<T>> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewBoxes {
            k,
            got: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut inertia = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids).0;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        repair_empty(points, &mut centroids, &mut assignment);
        centroids = cluster_means(points, &assignment, k);
        inertia.push(objective(points, &centroids, &assignment));
        if !changed {
            break;
        }
    }

    // canonical order, remapping assignments to match
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| shape_cmp(&centroids[a], &centroids[b]));
    let mut idx = vec![0; k];
    for (new, &old) in perm.iter().enumerate() {
        idx[old] = new;
    }
    let sorted = perm.iter().map(|&old| centroids[old]).collect();
    let assignment = assignment.into_iter().map(|a| idx[a]).collect();
    Ok(KMeansFit {
        centroids: sorted,
        assignment,
        inertia,
    })
}

fn plus_plus_init<T: Scalar>(points: &[Shape<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Shape<T>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest(p, &centroids).1.to_real().max(0.0))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut x = rng.gen::<f64>() * total;
            weights
                .iter()
                .position(|&w| {
                    x -= w;
                    x < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick]);
    }
    centroids
}

fn nearest<T: Scalar>(p: &Shape<T>, centroids: &[Shape<T>]) -> (usize, T) {
    let mut best = (0, sq_dist(p, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty<T: Scalar>(points: &[Shape<T>], centroids: &mut [Shape<T>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(&points[i], &centroids[assignment[i]]);
                let dj = sq_dist(&points[j], &centroids[assignment[j]]);
                di.partial_cmp(&dj)
                    .unwrap_or(Ordering::Equal)
                    .then(j.cmp(&i))
            });
        let Some(far) = far else { return };
        assignment[far] = empty;
        centroids[empty] = points[far];
    }
}

fn cluster_means<T: Scalar>(points: &[Shape<T>], assignment: &[usize], k: usize) -> Vec<Shape<T>> {
    let mut sums = vec![[T::zero(); 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        for ax in 0..3 {
            sums[a][ax] = sums[a][ax] + p[ax];
        }
        counts[a] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            let n = T::from_count(n.max(1));
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect()
}

pub fn objective<T: Scalar>(points: &[Shape<T>], centroids: &[Shape<T>], assignment: &[usize]) -> T {
    points
        .iter()
        .zip(assignment)
        .fold(T::zero(), |acc, (p, &a)| acc + sq_dist(p, &centroids[a]))
}

/// `s_k <- (1 - beta) * s_k + beta * new_k`, pairing both sets in canonical
/// volume order.
pub fn ema_update_anchors<T: Scalar>(
    prev: &AnchorSet<T>,
    new_centroids: &[Shape<T>],
    beta: T,
) -> Result<AnchorSet<T>> {
    if new_centroids.len() != prev.k() {
        return Err(Error::AnchorCountMismatch {
            expected: prev.k(),
            got: new_centroids.len(),
        });
    }
    let mut fresh = new_centroids.to_vec();
    canonical_order(&mut fresh);
    let keep = T::one() - beta;
    let shapes = prev
        .shapes
        .iter()
        .zip(&fresh)
        .map(|(p, n)| {
            [
                keep * p[0] + beta * n[0],
                keep * p[1] + beta * n[1],
                keep * p[2] + beta * n[2],
            ]
        })
        .collect();
    Ok(AnchorSet {
        shapes,
        round: prev.round + 1,
    })
}

/// Best IoU between a lesion-shaped box and any anchor-shaped box, both
/// centred at the origin.
pub fn anchor_coverage<T: Scalar>(lesion: &Shape<T>, anchors: &AnchorSet<T>) -> T {
    let Ok(l) = Box3::centered(*lesion) else {
        return T::zero();
    };
    anchors
        .shapes
        .iter()
        .filter_map(|a| Box3::centered(*a).ok())
        .fold(T::zero(), |best, a| best.max_of(iou(&l, &a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_rational::Rational64;

    fn cube(s: f64) -> Box3<f64> {
        Box3::new([0.0; 3], [s; 3]).unwrap()
    }

    #[test]
    fn single_cluster_is_mean() {
        let boxes = [
            Box3::new([0.0; 3], [1.0, 2.0, 3.0]).unwrap(),
            Box3::new([5.0; 3], [3.0, 4.0, 5.0]).unwrap(),
        ];
        assert_eq!(kmeans_shapes(&boxes, 1, 0).unwrap(), vec![[2.0, 3.0, 4.0]]);
    }

    #[test]
    fn k_equals_n_recovers_points() {
        let boxes = [cube(4.0), cube(1.0), cube(9.0)];
        assert_eq!(
            kmeans_shapes(&boxes, 3, 11).unwrap(),
            vec![[1.0; 3], [4.0; 3], [9.0; 3]]
        );
    }

    #[test]
    fn too_few_boxes() {
        assert!(matches!(
            kmeans_shapes(&[cube(1.0)], 2, 0),
            Err(Error::TooFewBoxes { k: 2, got: 1 })
        ));
    }

    #[test]
    fn ema_worked_example() {
        let prev = AnchorSet::new(vec![[10.0; 3]]).unwrap();
        let next = ema_update_anchors(&prev, &[[2.0; 3]], 0.9).unwrap();
        for v in next.shapes[0] {
            assert_relative_eq!(v, 2.8, epsilon = 1e-12);
        }
        assert_eq!(next.round, 1);
        let same = ema_update_anchors(&prev, &prev.shapes, 0.9).unwrap();
        assert_eq!(same.shapes, prev.shapes);
        assert!(ema_update_anchors(&prev, &[[1.0; 3], [2.0; 3]], 0.9).is_err());
    }

    #[test]
    fn ema_gap_shrinks_by_one_minus_beta() {
        let mut a = AnchorSet::new(vec![[10.0; 3]]).unwrap();
        for r in 1..=6 {
            a = ema_update_anchors(&a, &[[2.0; 3]], 0.9).unwrap();
            assert_relative_eq!(a.shapes[0][0] - 2.0, 8.0 * 0.1f64.powi(r), max_relative = 1e-9);
        }
    }

    #[test]
    fn coverage_cases() {
        let a = AnchorSet::new(vec![[10.0; 3]]).unwrap();
        assert_relative_eq!(anchor_coverage(&[1.0; 3], &a), 1e-3, epsilon = 1e-15);
        let a = AnchorSet::new(vec![[10.0; 3], [1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(anchor_coverage(&[1.0, 2.0, 3.0], &a), 1.0);

        let r = Rational64::from_integer;
        let a = AnchorSet::new(vec![[r(10), r(10), r(10)]]).unwrap();
        assert_eq!(anchor_coverage(&[r(1), r(1), r(1)], &a), Rational64::new(1, 1000));
    }
}
