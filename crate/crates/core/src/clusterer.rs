//! Lane-line dots and their density clustering.
//!
//! Each maximal horizontal run of foreground pixels becomes one [`Dot`] at the
//! run centroid. Dots are clustered in image space with DBSCAN, then mapped to
//! the ground plane where the two clusters closest to the vehicle on either
//! side are taken as the ego-lane lines.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::imagekit::BinaryMask;
use crate::scalar::{count, lit, Real};
use crate::viewgeom::{pm, Homography, PixelPoint, TdvPoint};

pub const DEFAULT_EPS: f64 = 8.0;
pub const DEFAULT_MIN_PTS: usize = 5;
pub const DEFAULT_MIN_CLUSTER_DOTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("no lane-line cluster on the {0} side")]
    NoLaneFound(Side),
}

/// Centroid of a horizontal foreground run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dot<T> {
    pub x: T,
    pub y: usize,
    pub run_width: usize,
}

impl<T: Real> Dot<T> {
    pub fn pixel(&self) -> PixelPoint<T> {
        PixelPoint::new(self.x, count(self.y))
    }
}

/// One dot per maximal run per row, rows top to bottom, runs left to right.
pub fn extract_dots<T: Real>(mask: &BinaryMask) -> Vec<Dot<T>> {
    let mut dots = Vec::new();
    for y in 0..mask.height() {
        let row = mask.row(y);
        let mut x = 0;
        while x < row.len() {
            if row[x] == 0 {
                x += 1;
                continue;
            }
            let start = x;
            while x < row.len() && row[x] != 0 {
                x += 1;
            }
            let width = x - start;
            // centroid of start..=end is (start + end) / 2
            dots.push(Dot {
                x: count::<T>(start + x - 1) / lit(2.0),
                y,
                run_width: width,
            });
        }
    }
    dots
}

/// Per-dot cluster labels; `None` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl Clustering {
    /// Dot indices of each cluster, in cluster-id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Uniform grid over the plane with cell size `eps`.
struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn new(points: &[(f64, f64)], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets
                .entry(((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64))
                .or_default()
                .push(i);
        }
        Self { cell, buckets }
    }

    /// Indices within `eps` of `points[i]` (inclusive, self included), sorted.
    fn neighbors(&self, points: &[(f64, f64)], i: usize, eps: f64, checks: &mut u64) -> Vec<usize> {
        let p = points[i];
        let cx = (p.0 / self.cell).floor() as i64;
        let cy = (p.1 / self.cell).floor() as i64;
        let eps2 = eps * eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        *checks += 1;
                        let q = points[j];
                        let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
                        if d2 <= eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// DBSCAN with work accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbscanOutput {
    pub clustering: Clustering,
    /// Pairwise distance evaluations performed by region queries.
    pub distance_checks: u64,
}

/// Density clustering of dots by Euclidean distance on `(x, y)`.
///
/// A dot is a core point when at least `min_pts` dots (itself included) lie
/// within `eps`. Core points that are within `eps` of each other share a
/// cluster. A non-core dot within `eps` of some core point is a border point
/// and joins the cluster of its nearest core neighbour (lowest index on ties);
/// everything else is noise. Cluster ids follow the smallest core index.
pub fn dbscan<T: Real>(points: &[Dot<T>], eps: T, min_pts: usize) -> Clustering {
    dbscan_counted(points, eps, min_pts).clustering
}

pub fn dbscan_counted<T: Real>(points: &[Dot<T>], eps: T, min_pts: usize) -> DbscanOutput {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .map(|d| (crate::scalar::to_f64(d.x), d.y as f64))
        .collect();
    let eps = crate::scalar::to_f64(eps);
    let n = pts.len();
    let mut checks = 0u64;
    if n == 0 || !(eps > 0.0) {
        return DbscanOutput {
            clustering: Clustering {
                labels: vec![None; n],
                n_clusters: 0,
            },
            distance_checks: 0,
        };
    }
    let grid = GridIndex::new(&pts, eps);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| grid.neighbors(&pts, i, eps, &mut checks))
        .collect();
    let core: Vec<bool> = neighbors
        .iter()
        .map(|nb| nb.len() >= min_pts.max(1))
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(n_clusters);
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if core[j] && labels[j].is_none() {
                    labels[j] = Some(n_clusters);
                    queue.push_back(j);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .map(|&j| {
                let d2 = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
                (d2, j)
            })
            .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        labels[i] = nearest.and_then(|(_, j)| labels[j]);
    }
    DbscanOutput {
        clustering: Clustering { labels, n_clusters },
        distance_checks: checks,
    }
}

/// A cluster mapped onto the ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneCluster<T> {
    pub cluster_id: usize,
    pub dots: Vec<Dot<T>>,
    pub ground: Vec<TdvPoint<T>>,
    pub mean_v: T,
}

/// Nearest lane-line candidate on each side of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneSelection<T> {
    pub left: Option<LaneCluster<T>>,
    pub right: Option<LaneCluster<T>>,
}

impl<T> LaneSelection<T> {
    pub fn require_both(self) -> Result<(LaneCluster<T>, LaneCluster<T>), ClusterError> {
        match (self.left, self.right) {
            (Some(l), Some(r)) => Ok((l, r)),
            (None, _) => Err(ClusterError::NoLaneFound(Side::Left)),
            (_, None) => Err(ClusterError::NoLaneFound(Side::Right)),
        }
    }
}

/// Maps every sufficiently large cluster to the ground plane and picks, per
/// side, the one with the smallest `|mean v|`. Dots that fall on or beyond
/// the horizon, or behind the camera, are dropped.
pub fn rank_lane_clusters<T: Real>(
    clustering: &Clustering,
    dots: &[Dot<T>],
    h: &Homography<T>,
    min_cluster_dots: usize,
) -> LaneSelection<T> {
    let mut left: Option<LaneCluster<T>> = None;
    let mut right: Option<LaneCluster<T>> = None;
    for (id, members) in clustering.members().into_iter().enumerate() {
        if members.len() < min_cluster_dots {
            continue;
        }
        let mut kept = Vec::with_capacity(members.len());
        let mut ground = Vec::with_capacity(members.len());
        for &i in &members {
            if let Ok(g) = pm(h, dots[i].pixel()) {
                if g.u > T::zero() && g.u.is_finite() && g.v.is_finite() {
                    kept.push(dots[i]);
                    ground.push(g);
                }
            }
        }
        if ground.is_empty() {
            continue;
        }
        let mean_v = ground.iter().map(|g| g.v).sum::<T>() / count(ground.len());
        let cand = LaneCluster {
            cluster_id: id,
            dots: kept,
            ground,
            mean_v,
        };
        let slot = if mean_v > T::zero() {
            &mut left
        } else if mean_v < T::zero() {
            &mut right
        } else {
            continue;
        };
        if slot
            .as_ref()
            .is_none_or(|cur| mean_v.abs() < cur.mean_v.abs())
        {
            *slot = Some(cand);
        }
    }
    LaneSelection { left, right }
}

/// Like [`rank_lane_clusters`] but requires a line on both sides.
pub fn select_lane_clusters<T: Real>(
    clustering: &Clustering,
    dots: &[Dot<T>],
    h: &Homography<T>,
    min_cluster_dots: usize,
) -> Result<(LaneCluster<T>, LaneCluster<T>), ClusterError> {
    rank_lane_clusters(clustering, dots, h, min_cluster_dots).require_both()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(x: f64, y: usize) -> Dot<f64> {
        Dot { x, y, run_width: 1 }
    }

    #[test]
    fn dots_from_runs() {
        let mut m = BinaryMask::zeros(640, 480);
        m.set(100, 200, true);
        assert_eq!(extract_dots::<f64>(&m), vec![dot(100.0, 200)]);

        let mut m = BinaryMask::zeros(640, 480);
        for x in 10..=14 {
            m.set(x, 50, true);
        }
        assert_eq!(
            extract_dots::<f64>(&m),
            vec![Dot {
                x: 12.0,
                y: 50,
                run_width: 5
            }]
        );
        assert!(extract_dots::<f64>(&BinaryMask::zeros(640, 480)).is_empty());
    }

    #[test]
    fn runs_touching_image_edges() {
        let mut m = BinaryMask::zeros(6, 1);
        for x in [0, 1, 4, 5] {
            m.set(x, 0, true);
        }
        let d = extract_dots::<f64>(&m);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].x, d[0].run_width), (0.5, 2));
        assert_eq!((d[1].x, d[1].run_width), (4.5, 2));
    }

    #[test]
    fn two_separated_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(dot(100.0 + (i % 3) as f64, 100 + i / 3));
            pts.push(dot(200.0 + (i % 3) as f64, 100 + i / 3));
        }
        let c = dbscan(&pts, 8.0, 5);
        assert_eq!(c.n_clusters, 2);
        assert_eq!(c.noise_count(), 0);
    }

    #[test]
    fn sparse_points_are_noise() {
        let pts = vec![dot(0.0, 0), dot(3.0, 0), dot(6.0, 0)];
        let c = dbscan(&pts, 8.0, 5);
        assert_eq!(c.n_clusters, 0);
        assert_eq!(c.noise_count(), 3);
    }

    #[test]
    fn vertical_chain_is_one_cluster() {
        let pts: Vec<_> = (0..20).map(|i| dot(50.0, 4 * i)).collect();
        let c = dbscan(&pts, 8.0, 5);
        assert_eq!(c.n_clusters, 1);
        assert_eq!(c.noise_count(), 0);
    }

    #[test]
    fn border_point_joins_nearest_core() {
        // two dense columns at x=0 and x=10; a border dot at x=4 is closer to
        // the left column's core dots
        let mut pts: Vec<_> = (0..5).map(|i| dot(0.0, i)).collect();
        pts.extend((0..5).map(|i| dot(10.0, i)));
        pts.push(dot(4.0, 100));
        pts.push(dot(4.0, 2));
        let c = dbscan(&pts, 4.5, 5);
        assert_eq!(c.n_clusters, 2);
        assert_eq!(c.labels[11], c.labels[0]);
        assert_eq!(c.labels[10], None);
    }

    /// Pixel (x, y) maps to ground (u, v) = (y / 10, (320 - x) / 100).
    fn test_homography() -> Homography<f64> {
        Homography::from_matrix([[0.0, 0.1, 0.0], [-0.01, 0.0, 3.2], [0.0, 0.0, 1.0]]).unwrap()
    }

    fn cluster_at_v(v: f64, first_id: usize, n: usize) -> (Vec<Dot<f64>>, Vec<Option<usize>>) {
        let x = 320.0 - 100.0 * v;
        let dots = (0..n).map(|i| dot(x, 100 + i)).collect();
        (dots, vec![Some(first_id); n])
    }

    fn build(vs: &[f64]) -> (Clustering, Vec<Dot<f64>>) {
        let mut dots = Vec::new();
        let mut labels = Vec::new();
        for (id, &v) in vs.iter().enumerate() {
            let (d, l) = cluster_at_v(v, id, 15);
            dots.extend(d);
            labels.extend(l);
        }
        (
            Clustering {
                labels,
                n_clusters: vs.len(),
            },
            dots,
        )
    }

    #[test]
    fn one_candidate_per_side() {
        let (c, dots) = build(&[1.8, -1.7]);
        let (l, r) = select_lane_clusters(&c, &dots, &test_homography(), 12).unwrap();
        assert_eq!((l.cluster_id, r.cluster_id), (0, 1));
        assert!((l.mean_v - 1.8).abs() < 1e-9);
        assert!((r.mean_v + 1.7).abs() < 1e-9);
    }

    #[test]
    fn nearest_cluster_wins() {
        let (c, dots) = build(&[5.3, 1.8, -1.7]);
        let (l, r) = select_lane_clusters(&c, &dots, &test_homography(), 12).unwrap();
        assert_eq!(l.cluster_id, 1);
        assert_eq!(r.cluster_id, 2);
    }

    #[test]
    fn missing_side_reported() {
        let (c, dots) = build(&[1.8]);
        assert_eq!(
            select_lane_clusters(&c, &dots, &test_homography(), 12),
            Err(ClusterError::NoLaneFound(Side::Right))
        );
        let sel = rank_lane_clusters(&c, &dots, &test_homography(), 12);
        assert!(sel.left.is_some() && sel.right.is_none());
    }

    #[test]
    fn small_clusters_discarded() {
        let (c, dots) = build(&[1.8, -1.7]);
        let sel = rank_lane_clusters(&c, &dots, &test_homography(), 16);
        assert!(sel.left.is_none() && sel.right.is_none());
    }
}
