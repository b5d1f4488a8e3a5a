use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom3::Point3;
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Knn,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub mode: GraphMode,
    pub k: usize,
    /// Ball radius, used in ball mode only.
    pub radius: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mode: GraphMode::Knn,
            k: 20,
            radius: 0.2,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("graph k must be >= 1"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(invalid("graph radius must be > 0"));
        }
        Ok(())
    }
}

/// `N x k` neighbour indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    idx: Vec<usize>,
}

impl NeighborTable {
    pub fn from_rows(k: usize, idx: Vec<usize>) -> Result<Self> {
        if k == 0 || !idx.len().is_multiple_of(k) {
            return Err(invalid("neighbour table length is not a multiple of k"));
        }
        Ok(Self { k, idx })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
fn dist_sq(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn knn_row(points: &[Point3], i: usize, k: usize, scratch: &mut Vec<(f64, usize)>, out: &mut Vec<usize>) {
    scratch.clear();
    scratch.extend(
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, p)| (dist_sq(&points[i], p), j)),
    );
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    out.extend(scratch.iter().map(|&(_, j)| j));
}

/// k-nearest (self excluded, ties to the lower index) or random ball neighbours.
///
/// Ball mode draws `k` indices uniformly with replacement from the points
/// within `radius` and falls back to the k nearest when the ball is empty.
pub fn build_graph(points: &[Point3], cfg: &GraphConfig, rng: &mut RandomStream) -> Result<NeighborTable> {
    cfg.validate()?;
    let n = points.len();
    if n <= 1 {
        return Err(invalid(format!("graph needs at least 2 points, got {n}")));
    }
    let k = cfg.k;
    let mut idx = Vec::with_capacity(n * k);
    let mut scratch = Vec::with_capacity(n);
    match cfg.mode {
        GraphMode::Knn => {
            if n <= k {
                return Err(invalid(format!("knn with k = {k} needs more than {k} points, got {n}")));
            }
            for i in 0..n {
                knn_row(points, i, k, &mut scratch, &mut idx);
            }
        }
        GraphMode::Ball => {
            let r2 = cfg.radius * cfg.radius;
            let mut ball = Vec::with_capacity(n);
            for i in 0..n {
                ball.clear();
                ball.extend((0..n).filter(|&j| j != i && dist_sq(&points[i], &points[j]) <= r2));
                if ball.is_empty() {
                    if n <= k {
                        return Err(invalid("empty ball and too few points for knn fallback"));
                    }
                    knn_row(points, i, k, &mut scratch, &mut idx);
                } else {
                    for _ in 0..k {
                        idx.push(ball[rng.below(ball.len())]);
                    }
                }
            }
        }
    }
    Ok(NeighborTable { k, idx })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn knn(k: usize) -> GraphConfig {
        GraphConfig {
            mode: GraphMode::Knn,
            k,
            radius: 0.2,
        }
    }

    #[test]
    fn collinear_tie_break() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let g = build_graph(&pts, &knn(1), &mut RandomStream::new(0)).unwrap();
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn square_edges() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let g = build_graph(&pts, &knn(2), &mut RandomStream::new(0)).unwrap();
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1, 3]);
        assert_eq!(g.neighbors(3), &[0, 2]);
    }

    #[test]
    fn errors() {
        let one = [[0.0; 3]];
        assert!(build_graph(&one, &knn(1), &mut RandomStream::new(0)).is_err());
        let three = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(build_graph(&three, &knn(3), &mut RandomStream::new(0)).is_err());
        assert!(build_graph(&three, &knn(0), &mut RandomStream::new(0)).is_err());
    }

    #[test]
    fn ball_mode_is_seeded_and_local() {
        let mut rng = RandomStream::new(1);
        let pts: Vec<Point3> = (0..200)
            .map(|_| [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5])
            .collect();
        let cfg = GraphConfig {
            mode: GraphMode::Ball,
            k: 8,
            radius: 0.2,
        };
        let a = build_graph(&pts, &cfg, &mut RandomStream::new(5)).unwrap();
        let b = build_graph(&pts, &cfg, &mut RandomStream::new(5)).unwrap();
        assert_eq!(a, b);
        for i in 0..pts.len() {
            let within = a.neighbors(i).iter().all(|&j| dist_sq(&pts[i], &pts[j]) <= 0.04);
            let fallback = (0..pts.len()).all(|j| j == i || dist_sq(&pts[i], &pts[j]) > 0.04);
            assert!(within || fallback);
            assert!(!a.neighbors(i).contains(&i));
        }
        let c = build_graph(&pts, &cfg, &mut RandomStream::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ball_falls_back_to_knn_for_isolated_points() {
        let pts = [[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let cfg = GraphConfig {
            mode: GraphMode::Ball,
            k: 1,
            radius: 0.2,
        };
        let g = build_graph(&pts, &cfg, &mut RandomStream::new(0)).unwrap();
        assert_eq!(g.neighbors(2), &[1]);
        assert_eq!(g.neighbors(0), &[1]);
    }
}
