//! Adjacency construction over signature points.
//!
//! Two complementary structures: a step graph linking temporally close points
//! within the same stroke, and a nearest-neighbor graph linking spatially
//! close points regardless of stroke. Both carry a guaranteed self-loop so
//! every attention neighborhood is non-empty.

use ndarray::Array2;

use crate::error::Result;
use crate::signal::stroke_spans;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    KStep,
    KNearest,
}

/// Binary structure matrix plus the initial edge weights derived from it.
///
/// The structure is persistent: attention layers re-weight edges but never
/// add or remove them, so entries outside `structure` stay zero at every
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub kind: GraphKind,
    /// L x L, entries in {0, 1}.
    pub structure: Array2<f64>,
    /// L x L, layer-0 edge weights; initialized equal to `structure`.
    pub weights: Array2<f64>,
    /// Row-wise neighbor index lists (ascending, self included).
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    fn from_structure(kind: GraphKind, structure: Array2<f64>) -> Self {
        let n = structure.nrows();
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| structure[[i, j]] != 0.0).collect())
            .collect();
        Adjacency {
            kind,
            weights: structure.clone(),
            structure,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.structure.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Out-degree excluding the self-loop.
    pub fn out_degree(&self, i: usize) -> usize {
        self.neighbors[i].iter().filter(|&&j| j != i).count()
    }
}

/// Connects points of the same stroke whose index distance is at most `k`.
///
/// Self-loops are implied by the zero distance case. No edge ever crosses a
/// stroke boundary. The result is symmetric.
pub fn build_kstep(flags: &[u8], k: usize) -> Result<Adjacency> {
    assert!(k >= 1, "k must be at least 1");
    let spans = stroke_spans(flags)?;
    let n = flags.len();
    let mut structure = Array2::zeros((n, n));
    for &(s, e) in &spans {
        for i in s..=e {
            let lo = i.saturating_sub(k).max(s);
            let hi = (i + k).min(e);
            for j in lo..=hi {
                structure[[i, j]] = 1.0;
            }
        }
    }
    Ok(Adjacency::from_structure(GraphKind::KStep, structure))
}

/// Connects each point to its `k` spatially nearest points by Euclidean
/// distance over (x, y), plus a mandatory self-loop.
///
/// The relation is directed; distance ties break toward the lower index.
/// With `k >= L-1` every non-self edge exists.
pub fn build_knn(coords: &Array2<f64>, k: usize) -> Adjacency {
    build_knn_with(coords, k, false)
}

/// Nearest-neighbor construction with optional symmetrization
/// (`e[i][j] = e[i][j] OR e[j][i]`).
pub fn build_knn_with(coords: &Array2<f64>, k: usize, symmetrize: bool) -> Adjacency {
    assert!(k >= 1, "k must be at least 1");
    assert_eq!(coords.ncols(), 2, "coords must be L x 2");
    let n = coords.nrows();
    let mut structure = Array2::zeros((n, n));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        structure[[i, i]] = 1.0;
        order.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let dx = coords[[i, 0]] - coords[[j, 0]];
            let dy = coords[[i, 1]] - coords[[j, 1]];
            // Squared distance keeps the comparison exact; ties fall back to
            // the index for determinism.
            order.push((dx * dx + dy * dy, j));
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in order.iter().take(k.min(n.saturating_sub(1))) {
            structure[[i, j]] = 1.0;
        }
    }
    if symmetrize {
        for i in 0..n {
            for j in i + 1..n {
                if structure[[i, j]] != 0.0 || structure[[j, i]] != 0.0 {
                    structure[[i, j]] = 1.0;
                    structure[[j, i]] = 1.0;
                }
            }
        }
    }
    Adjacency::from_structure(GraphKind::KNearest, structure)
}
