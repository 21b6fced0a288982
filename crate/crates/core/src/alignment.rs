//! Sequence alignment: exact dynamic-programming distance, the optimal path
//! with deterministic tie-breaking, path subgradients, and a smoothed
//! variant for gradient-friendly training.
//!
//! Cell cost is the squared Euclidean distance between row vectors. The full
//! L1 x L2 matrix is computed; no banding.

use ndarray::Array2;

/// Outcome of an exact alignment.
///
/// `path` is 0-based: it starts at `(0, 0)`, ends at `(L1-1, L2-1)`, and each
/// step advances the first index, the second, or both by one. `cost` is the
/// sum of cell costs along `path`; `normalized` divides by `L1 + L2`.
/// `tie_gap` is the smallest margin by which the backtrace preferred its move
/// over an alternative (infinite when every choice was forced or strict) —
/// useful as a guard when comparing subgradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub cost: f64,
    pub path: Vec<(usize, usize)>,
    pub normalized: f64,
    pub tie_gap: f64,
}

fn cell_cost(x: &Array2<f64>, y: &Array2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..x.ncols() {
        let d = x[[i, c]] - y[[j, c]];
        s += d * d;
    }
    s
}

/// Exact alignment distance with backtraced path.
///
/// Ties during backtrace prefer the diagonal move, then the vertical
/// (first-sequence) move, then the horizontal.
pub fn dtw_distance(x: &Array2<f64>, y: &Array2<f64>) -> AlignmentResult {
    assert_eq!(
        x.ncols(),
        y.ncols(),
        "alignment inputs must share the feature dimension"
    );
    let (l1, l2) = (x.nrows(), y.nrows());
    assert!(l1 >= 1 && l2 >= 1, "alignment inputs must be non-empty");

    let mut acc = Array2::zeros((l1, l2));
    acc[[0, 0]] = cell_cost(x, y, 0, 0);
    for i in 1..l1 {
        acc[[i, 0]] = cell_cost(x, y, i, 0) + acc[[i - 1, 0]];
    }
    for j in 1..l2 {
        acc[[0, j]] = cell_cost(x, y, 0, j) + acc[[0, j - 1]];
    }
    for i in 1..l1 {
        for j in 1..l2 {
            let best = acc[[i - 1, j - 1]].min(acc[[i - 1, j]]).min(acc[[i, j - 1]]);
            acc[[i, j]] = cell_cost(x, y, i, j) + best;
        }
    }

    let mut path = Vec::with_capacity(l1 + l2);
    let mut tie_gap = f64::INFINITY;
    let (mut i, mut j) = (l1 - 1, l2 - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        // Candidates in preference order: diagonal, vertical, horizontal.
        let mut options: [(f64, usize, usize); 3] =
            [(f64::INFINITY, 0, 0), (f64::INFINITY, 0, 0), (f64::INFINITY, 0, 0)];
        let mut n_opts = 0;
        if i > 0 && j > 0 {
            options[n_opts] = (acc[[i - 1, j - 1]], i - 1, j - 1);
            n_opts += 1;
        }
        if i > 0 {
            options[n_opts] = (acc[[i - 1, j]], i - 1, j);
            n_opts += 1;
        }
        if j > 0 {
            options[n_opts] = (acc[[i, j - 1]], i, j - 1);
            n_opts += 1;
        }
        let mut pick = 0;
        for k in 1..n_opts {
            if options[k].0 < options[pick].0 {
                pick = k;
            }
        }
        for k in 0..n_opts {
            if k != pick {
                tie_gap = tie_gap.min(options[k].0 - options[pick].0);
            }
        }
        i = options[pick].1;
        j = options[pick].2;
        path.push((i, j));
    }
    path.reverse();

    let cost = acc[[l1 - 1, l2 - 1]];
    AlignmentResult {
        cost,
        normalized: cost / (l1 + l2) as f64,
        path,
        tie_gap,
    }
}

/// Subgradient of `dtw_distance(x, y).cost` along the backtraced path.
pub fn dtw_grad(x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let result = dtw_distance(x, y);
    path_grad(x, y, &result.path, 1.0)
}

/// Path subgradient scaled by an upstream factor.
pub fn path_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    path: &[(usize, usize)],
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dy = Array2::zeros(y.raw_dim());
    for &(t, s) in path {
        for c in 0..x.ncols() {
            let diff = x[[t, c]] - y[[s, c]];
            dx[[t, c]] += 2.0 * diff * scale;
            dy[[s, c]] -= 2.0 * diff * scale;
        }
    }
    (dx, dy)
}

fn soft_min3(a: f64, b: f64, c: f64, gamma: f64) -> f64 {
    let m = a.min(b).min(c);
    let sum = (-(a - m) / gamma).exp() + (-(b - m) / gamma).exp() + (-(c - m) / gamma).exp();
    m - gamma * sum.ln()
}

/// Smoothed alignment cost: the hard minimum in the recursion is replaced by
/// a log-sum-exp soft minimum with temperature `gamma`.
///
/// Smooth everywhere; converges to `dtw_distance` as `gamma -> 0`. Note the
/// soft minimum undershoots, so identical inputs give a slightly negative
/// cost.
pub fn soft_dtw(x: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> f64 {
    soft_dtw_matrix(x, y, gamma)[[x.nrows() - 1, y.nrows() - 1]]
}

fn soft_dtw_matrix(x: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> Array2<f64> {
    assert!(gamma > 0.0, "gamma must be positive");
    assert_eq!(x.ncols(), y.ncols());
    let (l1, l2) = (x.nrows(), y.nrows());
    let mut r = Array2::zeros((l1, l2));
    r[[0, 0]] = cell_cost(x, y, 0, 0);
    for i in 1..l1 {
        r[[i, 0]] = cell_cost(x, y, i, 0) + r[[i - 1, 0]];
    }
    for j in 1..l2 {
        r[[0, j]] = cell_cost(x, y, 0, j) + r[[0, j - 1]];
    }
    for i in 1..l1 {
        for j in 1..l2 {
            r[[i, j]] = cell_cost(x, y, i, j)
                + soft_min3(r[[i - 1, j - 1]], r[[i - 1, j]], r[[i, j - 1]], gamma);
        }
    }
    r
}

/// Smoothed cost plus its exact gradient via the standard reverse
/// occupation-weight recurrence.
pub fn soft_dtw_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    gamma: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let (l1, l2) = (x.nrows(), y.nrows());
    let r = soft_dtw_matrix(x, y, gamma);
    let mut e = Array2::zeros((l1, l2));
    e[[l1 - 1, l2 - 1]] = 1.0;
    for i in (0..l1).rev() {
        for j in (0..l2).rev() {
            if i == l1 - 1 && j == l2 - 1 {
                continue;
            }
            let mut acc = 0.0;
            if i + 1 < l1 {
                let w = ((r[[i + 1, j]] - r[[i, j]] - cell_cost(x, y, i + 1, j)) / gamma).exp();
                acc += e[[i + 1, j]] * w;
            }
            if j + 1 < l2 {
                let w = ((r[[i, j + 1]] - r[[i, j]] - cell_cost(x, y, i, j + 1)) / gamma).exp();
                acc += e[[i, j + 1]] * w;
            }
            if i + 1 < l1 && j + 1 < l2 {
                let w = ((r[[i + 1, j + 1]] - r[[i, j]] - cell_cost(x, y, i + 1, j + 1)) / gamma)
                    .exp();
                acc += e[[i + 1, j + 1]] * w;
            }
            e[[i, j]] = acc;
        }
    }
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dy = Array2::zeros(y.raw_dim());
    for i in 0..l1 {
        for j in 0..l2 {
            let w = e[[i, j]];
            if w == 0.0 {
                continue;
            }
            for c in 0..x.ncols() {
                let diff = x[[i, c]] - y[[j, c]];
                dx[[i, c]] += 2.0 * diff * w;
                dy[[j, c]] -= 2.0 * diff * w;
            }
        }
    }
    (r[[l1 - 1, l2 - 1]], dx, dy)
}
