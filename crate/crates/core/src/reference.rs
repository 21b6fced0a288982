//! Brute-force reference constructions.
//!
//! Deliberately naive re-derivations of the graph builders, the alignment
//! distance, and the equal-error-rate sweep. They share no code with the
//! production paths and exist to cross-check them, both in the test suites
//! and behind the `selftest` command.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::rng;

/// Generates a grammar-valid stroke-flag sequence of length `n >= 2`.
pub fn random_valid_flags(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    assert!(n >= 2);
    let mut flags = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let mut len = 2 + rng::index(r, remaining - 1);
        if remaining - len == 1 {
            len += 1;
        }
        flags.push(1);
        for _ in 0..len - 2 {
            flags.push(0);
        }
        flags.push(2);
        remaining -= len;
    }
    flags
}

/// Step-graph membership evaluated pair by pair from the raw definition:
/// same stroke and index distance at most `k`.
pub fn brute_force_kstep(flags: &[u8], k: usize) -> Array2<f64> {
    let n = flags.len();
    // Stroke label per point, built by an independent scan.
    let mut label = vec![usize::MAX; n];
    let mut current = 0usize;
    let mut inside = false;
    for i in 0..n {
        match flags[i] {
            1 => {
                current += 1;
                inside = true;
            }
            0 => {}
            2 => {}
            _ => panic!("invalid flag"),
        }
        label[i] = if inside { current } else { usize::MAX };
        if flags[i] == 2 {
            inside = false;
        }
    }
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dist = i.abs_diff(j);
            if label[i] == label[j] && label[i] != usize::MAX && dist <= k {
                m[[i, j]] = 1.0;
            }
        }
    }
    m
}

/// Nearest-neighbor membership by counting: `j` is linked from `i` when fewer
/// than `k` other nodes are strictly closer (ties resolved by lower index).
pub fn brute_force_knn(coords: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = coords.nrows();
    let d2 = |a: usize, b: usize| {
        let dx = coords[[a, 0]] - coords[[b, 0]];
        let dy = coords[[a, 1]] - coords[[b, 1]];
        dx * dx + dy * dy
    };
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut closer = 0usize;
            for other in 0..n {
                if other == i || other == j {
                    continue;
                }
                let a = d2(i, other);
                let b = d2(i, j);
                if a < b || (a == b && other < j) {
                    closer += 1;
                }
            }
            if closer < k {
                m[[i, j]] = 1.0;
            }
        }
    }
    m
}

/// Minimum accumulated alignment cost by exhaustive enumeration of every
/// monotone path, accumulating forward along each path.
pub fn enumerate_dtw_min_cost(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    assert_eq!(x.ncols(), y.ncols());
    let (l1, l2) = (x.nrows(), y.nrows());
    fn cell(x: &Array2<f64>, y: &Array2<f64>, i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for c in 0..x.ncols() {
            let d = x[[i, c]] - y[[j, c]];
            s += d * d;
        }
        s
    }
    fn walk(
        x: &Array2<f64>,
        y: &Array2<f64>,
        i: usize,
        j: usize,
        acc: f64,
        best: &mut f64,
    ) {
        let acc = acc + cell(x, y, i, j);
        let (l1, l2) = (x.nrows(), y.nrows());
        if i == l1 - 1 && j == l2 - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < l1 {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < l2 {
            walk(x, y, i, j + 1, acc, best);
        }
        if i + 1 < l1 && j + 1 < l2 {
            walk(x, y, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    let _ = (l1, l2);
    best
}

/// Equal error rate by naive recount at every candidate threshold.
///
/// Candidates are the sorted union of scores plus the midpoints between
/// consecutive distinct values. FRR counts genuine scores above the
/// threshold, FAR counts impostor scores at or below it. Selection minimizes
/// `|FAR - FRR|`, then the reported rate `(FAR + FRR) / 2`, then the
/// threshold itself.
pub fn brute_force_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    assert!(!genuine.is_empty() && !impostor.is_empty());
    let mut values: Vec<f64> = genuine.iter().chain(impostor.iter()).copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut candidates = values.clone();
    for w in values.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // exact comparison: rates are fractions over fixed denominators, so the
    // tie-breaking works on integer cross-products
    let (ng, ni) = (genuine.len() as u64, impostor.len() as u64);
    let mut best: Option<(u64, u64, f64)> = None; // (gap numerator, sum numerator, thr)
    for &t in &candidates {
        let cg = genuine.iter().filter(|&&s| s > t).count() as u64;
        let ci = impostor.iter().filter(|&&s| s <= t).count() as u64;
        let gap = (ci * ng).abs_diff(cg * ni);
        let sum = ci * ng + cg * ni;
        let better = match best {
            None => true,
            Some((bg, bs, bt)) => gap < bg || (gap == bg && (sum, t) < (bs, bt)),
        };
        if better {
            best = Some((gap, sum, t));
        }
    }
    let (_, sum, thr) = best.unwrap();
    (sum as f64 / (2 * ng * ni) as f64, thr)
}
