//! The dual-constraint metric objective and triplet batch construction.
//!
//! Two hinge terms over alignment distances between embedded sequences: a
//! relative margin across (anchor, genuine, forged) triples, and a pairwise
//! threshold shared across authors that pins genuine pairs below and forged
//! pairs above a global similarity level. Both kinds of forgery (skilled and
//! random) enter the forged pools; random-forgery terms can be reweighted.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Loss hyperparameters.
#[derive(Debug, Clone)]
pub struct LossHyper {
    /// Margin of the relative term.
    pub gamma1: f64,
    /// Unified similarity threshold of the pairwise term.
    pub gamma2: f64,
    /// Relaxation of the pairwise term.
    pub xi: f64,
    /// Weight of the relative-margin sum.
    pub alpha: f64,
    /// Weight of the pairwise-threshold sum.
    pub beta: f64,
    /// Extra weight on terms whose forged sample is a random forgery.
    pub random_forgery_weight: f64,
    /// Average terms instead of raw sums.
    pub normalize_terms: bool,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            gamma1: 1.0,
            gamma2: 1.5,
            xi: 0.1,
            alpha: 1.0,
            beta: 1.0,
            random_forgery_weight: 1.0,
            normalize_terms: false,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 <= 0.0 {
            return Err(Error::Config("gamma1 must be positive".into()));
        }
        if self.xi < 0.0 {
            return Err(Error::Config("xi must be non-negative".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(
                "alpha and beta must be non-negative with a positive sum".into(),
            ));
        }
        if self.random_forgery_weight < 0.0 {
            return Err(Error::Config("random_forgery_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Distance flavor used inside the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtwMode {
    /// Exact distance with path subgradients.
    Hard,
    /// Smoothed distance.
    Soft { gamma: f64 },
}

/// Hinge on the gap between the genuine and forged distances from a shared
/// anchor.
pub fn relative_margin_loss(d_ag: f64, d_af: f64, gamma1: f64) -> f64 {
    (d_ag - d_af + gamma1).max(0.0)
}

/// Hinge pinning a distance below (genuine, `label = +1`) or above (forged,
/// `label = -1`) the shared threshold, with relaxation `xi`.
pub fn pairwise_threshold_loss(d: f64, label: i8, gamma2: f64, xi: f64) -> f64 {
    debug_assert!(label == 1 || label == -1);
    (xi - f64::from(label) * (gamma2 - d)).max(0.0)
}

/// One author's sampled step: anchor/positive genuine signatures plus
/// skilled and random forged pools, as indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub author: usize,
    /// (user, genuine index)
    pub anchors: Vec<(usize, usize)>,
    pub positives: Vec<(usize, usize)>,
    /// (user, skilled index) — forgeries of the author
    pub skilled: Vec<(usize, usize)>,
    /// (user, genuine index) — other users' genuine signatures
    pub random: Vec<(usize, usize)>,
}

impl TripletBatch {
    /// Every signature in the batch, deduplicated, in a fixed order:
    /// anchors, positives, skilled, random.
    pub fn roles(&self) -> (usize, usize, usize, usize) {
        (
            self.anchors.len(),
            self.positives.len(),
            self.skilled.len(),
            self.random.len(),
        )
    }
}

/// Pool sizes per sampled batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchCounts {
    pub n_anchors: usize,
    pub n_positives: usize,
    pub n_skilled: usize,
    pub n_random: usize,
}

impl Default for BatchCounts {
    fn default() -> Self {
        BatchCounts {
            n_anchors: 2,
            n_positives: 2,
            n_skilled: 2,
            n_random: 2,
        }
    }
}

/// Seeded draw of one author's triplet batch.
///
/// Anchors and positives are disjoint genuine samples of the author; skilled
/// forgeries come from the author's forged pool; random negatives are drawn
/// without replacement from the union of genuine signatures of other users
/// in the author's split, so training never touches the test split.
pub fn sample_triplets(
    dataset: &Dataset,
    author: usize,
    counts: BatchCounts,
    seed: u64,
) -> Result<TripletBatch> {
    let user = &dataset.users[author];
    if counts.n_anchors == 0 || counts.n_positives == 0 {
        return Err(Error::InsufficientData(
            "need at least one anchor and one positive".into(),
        ));
    }
    let need_genuine = counts.n_anchors + counts.n_positives;
    if user.genuine.len() < need_genuine {
        return Err(Error::InsufficientData(format!(
            "user {} has {} genuine signatures, needs {need_genuine} for disjoint anchors/positives",
            user.user_id,
            user.genuine.len()
        )));
    }
    if user.skilled.len() < counts.n_skilled {
        return Err(Error::InsufficientData(format!(
            "user {} has {} skilled forgeries, needs {}",
            user.user_id,
            user.skilled.len(),
            counts.n_skilled
        )));
    }
    if counts.n_skilled + counts.n_random == 0 {
        return Err(Error::InsufficientData("forged pool would be empty".into()));
    }

    let mut r = rng::stream(seed);
    let picked = rng::sample_indices(&mut r, user.genuine.len(), need_genuine);
    let anchors = picked[..counts.n_anchors]
        .iter()
        .map(|&i| (author, i))
        .collect();
    let positives = picked[counts.n_anchors..]
        .iter()
        .map(|&i| (author, i))
        .collect();
    let skilled = rng::sample_indices(&mut r, user.skilled.len(), counts.n_skilled)
        .into_iter()
        .map(|i| (author, i))
        .collect();

    let mut random_pool = Vec::new();
    for (u, other) in dataset.users.iter().enumerate() {
        if u == author || other.split != user.split {
            continue;
        }
        for g in 0..other.genuine.len() {
            random_pool.push((u, g));
        }
    }
    if random_pool.len() < counts.n_random {
        return Err(Error::InsufficientData(format!(
            "random-forgery pool has {} signatures, needs {}",
            random_pool.len(),
            counts.n_random
        )));
    }
    let random = rng::sample_indices(&mut r, random_pool.len(), counts.n_random)
        .into_iter()
        .map(|i| random_pool[i])
        .collect();

    Ok(TripletBatch {
        author,
        anchors,
        positives,
        skilled,
        random,
    })
}

/// Embedding nodes for one batch, on the loss tape, in batch order.
pub struct EmbeddedBatch {
    pub anchors: Vec<Var>,
    pub positives: Vec<Var>,
    pub skilled: Vec<Var>,
    pub random: Vec<Var>,
}

/// The three scalar nodes of one author's objective.
pub struct AuthorLossTerms {
    pub total: Var,
    pub margin: Var,
    pub threshold: Var,
}

fn distance(tape: &mut Tape, a: Var, b: Var, mode: DtwMode) -> Var {
    let denom = (tape.value(a).nrows() + tape.value(b).nrows()) as f64;
    let cost = match mode {
        DtwMode::Hard => tape.dtw_cost(a, b),
        DtwMode::Soft { gamma } => tape.soft_dtw(a, b, gamma),
    };
    tape.scale(cost, 1.0 / denom)
}

fn hinge_shifted(tape: &mut Tape, x: Var, shift: f64) -> Var {
    // relu(x + shift) on scalars
    let c = tape.scalar_constant(shift);
    let s = tape.add(x, c);
    tape.relu(s)
}

/// Builds the author objective over embedded sequences.
///
/// Margin terms run over every (anchor, positive, forged) combination;
/// threshold terms over every (anchor, positive) and (anchor, forged) pair.
/// Skilled and random forgeries share the forged pools, with random terms
/// scaled by `random_forgery_weight`.
pub fn author_loss(
    tape: &mut Tape,
    batch: &EmbeddedBatch,
    hyper: &LossHyper,
    mode: DtwMode,
) -> Result<AuthorLossTerms> {
    hyper.validate()?;
    if batch.anchors.is_empty() {
        return Err(Error::InsufficientData("empty anchor pool".into()));
    }
    if batch.positives.is_empty() {
        return Err(Error::InsufficientData("empty positive pool".into()));
    }
    if batch.skilled.is_empty() && batch.random.is_empty() {
        return Err(Error::InsufficientData("empty forged pool".into()));
    }

    // forged pool with per-sample weights
    let forged: Vec<(Var, f64)> = batch
        .skilled
        .iter()
        .map(|&v| (v, 1.0))
        .chain(
            batch
                .random
                .iter()
                .map(|&v| (v, hyper.random_forgery_weight)),
        )
        .collect();

    let d_ag: Vec<Vec<Var>> = batch
        .anchors
        .iter()
        .map(|&a| {
            batch
                .positives
                .iter()
                .map(|&g| distance(tape, a, g, mode))
                .collect()
        })
        .collect();
    let d_af: Vec<Vec<Var>> = batch
        .anchors
        .iter()
        .map(|&a| {
            forged
                .iter()
                .map(|&(f, _)| distance(tape, a, f, mode))
                .collect()
        })
        .collect();

    let mut margin_terms: Vec<Var> = Vec::new();
    for (i, _) in batch.anchors.iter().enumerate() {
        for j in 0..batch.positives.len() {
            for (k, &(_, w)) in forged.iter().enumerate() {
                let neg = tape.scale(d_af[i][k], -1.0);
                let gap = tape.add(d_ag[i][j], neg);
                let term = hinge_shifted(tape, gap, hyper.gamma1);
                margin_terms.push(if w == 1.0 { term } else { tape.scale(term, w) });
            }
        }
    }

    let mut threshold_terms: Vec<Var> = Vec::new();
    for (i, _) in batch.anchors.iter().enumerate() {
        for j in 0..batch.positives.len() {
            // genuine: relu(xi - gamma2 + d)
            let term = hinge_shifted(tape, d_ag[i][j], hyper.xi - hyper.gamma2);
            threshold_terms.push(term);
        }
        for (k, &(_, w)) in forged.iter().enumerate() {
            // forged: relu(xi + gamma2 - d)
            let neg = tape.scale(d_af[i][k], -1.0);
            let term = hinge_shifted(tape, neg, hyper.xi + hyper.gamma2);
            threshold_terms.push(if w == 1.0 { term } else { tape.scale(term, w) });
        }
    }

    let sum_nodes = |tape: &mut Tape, terms: &[Var]| -> Var {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t);
        }
        acc
    };
    let mut margin = sum_nodes(tape, &margin_terms);
    let mut threshold = sum_nodes(tape, &threshold_terms);
    if hyper.normalize_terms {
        margin = tape.scale(margin, 1.0 / margin_terms.len() as f64);
        threshold = tape.scale(threshold, 1.0 / threshold_terms.len() as f64);
    }
    let am = tape.scale(margin, hyper.alpha);
    let bt = tape.scale(threshold, hyper.beta);
    let total = tape.add(am, bt);
    Ok(AuthorLossTerms {
        total,
        margin,
        threshold,
    })
}

/// Scalar-only composition of the objective from precomputed distances:
/// `d_ag[i][j]` anchor-to-positive, `d_af[i][k]` anchor-to-forged, with
/// `random_flags[k]` marking random forgeries. Returns (total, margin sum,
/// threshold sum). Mirrors [`author_loss`] exactly; kept separate so tests
/// and analyses can combine distances without a tape.
pub fn author_loss_from_distances(
    d_ag: &Array2<f64>,
    d_af: &Array2<f64>,
    random_flags: &[bool],
    hyper: &LossHyper,
) -> (f64, f64, f64) {
    assert_eq!(d_ag.nrows(), d_af.nrows());
    assert_eq!(d_af.ncols(), random_flags.len());
    let weight = |k: usize| {
        if random_flags[k] {
            hyper.random_forgery_weight
        } else {
            1.0
        }
    };
    let mut margin = 0.0;
    let mut n_margin = 0usize;
    for i in 0..d_ag.nrows() {
        for j in 0..d_ag.ncols() {
            for k in 0..d_af.ncols() {
                margin +=
                    weight(k) * relative_margin_loss(d_ag[[i, j]], d_af[[i, k]], hyper.gamma1);
                n_margin += 1;
            }
        }
    }
    let mut threshold = 0.0;
    let mut n_threshold = 0usize;
    for i in 0..d_ag.nrows() {
        for j in 0..d_ag.ncols() {
            threshold += pairwise_threshold_loss(d_ag[[i, j]], 1, hyper.gamma2, hyper.xi);
            n_threshold += 1;
        }
        for k in 0..d_af.ncols() {
            threshold +=
                weight(k) * pairwise_threshold_loss(d_af[[i, k]], -1, hyper.gamma2, hyper.xi);
            n_threshold += 1;
        }
    }
    if hyper.normalize_terms {
        margin /= n_margin as f64;
        threshold /= n_threshold as f64;
    }
    (
        hyper.alpha * margin + hyper.beta * threshold,
        margin,
        threshold,
    )
}
